"""
Synthetic live/spoof dataset with pixel masks, leave-one-type-out protocols,
and an on-disk manifest + blob format.

Live images are smooth low-frequency colour fields. A spoof of type ``k`` is
a live base whose pixels inside a rectangular region lose contrast, pick up a
small tint and a fine luminance grain shared by every type (the "medium"),
and carry a random-phase grating at a type-specific frequency and
orientation. Regions are aligned to the mask grid, so the target mask is the
exact block-downsampled region indicator.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import FormatError, UsageError

LIVE = "live"
FORMAT_NAME = "dtn-dataset"
FORMAT_VERSION = 1
MANIFEST = "manifest.jsonl"
BLOB = "blob.bin"


@dataclass(frozen=True)
class GenConfig:
    hw: int = 32
    n_types: int = 4
    per_class: int = 200
    seed: int = 0
    mask_hw: int = 8
    difficulty: float = 0.5

    def __post_init__(self):
        if self.n_types < 2:
            raise UsageError("at least 2 spoof types are required")
        if self.per_class < 1:
            raise UsageError("per_class must be >= 1")
        if self.hw % self.mask_hw:
            raise UsageError(f"mask extent {self.mask_hw} must divide image extent {self.hw}")
        if not 0.0 <= self.difficulty <= 1.0:
            raise UsageError("difficulty must lie in [0, 1]")


@dataclass
class Dataset:
    images: np.ndarray      # [N,H,W,6] float32 in [0,1]
    labels: np.ndarray      # [N] 0 live, 1 spoof
    masks: np.ndarray       # [N,h,w] uint8
    types: np.ndarray       # [N] spoof type index, -1 for live
    ids: np.ndarray         # [N] unique ints
    regions: np.ndarray     # [N,4] (r0, c0, r1, c1) on the mask grid, -1 for live
    type_names: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def hw(self) -> int:
        return self.images.shape[1]

    @property
    def mask_hw(self) -> int:
        return self.masks.shape[1]

    def type_tag(self, row: int) -> str:
        t = int(self.types[row])
        return LIVE if t < 0 else self.type_names[t]

    def rows_for(self, ids) -> np.ndarray:
        lookup = {int(i): r for r, i in enumerate(self.ids)}
        return np.array([lookup[int(i)] for i in ids], dtype=np.intp)

    def subset(self, ids) -> "Dataset":
        rows = self.rows_for(ids)
        return Dataset(self.images[rows], self.labels[rows], self.masks[rows], self.types[rows],
                       self.ids[rows], self.regions[rows], list(self.type_names))

    def type_index(self, name: str) -> int:
        try:
            return self.type_names.index(name)
        except ValueError:
            raise UsageError(f"unknown spoof type {name!r}; have {self.type_names}") from None

    def counts(self) -> Dict[str, int]:
        out = {LIVE: int(np.sum(self.types < 0))}
        for k, name in enumerate(self.type_names):
            out[name] = int(np.sum(self.types == k))
        return out


def type_params(k: int, n_types: int) -> Dict[str, object]:
    """Grating frequency (cycles/pixel), orientation, channel weights and tint for type ``k``."""
    theta = np.pi * k / n_types
    freq = 0.20 + 0.04 * ((3 * k) % 4)
    chan = 1.0 + 0.5 * np.array([np.cos(2.1 * k), np.sin(2.1 * k), -np.cos(2.1 * k)])
    tint = 0.03 * np.array([np.cos(1.3 * k + 0.5), np.sin(1.3 * k + 0.5), np.cos(1.3 * k + 2.0)])
    return {"theta": theta, "freq": freq, "channel_weights": chan, "tint": tint}


def hsv_like(rgb: np.ndarray) -> np.ndarray:
    """Smooth hue/saturation/value-style channels computed from RGB in [0,1]."""
    temp = 0.05
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    stack = np.stack([r, g, b], axis=-1) / temp
    vmax = temp * (np.logaddexp.reduce(stack, axis=-1) - np.log(3.0))
    vmin = -temp * (np.logaddexp.reduce(-stack, axis=-1) - np.log(3.0))
    value = np.clip(vmax, 0.0, 1.0)
    sat = np.clip((vmax - vmin) / (np.abs(vmax) + 0.1), 0.0, 1.0)
    hue = 0.5 + 0.5 * np.tanh(2.0 * (g - b) + (r - 0.5 * (g + b)))
    return np.stack([hue, sat, value], axis=-1)


def live_rgb(rng: np.random.Generator, hw: int, difficulty: float) -> np.ndarray:
    yy, xx = np.mgrid[0:hw, 0:hw] / hw
    img = np.empty((hw, hw, 3))
    lum = np.zeros((hw, hw))
    for _ in range(3):
        fx, fy = rng.uniform(0.0, 2.0, size=2)
        lum += rng.uniform(0.03, 0.12) * np.cos(2 * np.pi * (fx * xx + fy * yy) + rng.uniform(0, 2 * np.pi))
    for c in range(3):
        field_ = np.full((hw, hw), rng.uniform(0.3, 0.7)) + lum
        for _ in range(2):
            fx, fy = rng.uniform(0.0, 1.5, size=2)
            field_ += rng.uniform(0.02, 0.08) * np.cos(2 * np.pi * (fx * xx + fy * yy) + rng.uniform(0, 2 * np.pi))
        img[..., c] = field_
    noise = 0.01 + 0.03 * difficulty
    img += rng.normal(0.0, noise, size=img.shape)
    return img


def apply_spoof(rgb: np.ndarray, k: int, n_types: int, region_px: Tuple[int, int, int, int],
                rng: np.random.Generator, difficulty: float) -> np.ndarray:
    p = type_params(k, n_types)
    hw = rgb.shape[0]
    r0, c0, r1, c1 = region_px
    yy, xx = np.mgrid[0:hw, 0:hw].astype(np.float64)
    amp = 0.12 * (1.0 - 0.6 * difficulty) * rng.uniform(0.7, 1.3)
    phase = rng.uniform(0, 2 * np.pi)
    u = xx * np.cos(p["theta"]) + yy * np.sin(p["theta"])
    grating = amp * np.cos(2 * np.pi * p["freq"] * u + phase)
    out = rgb.copy()
    patch = out[r0:r1, c0:c1]
    mean = patch.mean(axis=(0, 1), keepdims=True)
    contrast = 1.0 - 0.3 * (1.0 - 0.5 * difficulty)
    patch = mean + contrast * (patch - mean)
    grain = rng.normal(0.0, 0.08 * (1.0 - 0.5 * difficulty), size=patch.shape[:2] + (1,))
    patch = patch + grating[r0:r1, c0:c1, None] * p["channel_weights"] + p["tint"] + grain
    out[r0:r1, c0:c1] = patch
    return out


def compose(rgb: np.ndarray) -> np.ndarray:
    rgb = np.clip(rgb, 0.0, 1.0)
    return np.concatenate([rgb, hsv_like(rgb)], axis=-1).astype(np.float32)


def random_region(rng: np.random.Generator, mask_hw: int) -> Tuple[int, int, int, int]:
    lo = max(1, mask_hw // 2)
    h, w = rng.integers(lo, mask_hw + 1, size=2)
    r0 = rng.integers(0, mask_hw - h + 1)
    c0 = rng.integers(0, mask_hw - w + 1)
    return int(r0), int(c0), int(r0 + h), int(c0 + w)


def make_sample(rng: np.random.Generator, cfg: GenConfig, spoof_type: int,
                region: Optional[Tuple[int, int, int, int]] = None):
    """One (image, mask, region) triple; ``spoof_type`` < 0 makes a live sample."""
    rgb = live_rgb(rng, cfg.hw, cfg.difficulty)
    mask = np.zeros((cfg.mask_hw, cfg.mask_hw), dtype=np.uint8)
    if spoof_type < 0:
        return compose(rgb), mask, (-1, -1, -1, -1)
    region = region if region is not None else random_region(rng, cfg.mask_hw)
    s = cfg.hw // cfg.mask_hw
    r0, c0, r1, c1 = region
    rgb = apply_spoof(rgb, spoof_type, cfg.n_types, (r0 * s, c0 * s, r1 * s, c1 * s), rng, cfg.difficulty)
    mask[r0:r1, c0:c1] = 1
    return compose(rgb), mask, tuple(region)


def generate(cfg: GenConfig) -> Dataset:
    """``per_class`` live samples plus ``per_class`` samples of every spoof type."""
    kinds = [-1] * cfg.per_class + [k for k in range(cfg.n_types) for _ in range(cfg.per_class)]
    seqs = np.random.SeedSequence(cfg.seed).spawn(len(kinds))
    images, masks, regions = [], [], []
    for kind, ss in zip(kinds, seqs):
        img, m, reg = make_sample(np.random.default_rng(ss), cfg, kind)
        images.append(img)
        masks.append(m)
        regions.append(reg)
    types = np.array(kinds, dtype=np.int64)
    return Dataset(
        images=np.stack(images),
        labels=(types >= 0).astype(np.int64),
        masks=np.stack(masks),
        types=types,
        ids=np.arange(len(kinds), dtype=np.int64),
        regions=np.array(regions, dtype=np.int64),
        type_names=[f"type{k}" for k in range(cfg.n_types)],
    )


@dataclass
class Protocol:
    held_out_type: str
    train_ids: np.ndarray
    test_ids: np.ndarray
    live_fraction: float = 0.8
    seed: int = 0


def build_protocol(dataset: Dataset, held_out_type: str, live_fraction: float = 0.8,
                   seed: int = 0) -> Protocol:
    """Train on every other spoof type plus a live share; test on the held-out type plus the rest."""
    k = dataset.type_index(held_out_type)
    if not 0.0 < live_fraction < 1.0:
        raise UsageError("live_fraction must lie in (0, 1)")
    live_ids = dataset.ids[dataset.types < 0]
    perm = np.random.default_rng(seed).permutation(len(live_ids))
    n_train = int(round(live_fraction * len(live_ids)))
    live_train, live_test = np.sort(live_ids[perm[:n_train]]), np.sort(live_ids[perm[n_train:]])
    spoof_train = dataset.ids[(dataset.types >= 0) & (dataset.types != k)]
    spoof_test = dataset.ids[dataset.types == k]
    return Protocol(held_out_type, np.sort(np.concatenate([live_train, spoof_train])),
                    np.sort(np.concatenate([live_test, spoof_test])), live_fraction, seed)


# -- persistence --------------------------------------------------------------

def _digest(img_bytes: bytes, mask_bytes: bytes) -> str:
    h = hashlib.sha256()
    h.update(img_bytes)
    h.update(mask_bytes)
    return h.hexdigest()


def save(dataset: Dataset, path) -> Path:
    """Write ``manifest.jsonl`` and ``blob.bin`` under directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    header = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "hw": dataset.hw,
              "channels": int(dataset.images.shape[-1]), "mask_hw": dataset.mask_hw,
              "types": dataset.type_names, "blob": BLOB}
    lines = [json.dumps(header, sort_keys=True)]
    offset = 0
    with open(path / BLOB, "wb") as blob:
        for r in range(len(dataset)):
            ib = dataset.images[r].astype("<f4").tobytes()
            mb = dataset.masks[r].astype(np.uint8).tobytes()
            blob.write(ib)
            blob.write(mb)
            rec = {"id": int(dataset.ids[r]), "label": int(dataset.labels[r]),
                   "type": dataset.type_tag(r), "image_offset": offset, "image_nbytes": len(ib),
                   "mask_offset": offset + len(ib), "mask_nbytes": len(mb),
                   "region": [int(v) for v in dataset.regions[r]], "sha256": _digest(ib, mb)}
            offset += len(ib) + len(mb)
            lines.append(json.dumps(rec, sort_keys=True))
    (path / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load(path) -> Dataset:
    path = Path(path)
    try:
        lines = (path / MANIFEST).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise FormatError(f"cannot read manifest: {e}") from None
    try:
        header = json.loads(lines[0])
        records = [json.loads(l) for l in lines[1:] if l.strip()]
    except (IndexError, json.JSONDecodeError) as e:
        raise FormatError(f"malformed manifest: {e}") from None
    if header.get("format") != FORMAT_NAME:
        raise FormatError("not a dataset manifest")
    if header.get("version") != FORMAT_VERSION:
        raise FormatError(f"unsupported dataset version {header.get('version')}")
    blob_path = path / header.get("blob", BLOB)
    if not blob_path.is_file():
        raise FormatError(f"blob {blob_path.name} referenced by manifest is missing")
    blob = blob_path.read_bytes()
    hw, ch, mhw = header["hw"], header["channels"], header["mask_hw"]
    names = list(header["types"])
    n = len(records)
    images = np.empty((n, hw, hw, ch), dtype=np.float32)
    masks = np.empty((n, mhw, mhw), dtype=np.uint8)
    labels = np.empty(n, dtype=np.int64)
    types = np.empty(n, dtype=np.int64)
    ids = np.empty(n, dtype=np.int64)
    regions = np.empty((n, 4), dtype=np.int64)
    for r, rec in enumerate(records):
        io, il = rec["image_offset"], rec["image_nbytes"]
        mo, ml = rec["mask_offset"], rec["mask_nbytes"]
        if io + il > len(blob) or mo + ml > len(blob) or il != hw * hw * ch * 4 or ml != mhw * mhw:
            raise FormatError(f"sample {rec['id']}: blob range out of bounds or wrong size")
        ib, mb = blob[io:io + il], blob[mo:mo + ml]
        if _digest(ib, mb) != rec["sha256"]:
            raise FormatError(f"sample {rec['id']}: checksum mismatch")
        images[r] = np.frombuffer(ib, dtype="<f4").reshape(hw, hw, ch)
        masks[r] = np.frombuffer(mb, dtype=np.uint8).reshape(mhw, mhw)
        labels[r] = rec["label"]
        ids[r] = rec["id"]
        types[r] = -1 if rec["type"] == LIVE else names.index(rec["type"])
        regions[r] = rec["region"]
    return Dataset(images, labels, masks, types, ids, regions, names)
