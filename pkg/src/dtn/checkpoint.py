"""
Binary checkpoints.

Layout: 8-byte magic, u32 version, u64 header length, a UTF-8 JSON header
(configs, step counter, array descriptors), the arrays as raw little-endian
bytes in tree order, optional optimizer moments, then a SHA-256 digest of
everything before it.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .errors import DimensionError, FormatError, UsageError
from .tree import DeepTree, TreeConfig

MAGIC = b"DTNCKPT\x00"
VERSION = 1
_DIGEST = 32


@dataclass
class Checkpoint:
    tree: DeepTree
    train_config: Optional[dict] = None
    step: int = 0
    optimizer_state: Optional[dict] = None   # phase -> (t, arrays)
    extra: dict = field(default_factory=dict)

    def restore_trainer(self, trainer) -> None:
        """Load saved optimizer moments and the step counter into ``trainer``."""
        if self.optimizer_state is None:
            raise UsageError("checkpoint carries no optimizer state")
        for phase, (t, arrays) in self.optimizer_state.items():
            trainer.optimizers[phase].load_state_arrays(t, arrays)
        trainer.step_count = self.step


def _le(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    return a.astype(a.dtype.newbyteorder("<"), copy=False)


def _describe(arrays: List[np.ndarray]) -> List[dict]:
    return [{"dtype": _le(a).dtype.str, "shape": list(a.shape)} for a in arrays]


def to_bytes(tree: DeepTree, train_config: Optional[dict] = None, trainer=None,
             extra: Optional[dict] = None) -> bytes:
    arrays = [np.asarray(a) for a in tree.arrays()]
    header = {
        "tree_config": tree.config.to_dict(),
        "init_std": tree.init_std,
        "train_config": train_config,
        "step": int(trainer.step_count) if trainer is not None else 0,
        "arrays": _describe(arrays),
        "optimizer": None,
        "extra": extra or {},
    }
    if trainer is not None:
        header["optimizer"] = {}
        for phase, opt in trainer.optimizers.items():
            state = [np.asarray(a) for a in opt.state_arrays()]
            header["optimizer"][phase] = {"t": int(opt.t), "arrays": _describe(state)}
            arrays += state
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(_le(a).tobytes() for a in arrays)
    blob = MAGIC + struct.pack("<IQ", VERSION, len(head)) + head + body
    return blob + hashlib.sha256(blob).digest()


def save_checkpoint(path, tree: DeepTree, train_config: Optional[dict] = None, trainer=None,
                    extra: Optional[dict] = None) -> Path:
    path = Path(path)
    path.write_bytes(to_bytes(tree, train_config, trainer, extra))
    return path


def _read_arrays(body: memoryview, offset: int, descs: List[dict]):
    out = []
    for d in descs:
        dtype = np.dtype(d["dtype"])
        shape = tuple(d["shape"])
        n = int(np.prod(shape)) * dtype.itemsize
        if offset + n > len(body):
            raise FormatError("checkpoint truncated inside array data")
        a = np.frombuffer(body[offset:offset + n], dtype=dtype).reshape(shape)
        out.append(a.astype(dtype.newbyteorder("="), copy=True))
        offset += n
    return out, offset


def from_bytes(blob: bytes) -> Checkpoint:
    fixed = len(MAGIC) + 12
    if len(blob) < fixed + _DIGEST:
        raise FormatError("checkpoint truncated")
    if blob[:len(MAGIC)] != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    version, head_len = struct.unpack("<IQ", blob[len(MAGIC):fixed])
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    payload, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if fixed + head_len > len(payload):
        raise FormatError("checkpoint truncated inside header")
    if hashlib.sha256(payload).digest() != digest:
        raise FormatError("checkpoint checksum mismatch (truncated or corrupted)")
    try:
        header = json.loads(payload[fixed:fixed + head_len].decode("utf-8"))
        config = TreeConfig.from_dict(header["tree_config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"bad checkpoint header: {exc}") from None
    body = memoryview(payload)[fixed + head_len:]
    arrays, offset = _read_arrays(body, 0, header["arrays"])
    tree = DeepTree(config, np.random.default_rng(0), header.get("init_std", 0.02))
    try:
        tree.load_arrays(arrays)
    except (DimensionError, StopIteration) as exc:
        raise FormatError(f"checkpoint arrays do not fit the tree: {exc}") from None
    opt_state = None
    if header.get("optimizer"):
        opt_state = {}
        for phase, d in header["optimizer"].items():
            state, offset = _read_arrays(body, offset, d["arrays"])
            opt_state[phase] = (d["t"], state)
    if offset != len(body):
        raise FormatError("trailing bytes after checkpoint arrays")
    return Checkpoint(tree, header.get("train_config"), int(header.get("step", 0)), opt_state,
                      header.get("extra", {}))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"checkpoint {path} not found")
    return from_bytes(path.read_bytes())
