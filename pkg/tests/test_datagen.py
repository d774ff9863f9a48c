"""Synthetic generator, protocols and the on-disk dataset format."""
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize

from dtn.datagen import (BLOB, LIVE, MANIFEST, GenConfig, build_protocol, generate, load, make_sample, save)
from dtn.errors import FormatError, UsageError


@pytest.fixture(scope="module")
def small():
    return generate(GenConfig(hw=16, mask_hw=4, n_types=3, per_class=6, seed=3))


def test_counts_match_config(small):
    assert small.counts() == {LIVE: 6, "type0": 6, "type1": 6, "type2": 6}
    assert len(set(small.ids.tolist())) == len(small)
    assert small.images.shape == (24, 16, 16, 6) and small.masks.shape == (24, 4, 4)


def test_pixel_range(small):
    assert small.images.min() >= 0.0 and small.images.max() <= 1.0


def test_live_masks_zero_spoof_masks_nonzero(small):
    assert not small.masks[small.labels == 0].any()
    assert all(m.sum() >= 1 for m in small.masks[small.labels == 1])


def test_mask_matches_region_record(small):
    for m, (r0, c0, r1, c1), y in zip(small.masks, small.regions, small.labels):
        if y == 0:
            continue
        ref = np.zeros_like(m)
        ref[r0:r1, c0:c1] = 1
        inter = np.sum(ref & m)
        assert inter / np.sum(ref | m) == 1.0


def test_full_region_mask_all_ones():
    cfg = GenConfig(hw=16, mask_hw=4, per_class=1)
    _, m, _ = make_sample(np.random.default_rng(0), cfg, 1, region=(0, 0, 4, 4))
    assert m.all()


def test_same_seed_bit_identical():
    cfg = GenConfig(hw=8, mask_hw=2, per_class=3, seed=11)
    a, b = generate(cfg), generate(cfg)
    assert a.images.tobytes() == b.images.tobytes() and a.masks.tobytes() == b.masks.tobytes()


@pytest.mark.parametrize("kw", [dict(n_types=1), dict(per_class=0), dict(hw=10, mask_hw=4), dict(difficulty=1.5)])
def test_bad_config(kw):
    with pytest.raises(UsageError):
        GenConfig(**kw)


def test_protocol_two_types():
    d = generate(GenConfig(hw=8, mask_hw=2, n_types=2, per_class=5))
    p = build_protocol(d, "type1")
    tr = d.subset(p.train_ids)
    assert set(tr.types[tr.labels == 1].tolist()) == {0}


@given(st.integers(0, 3), st.floats(0.1, 0.9), st.integers(0, 1000))
@settings(max_examples=20)
def test_protocol_partition(k, frac, seed):
    d = _proto_data()
    p = build_protocol(d, f"type{k}", frac, seed)
    live = set(d.ids[d.labels == 0].tolist())
    tr, te = set(p.train_ids.tolist()), set(p.test_ids.tolist())
    assert not (tr & te)
    assert (tr & live) | (te & live) == live
    assert all(d.types[d.rows_for([i])[0]] != k for i in tr)
    assert set(d.ids[d.types == k].tolist()) <= te
    q = build_protocol(d, f"type{k}", frac, seed)
    assert np.array_equal(p.train_ids, q.train_ids) and np.array_equal(p.test_ids, q.test_ids)


_CACHE = {}


def _proto_data():
    if "d" not in _CACHE:
        _CACHE["d"] = generate(GenConfig(hw=8, mask_hw=2, per_class=10))
    return _CACHE["d"]


def test_protocol_errors(small):
    with pytest.raises(UsageError):
        build_protocol(small, "type9")
    with pytest.raises(UsageError):
        build_protocol(small, "type0", live_fraction=1.0)


def test_save_load_roundtrip(small, tmp_path):
    save(small, tmp_path)
    back = load(tmp_path)
    assert np.array_equal(back.images, small.images) and np.array_equal(back.masks, small.masks)
    for f in ("labels", "types", "ids", "regions"):
        assert np.array_equal(getattr(back, f), getattr(small, f))
    assert back.type_names == small.type_names


def test_missing_blob(small, tmp_path):
    save(small, tmp_path)
    lines = (tmp_path / MANIFEST).read_text().splitlines()
    header = json.loads(lines[0])
    header["blob"] = "elsewhere.bin"
    (tmp_path / MANIFEST).write_text("\n".join([json.dumps(header)] + lines[1:]) + "\n")
    with pytest.raises(FormatError, match="missing"):
        load(tmp_path)


def test_checksum_flip_names_sample(small, tmp_path):
    save(small, tmp_path)
    lines = (tmp_path / MANIFEST).read_text().splitlines()
    rec = json.loads(lines[5])
    blob = bytearray((tmp_path / BLOB).read_bytes())
    blob[rec["image_offset"] + 7] ^= 0x01
    (tmp_path / BLOB).write_bytes(bytes(blob))
    with pytest.raises(FormatError, match=f"sample {rec['id']}: checksum"):
        load(tmp_path)


def test_not_a_dataset(tmp_path):
    with pytest.raises(FormatError):
        load(tmp_path)


def _logistic_fit(X, y, lam=1e-3):
    """L2-regularised logistic regression by quasi-Newton on the exact gradient."""
    Xb = np.hstack([X, np.ones((len(X), 1))])

    def f(w):
        z = Xb @ w
        loss = np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * lam * w[:-1] @ w[:-1]
        g = Xb.T @ (1.0 / (1.0 + np.exp(-z)) - y) / len(y)
        g[:-1] += lam * w[:-1]
        return loss, g

    return minimize(f, np.zeros(Xb.shape[1]), jac=True, method="L-BFGS-B", options={"maxiter": 500}).x


def test_held_out_type_not_linearly_trivial():
    d = generate(GenConfig(per_class=120, seed=5))
    rng = np.random.default_rng(0)
    for k in range(4):
        sel = (d.types == k) | (d.types < 0)
        X = d.images[sel].reshape(sel.sum(), -1).astype(np.float64)
        y = d.labels[sel].astype(np.float64)
        perm = rng.permutation(len(y))
        tr, te = perm[: len(y) // 2], perm[len(y) // 2:]
        mu, sd = X[tr].mean(0), X[tr].std(0) + 1e-8
        w = _logistic_fit((X[tr] - mu) / sd, y[tr])
        z = np.hstack([(X[te] - mu) / sd, np.ones((len(te), 1))]) @ w
        acc = np.mean((z >= 0) == (y[te] == 1))
        assert acc < 1.0, f"type{k} separated perfectly on held-out pixels"
