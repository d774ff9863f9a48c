"""Tree structure, routing partitions, visit sets and checkpoints."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtn.checkpoint import MAGIC, from_bytes, to_bytes
from dtn.errors import DimensionError, FormatError, UsageError
from dtn.tensor import no_grad
from dtn.tree import DESK, FULL, DeepTree, TreeConfig, collect_visits

TINY = dict(input_hw=16, channels=4, groups=2, feature_len=8, root_compress=(2, 2), node_compress=(2, 2))


def tiny(depth=3, seed=0):
    cfg = TreeConfig(depth=depth, mask_hw=16 // 2 ** (depth - 1), **TINY)
    return DeepTree(cfg, np.random.default_rng(seed))


def images(n, seed=0, hw=16):
    return np.random.default_rng(seed).uniform(size=(n, hw, hw, 6))


def spread(tree, x):
    """Centre every router on the batch so both children receive samples."""
    with no_grad():
        out = tree.forward_batch(x, heads=False)
        for i, st_ in enumerate(tree.routing_states()):
            rows = out.visits[i]
            if len(rows):
                st_.set_mean(out.compressed[i].data[rows].mean(axis=0))
            out = tree.forward_batch(x, heads=False)
    return out


def test_shape_laws():
    assert (DESK.input_hw, DESK.depth, DESK.channels, DESK.feature_len, DESK.mask_hw) == (32, 3, 16, 64, 8)
    assert DESK.n_leaves == 4 and DESK.n_internal == 3
    assert FULL.leaf_hw == 32 and FULL.mask_hw == 32 and FULL.channels == 40
    for d in (1, 2, 3):
        cfg = TreeConfig(depth=d, mask_hw=16 // 2 ** (d - 1), **TINY)
        assert cfg.leaf_hw == 16 // 2 ** (d - 1)


def test_config_errors():
    with pytest.raises(UsageError):
        TreeConfig(depth=3, input_hw=18, mask_hw=4)
    with pytest.raises(UsageError):
        TreeConfig(channels=6, groups=4)
    with pytest.raises(UsageError):
        TreeConfig(mask_hw=4)


def test_cru_halves_extent():
    tree = tiny()
    with no_grad():
        out = tree.forward_batch(images(2), heads=False)
    assert out.features[0].shape == (2, 8, 8, 4)
    assert out.features[3].shape == (2, 4, 4, 4)


def test_leaf_outputs_match_mask_extent():
    tree = tiny()
    with no_grad():
        out = tree.forward_batch(images(5))
    assert out.mask_maps().shape == (5, 4, 4)
    p = out.p_spoof()
    assert np.all((p >= 0) & (p <= 1))
    for leaf, c in out.codes.items():
        assert c.shape == (len(out.leaf_rows(leaf)), 8)


def test_depth_one_is_single_leaf():
    tree = tiny(depth=1)
    leaf = tree.forward(images(1)[0])
    assert leaf.leaf == 0 and leaf.path == [] and leaf.M.shape == (16, 16)
    assert tree.trus == []


def test_single_forward_path_length():
    tree = tiny()
    out = tree.forward(images(1)[0])
    assert len(out.path) == 2 and 0.0 <= out.p_spoof <= 1.0
    assert [n for n, _ in out.path][0] == 0


def test_wrong_channels():
    with pytest.raises(DimensionError):
        tiny().forward_batch(np.zeros((1, 16, 16, 3)))
    with pytest.raises(DimensionError):
        tiny().forward_batch(np.zeros((1, 8, 8, 6)))


def test_negative_response_goes_left():
    tree = tiny()
    x = images(12)
    out = spread(tree, x)
    neg = np.flatnonzero(out.phi[0] < 0)
    assert len(neg) and len(neg) < 12
    left_subtree = set(out.visits[1].tolist()) | set(out.visits[3].tolist()) | set(out.visits[4].tolist())
    right_subtree = set(out.visits[2].tolist()) | set(out.visits[5].tolist()) | set(out.visits[6].tolist())
    assert set(neg.tolist()) <= left_subtree and not set(neg.tolist()) & right_subtree


@given(st.integers(0, 10_000))
@settings(max_examples=10)
def test_leaves_partition_batch(seed):
    tree = tiny(depth=4, seed=seed % 3)
    cfg = tree.config
    x = images(32, seed, hw=16)
    out = spread(tree, x)
    assert out.leaf_counts(cfg.n_leaves).sum() == 32
    leaf_sets = [set(out.visits[l + cfg.n_internal].tolist()) for l in range(cfg.n_leaves)]
    assert set().union(*leaf_sets) == set(range(32)) and sum(map(len, leaf_sets)) == 32
    for i in range(cfg.n_internal):
        assert len(out.visits[i]) == len(out.visits[2 * i + 1]) + len(out.visits[2 * i + 2])
    for r in range(32):
        node = out.leaf_of[r] + cfg.n_internal
        assert r in out.visits[node]


def test_routing_deterministic():
    tree = tiny()
    x = images(6)
    with no_grad():
        a, b = tree.forward_batch(x), tree.forward_batch(x)
    assert np.array_equal(a.leaf_of, b.leaf_of)
    assert np.array_equal(a.p_spoof(), b.p_spoof())


def test_leaf_override():
    tree = tiny()
    with no_grad():
        out = tree.forward_batch(images(4), leaf_override=np.array([3, 0, 2, 1]))
    assert out.leaf_of.tolist() == [3, 0, 2, 1]


def test_path_to_leaf_children_rule():
    tree = tiny(depth=4)
    for leaf in range(8):
        path = tree.path_to_leaf(leaf)
        for a, b in zip(path, path[1:]):
            assert b in (2 * a + 1, 2 * a + 2)
        assert path[-1] == leaf + 7


def test_visits_all_live():
    tree = tiny()
    out = spread(tree, images(8))
    for nb in collect_visits(out, np.zeros(8, dtype=int)).values():
        assert nb.n == 0 and sorted(nb.others.tolist()) == list(range(8))


def test_single_spoof_on_its_path():
    tree = tiny(depth=4)
    out = spread(tree, images(10))
    labels = np.zeros(10, dtype=int)
    labels[3] = 1
    visits = collect_visits(out, labels)
    holding = [n for n, nb in visits.items() if 3 in nb.spoof]
    assert len(holding) == tree.config.depth - 1
    assert holding == tree.path_to_leaf(int(out.leaf_of[3]))[:-1]


def test_siblings_suppress_each_other():
    tree = tiny()
    out = spread(tree, images(12))
    a = int(out.visits[1][0])
    b = int(out.visits[2][0])
    labels = np.zeros(12, dtype=int)
    labels[[a, b]] = 1
    visits = collect_visits(out, labels)
    assert a in visits[1].spoof and a in visits[2].others
    assert b in visits[2].spoof and b in visits[1].others


def test_tree_data_all():
    tree = tiny()
    out = spread(tree, images(6))
    visits = collect_visits(out, np.zeros(6, dtype=int), "all")
    assert visits[0].n == 6
    with pytest.raises(UsageError):
        collect_visits(out, np.zeros(6, dtype=int), "some")


def test_checkpoint_roundtrip_fresh():
    tree = tiny()
    back = from_bytes(to_bytes(tree)).tree
    assert back.config == tree.config
    for a, b in zip(tree.arrays(), back.arrays()):
        assert np.array_equal(a, b) and a.dtype == b.dtype


def test_checkpoint_same_scores():
    tree = tiny()
    spread(tree, images(12))
    for st_ in tree.routing_states():
        st_.updates = 7
    back = from_bytes(to_bytes(tree)).tree
    x = images(12, seed=1)
    with no_grad():
        a, b = tree.forward_batch(x), back.forward_batch(x)
    assert np.array_equal(a.p_spoof(), b.p_spoof()) and np.array_equal(a.leaf_of, b.leaf_of)


def test_checkpoint_corruption():
    blob = to_bytes(tiny())
    with pytest.raises(FormatError, match="magic"):
        from_bytes(b"X" + blob[1:])
    with pytest.raises(FormatError):
        from_bytes(blob[:-10])
    with pytest.raises(FormatError, match="version"):
        from_bytes(blob[:len(MAGIC)] + (99).to_bytes(4, "little") + blob[len(MAGIC) + 4:])
