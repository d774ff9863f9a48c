"""Mean-separation baseline routing loss and collapse diagnostics."""
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dtn.baseline import collapse_diagnostic, mpt_route_loss, occupancy_diagnostic
from dtn.errors import UsageError
from dtn.tree import DeepTree, TreeConfig


def split(phi):
    phi = np.asarray(phi, dtype=float)
    return phi, phi[phi < 0], phi[phi >= 0]


def test_symmetric_pair_is_zero():
    assert mpt_route_loss(*split([-1.0, 1.0])).item() == 0.0


def test_empty_child_is_skipped():
    assert mpt_route_loss(*split([1.0, 2.0])) is None


def test_degenerate_split_hits_guard():
    # both children hold the same value, so the squared gap is zero
    loss = mpt_route_loss(np.array([2.0, 2.0]), np.array([2.0]), np.array([2.0])).item()
    assert loss == 4.0 / 1e-12


@given(st.lists(st.floats(-3, 3, allow_nan=False).filter(lambda x: abs(x) > 1e-3), min_size=2, max_size=12),
       st.floats(0.1, 10))
def test_scale_invariance(phis, c):
    s, l, r = split(phis)
    if len(l) == 0 or len(r) == 0:
        return
    a = mpt_route_loss(s, l, r).item()
    b = mpt_route_loss(s * c, l * c, r * c).item()
    assert abs(a - b) <= 1e-9 * max(1.0, abs(a))


def test_uniform_occupancy_entropy():
    d = occupancy_diagnostic(np.repeat(np.arange(4), 5), 4)
    assert abs(d.entropy - np.log(4)) < 1e-12 and d.active_leaves == 4


def test_single_leaf_occupancy():
    d = occupancy_diagnostic(np.zeros(9, dtype=int), 4)
    assert d.entropy == 0.0 and d.active_leaves == 1


@given(st.lists(st.integers(0, 7), min_size=1, max_size=50))
def test_fractions_sum_to_one(leaves):
    d = occupancy_diagnostic(leaves, 8)
    assert abs(d.fractions.sum() - 1.0) <= 1e-12
    assert 0.0 <= d.entropy <= np.log(8) + 1e-12


def test_collapse_diagnostic_empty_input():
    tree = DeepTree(TreeConfig(depth=2, input_hw=8, channels=4, groups=2, feature_len=8, mask_hw=4,
                               root_compress=(2, 2), node_compress=(2, 2)), np.random.default_rng(0))
    with pytest.raises(UsageError):
        collapse_diagnostic(tree, np.zeros((0, 8, 8, 6)))


def test_collapse_diagnostic_deterministic(rng):
    tree = DeepTree(TreeConfig(depth=2, input_hw=8, channels=4, groups=2, feature_len=8, mask_hw=4,
                               root_compress=(2, 2), node_compress=(2, 2)), np.random.default_rng(0))
    x = rng.uniform(size=(20, 8, 8, 6))
    assert collapse_diagnostic(tree, x).to_dict() == collapse_diagnostic(tree, x).to_dict()
