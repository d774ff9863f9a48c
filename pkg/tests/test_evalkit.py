"""Fusion, metrics against loop oracles, threshold modes, occupancy tables."""
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dtn.errors import UndefinedMetricError, UsageError
from dtn.evalkit import (STRATEGIES, ScoredSample, apcer_bpcer_acer, auc, eer, fixed_threshold_from_train,
                         fuse, mask_score, occupancy_by_type, refuse)
from oracles import acer_oracle, auc_oracle, eer_oracle, interpolated_rates, rates_at


def pairs(spoof, live):
    return [(1, s) for s in spoof] + [(0, l) for l in live]


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_fuse_extremes(strategy):
    assert fuse(0.0, np.zeros((4, 4)), strategy) == 0.0
    assert fuse(1.0, np.ones((4, 4)), strategy) == 1.0


def test_fuse_arithmetic():
    m = np.full((4, 4), 0.4)
    assert abs(fuse(0.8, m, "avg") - 0.6) < 1e-15
    assert fuse(0.8, m, "max") == 0.8
    assert fuse(0.8, m, "score") == 0.8
    assert abs(fuse(0.8, m, "map") - 0.4) < 1e-15


def test_mask_clamped_before_norm():
    assert mask_score(np.array([[-3.0, 5.0]])) == 0.5


def test_unknown_strategy():
    with pytest.raises(UsageError):
        fuse(0.5, np.zeros(2), "median")


def test_refuse_switches_strategy():
    s = [ScoredSample(0, 1, 0.8, 0.4, 0.6)]
    assert refuse(s, "max")[0].fused == 0.8


def test_apcer_direct_count():
    a, b, c = apcer_bpcer_acer(pairs([0.1, 0.3, 0.5], [0.0, 0.0]), 0.2)
    assert a == 1 / 3 and b == 0.0 and c == (a + b) / 2


def test_perfect_separation():
    scores = pairs([0.7, 0.9], [0.0, 0.1])
    assert apcer_bpcer_acer(scores, 0.2)[2] == 0.0
    assert eer(scores)[0] == 0.0 and auc(scores) == 1.0


def test_identical_scores_auc_half():
    assert auc(pairs([0.3] * 4, [0.3] * 5)) == 0.5


@pytest.mark.parametrize("fn", [lambda s: apcer_bpcer_acer(s, 0.2), eer, auc])
def test_single_class_is_undefined(fn):
    with pytest.raises(UndefinedMetricError, match="live"):
        fn(pairs([0.1, 0.2], []))
    with pytest.raises(UndefinedMetricError, match="spoof"):
        fn(pairs([], [0.1]))


def test_auc_matches_pairwise_oracle_100(rng):
    y = rng.integers(0, 2, 100)
    s = rng.uniform(size=100)
    scores = list(zip(y, s))
    assert abs(auc(scores) - auc_oracle(s[y == 1], s[y == 0])) <= 1e-12


def draw(seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(2, 21))
    n_spoof = int(r.integers(1, n))
    # coarse grids force ties, fine ones mostly avoid them
    grid = [4, 10, 1000][seed % 3]
    s = r.integers(0, grid + 1, size=n) / grid
    return list(s[:n_spoof]), list(s[n_spoof:])


@given(st.integers(0, 2 ** 31 - 1))
def test_metrics_match_oracles(seed):
    spoof, live = draw(seed)
    scores = pairs(spoof, live)
    r = np.random.default_rng(seed + 1)
    for t in list(r.choice(spoof + live, 3)) + [float(r.uniform()), 0.2]:
        got = apcer_bpcer_acer(scores, t)
        assert max(abs(g - o) for g, o in zip(got, acer_oracle(spoof, live, t))) <= 1e-12
    assert abs(auc(scores) - auc_oracle(spoof, live)) <= 1e-12
    e, t = eer(scores)
    eo, to = eer_oracle(spoof, live)
    assert abs(e - eo) <= 1e-12 and abs(t - to) <= 1e-12


@given(st.integers(0, 2 ** 31 - 1))
def test_acer_is_exact_mean(seed):
    spoof, live = draw(seed)
    a, b, c = apcer_bpcer_acer(pairs(spoof, live), 0.5)
    assert c == (a + b) / 2.0


@given(st.integers(0, 2 ** 31 - 1))
def test_auc_monotone_invariance(seed):
    spoof, live = draw(seed)
    cubed = pairs([x ** 3 for x in spoof], [x ** 3 for x in live])
    assert abs(auc(pairs(spoof, live)) - auc(cubed)) <= 1e-12


@given(st.integers(0, 2 ** 31 - 1))
def test_eer_rates_balance_at_threshold(seed):
    spoof, live = draw(seed)
    e, t = eer(pairs(spoof, live))
    a, b = rates_at(spoof, live, t)
    if abs(a - b) > 1e-9:
        # no threshold balances the step rates; the interpolated curves must
        a, b = interpolated_rates(spoof, live, t)
    assert abs(a - b) <= 1e-9
    assert abs(e - a) <= 1e-9


def test_threshold_modes():
    assert fixed_threshold_from_train() == 0.2
    train = pairs([0.6, 0.9], [0.1, 0.2])
    t = fixed_threshold_from_train(train, "eer")
    assert t == eer(train)[1] and abs(t - 0.4) < 1e-15
    with pytest.raises(UsageError):
        fixed_threshold_from_train(None, "eer")
    with pytest.raises(UsageError):
        fixed_threshold_from_train(train, "median")


def test_occupancy_rows_sum_to_one():
    leaves = [0, 1, 1, 3, 2, 2, 0]
    types = ["live", "live", "a", "a", "b", "b", "live"]
    d = occupancy_by_type(leaves, types, ["live", "a", "b", "c"], 4)
    assert d.row_names == ["live", "a", "b"]
    np.testing.assert_allclose(d.matrix.sum(axis=1), 1.0, atol=1e-9)
    assert "c" in d.notes[0]
    np.testing.assert_allclose(d.matrix[0], [2 / 3, 1 / 3, 0, 0])


def test_single_leaf_is_column_of_ones():
    d = occupancy_by_type([0] * 5, ["live", "a", "a", "b", "live"], ["live", "a", "b"], 1)
    np.testing.assert_array_equal(d.matrix, np.ones((3, 1)))
