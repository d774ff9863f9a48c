"""
Score fusion, APCER/BPCER/ACER/EER/AUC, the fixed-threshold protocol and the
per-type leaf occupancy table.

Higher scores are more spoof-like: an attack is accepted as live when its
fused score falls below the threshold.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from .errors import UndefinedMetricError, UsageError
from .tensor import no_grad

STRATEGIES = ("map", "score", "max", "avg")
DEFAULT_THRESHOLD = 0.2
THRESHOLD_MODES = ("fixed", "eer")


@dataclass(frozen=True)
class ScoredSample:
    id: int
    y: int
    p_spoof: float
    mask_score: float
    fused: float


def mask_score(mask_map) -> float:
    """Mean absolute value of the mask map after clamping to [0, 1]."""
    m = np.clip(np.asarray(mask_map, dtype=np.float64), 0.0, 1.0)
    return float(np.mean(np.abs(m))) if m.size else 0.0


def fuse_scores(p_spoof: float, m_score: float, strategy: str = "avg") -> float:
    if strategy == "map":
        return float(m_score)
    if strategy == "score":
        return float(p_spoof)
    if strategy == "max":
        return float(max(p_spoof, m_score))
    if strategy == "avg":
        return float((p_spoof + m_score) / 2.0)
    raise UsageError(f"unknown fusion strategy {strategy!r}; choose from {STRATEGIES}")


def fuse(p_spoof: float, mask_map, strategy: str = "avg") -> float:
    return fuse_scores(p_spoof, mask_score(mask_map), strategy)


def refuse(samples: Sequence[ScoredSample], strategy: str) -> List[ScoredSample]:
    """The same samples with ``fused`` recomputed under another strategy."""
    return [ScoredSample(s.id, s.y, s.p_spoof, s.mask_score, fuse_scores(s.p_spoof, s.mask_score, strategy))
            for s in samples]


# -- metrics -----------------------------------------------------------------

def _split(scores) -> Tuple[np.ndarray, np.ndarray]:
    """(spoof fused scores, live fused scores) from ScoredSamples or (y, score) pairs."""
    ys, fs = [], []
    for s in scores:
        if isinstance(s, ScoredSample):
            ys.append(s.y)
            fs.append(s.fused)
        else:
            ys.append(s[0])
            fs.append(s[1])
    ys = np.asarray(ys, dtype=np.int64)
    fs = np.asarray(fs, dtype=np.float64)
    return fs[ys == 1], fs[ys == 0]


def _need_both(spoof: np.ndarray, live: np.ndarray) -> None:
    if len(spoof) == 0:
        raise UndefinedMetricError("no spoof samples: APCER is undefined")
    if len(live) == 0:
        raise UndefinedMetricError("no live samples: BPCER is undefined")


def apcer_bpcer_acer(scores, threshold: float = DEFAULT_THRESHOLD) -> Tuple[float, float, float]:
    spoof, live = _split(scores)
    _need_both(spoof, live)
    apcer = float(np.mean(spoof < threshold))
    bpcer = float(np.mean(live >= threshold))
    return apcer, bpcer, (apcer + bpcer) / 2.0


def eer(scores) -> Tuple[float, float]:
    """Equal error rate and its threshold.

    Candidate thresholds are the observed scores plus one above the maximum.
    ``APCER - BPCER`` is non-decreasing along them; at the first candidate
    where it is >= 0, a zero value means a flat crossing and the midpoint of
    that zero plateau (measured from the previous candidate) is returned;
    otherwise both rates are interpolated linearly between the two
    neighbouring candidates.
    """
    spoof, live = _split(scores)
    _need_both(spoof, live)
    cand = np.unique(np.concatenate([spoof, live]))
    cand = np.append(cand, cand[-1] + 1.0)
    s_sorted, l_sorted = np.sort(spoof), np.sort(live)
    apcer = np.searchsorted(s_sorted, cand, side="left") / len(spoof)
    # counted directly so equal rates compare equal in floating point
    bpcer = (len(live) - np.searchsorted(l_sorted, cand, side="left")) / len(live)
    diff = apcer - bpcer
    j = int(np.argmax(diff >= 0))
    if diff[j] == 0:
        k = j
        while k + 1 < len(cand) and diff[k + 1] == 0:
            k += 1
        lo = cand[j - 1] if j > 0 else cand[j]
        return float(apcer[j]), float((lo + cand[k]) / 2.0)
    w = -diff[j - 1] / (diff[j] - diff[j - 1])
    t = cand[j - 1] + w * (cand[j] - cand[j - 1])
    rate = apcer[j - 1] + w * (apcer[j] - apcer[j - 1])
    return float(rate), float(t)


def auc(scores) -> float:
    """Probability a spoof outscores a live sample, ties counted half (Mann-Whitney)."""
    spoof, live = _split(scores)
    _need_both(spoof, live)
    ranks = rankdata(np.concatenate([spoof, live]))
    n1, n0 = len(spoof), len(live)
    u = ranks[:n1].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def fixed_threshold_from_train(train_scores=None, mode: str = "fixed") -> float:
    """0.2 by default; ``mode="eer"`` returns the training-set EER threshold."""
    if mode == "fixed":
        return DEFAULT_THRESHOLD
    if mode == "eer":
        if train_scores is None:
            raise UsageError("EER threshold mode needs training scores")
        return eer(train_scores)[1]
    raise UsageError(f"unknown threshold mode {mode!r}; choose from {THRESHOLD_MODES}")


# -- scoring a tree ----------------------------------------------------------

@dataclass
class TreeScores:
    """Per-sample outputs of a frozen tree on a dataset."""

    ids: np.ndarray
    labels: np.ndarray
    types: List[str]
    p_spoof: np.ndarray
    mask_scores: np.ndarray
    leaf_of: np.ndarray

    def samples(self, strategy: str = "avg") -> List[ScoredSample]:
        return [ScoredSample(int(i), int(y), float(p), float(m), fuse_scores(p, m, strategy))
                for i, y, p, m in zip(self.ids, self.labels, self.p_spoof, self.mask_scores)]


def score_tree(tree, dataset, leaf_override: Optional[np.ndarray] = None,
               batch_size: int = 128) -> TreeScores:
    """Run a frozen tree over a dataset; ``leaf_override`` forces per-sample leaves."""
    n = len(dataset)
    p = np.zeros(n)
    ms = np.zeros(n)
    leaves = np.zeros(n, dtype=np.intp)
    dtype = tree.config.dtype
    with no_grad():
        for start in range(0, n, batch_size):
            stop = min(start + batch_size, n)
            override = None if leaf_override is None else np.asarray(leaf_override)[start:stop]
            out = tree.forward_batch(dataset.images[start:stop].astype(dtype), leaf_override=override)
            p[start:stop] = out.p_spoof()
            maps = out.mask_maps()
            ms[start:stop] = [mask_score(m) for m in maps]
            leaves[start:stop] = out.leaf_of
    types = [dataset.type_tag(r) for r in range(n)]
    return TreeScores(dataset.ids.copy(), dataset.labels.copy(), types, p, ms, leaves)


def random_leaves(n: int, n_leaves: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).integers(0, n_leaves, size=n)


# -- routing distribution ----------------------------------------------------

@dataclass
class RoutingDistribution:
    """Rows are data types, columns leaves; each kept row sums to 1."""

    row_names: List[str]
    matrix: np.ndarray
    notes: List[str] = field(default_factory=list)

    def to_tsv(self) -> str:
        n_leaves = self.matrix.shape[1] if self.matrix.ndim == 2 else 0
        lines = ["type\t" + "\t".join(f"leaf{j}" for j in range(n_leaves))]
        for name, row in zip(self.row_names, self.matrix):
            lines.append(name + "\t" + "\t".join(f"{v:.6f}" for v in row))
        lines += [f"# {note}" for note in self.notes]
        return "\n".join(lines) + "\n"


def occupancy_by_type(leaf_of, types: Sequence[str], type_order: Sequence[str],
                      n_leaves: int) -> RoutingDistribution:
    leaf_of = np.asarray(leaf_of)
    types = np.asarray(types, dtype=object)
    names, rows, notes = [], [], []
    for name in type_order:
        sel = leaf_of[types == name]
        if len(sel) == 0:
            notes.append(f"type {name} has no samples; row omitted")
            continue
        names.append(name)
        rows.append(np.bincount(sel, minlength=n_leaves) / len(sel))
    matrix = np.array(rows) if rows else np.zeros((0, n_leaves))
    return RoutingDistribution(names, matrix, notes)


def routing_distribution(tree, dataset, batch_size: int = 128) -> RoutingDistribution:
    from .datagen import LIVE

    leaves = np.zeros(len(dataset), dtype=np.intp)
    dtype = tree.config.dtype
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            out = tree.forward_batch(dataset.images[start:start + batch_size].astype(dtype), heads=False)
            leaves[start:start + len(out.leaf_of)] = out.leaf_of
    types = [dataset.type_tag(r) for r in range(len(dataset))]
    return occupancy_by_type(leaves, types, [LIVE] + list(dataset.type_names), tree.config.n_leaves)


# -- reports -----------------------------------------------------------------

@dataclass
class EvalReport:
    apcer: float
    bpcer: float
    acer: float
    eer: float
    auc: float
    threshold: float
    threshold_mode: str = "fixed"
    strategy: str = "avg"
    fusion_acers: Dict[str, float] = field(default_factory=dict)
    routing: Optional[RoutingDistribution] = None
    n_live: int = 0
    n_spoof: int = 0
    label: str = ""

    def to_kv(self) -> str:
        items = [("label", self.label), ("strategy", self.strategy),
                 ("threshold_mode", self.threshold_mode), ("threshold", repr(self.threshold)),
                 ("n_live", str(self.n_live)), ("n_spoof", str(self.n_spoof)),
                 ("apcer", repr(self.apcer)), ("bpcer", repr(self.bpcer)), ("acer", repr(self.acer)),
                 ("eer", repr(self.eer)), ("auc", repr(self.auc))]
        items += [(f"acer_{k}", repr(v)) for k, v in self.fusion_acers.items()]
        return "".join(f"{k} = {v}\n" for k, v in items)

    def to_text(self) -> str:
        buf = io.StringIO()
        title = f"evaluation {self.label}".rstrip()
        buf.write(f"{title}\n")
        buf.write(f"  samples      live={self.n_live} spoof={self.n_spoof}\n")
        buf.write(f"  threshold    {self.threshold:.4f} ({self.threshold_mode})\n")
        buf.write(f"  fusion       {self.strategy}\n")
        for name, v in (("APCER", self.apcer), ("BPCER", self.bpcer), ("ACER", self.acer),
                        ("EER", self.eer), ("AUC", self.auc)):
            buf.write(f"  {name:<12} {100 * v:6.2f}%\n")
        if self.fusion_acers:
            buf.write("  ACER by fusion strategy\n")
            for k, v in self.fusion_acers.items():
                buf.write(f"    {k:<10} {100 * v:6.2f}%\n")
        if self.routing is not None and len(self.routing.row_names):
            buf.write("  leaf occupancy (%)\n")
            n_leaves = self.routing.matrix.shape[1]
            buf.write("    " + " " * 10 + "".join(f"{'L' + str(j):>8}" for j in range(n_leaves)) + "\n")
            for name, row in zip(self.routing.row_names, self.routing.matrix):
                buf.write(f"    {name:<10}" + "".join(f"{100 * v:8.1f}" for v in row) + "\n")
            for note in self.routing.notes:
                buf.write(f"    note: {note}\n")
        return buf.getvalue()


def build_report(scores: TreeScores, threshold: float, strategy: str = "avg",
                 threshold_mode: str = "fixed", routing: Optional[RoutingDistribution] = None,
                 label: str = "") -> EvalReport:
    samples = scores.samples(strategy)
    a, b, c = apcer_bpcer_acer(samples, threshold)
    e, _ = eer(samples)
    fusion = {s: apcer_bpcer_acer(scores.samples(s), threshold)[2] for s in STRATEGIES}
    return EvalReport(a, b, c, e, auc(samples), threshold, threshold_mode, strategy, fusion, routing,
                      int(np.sum(scores.labels == 0)), int(np.sum(scores.labels == 1)), label)


def evaluate(tree, test, threshold: float = DEFAULT_THRESHOLD, strategy: str = "avg",
             threshold_mode: str = "fixed", label: str = "") -> EvalReport:
    """Score ``test`` with learned routing and assemble the full report."""
    scores = score_tree(tree, test)
    from .datagen import LIVE

    routing = occupancy_by_type(scores.leaf_of, scores.types, [LIVE] + list(test.type_names),
                                tree.config.n_leaves)
    return build_report(scores, threshold, strategy, threshold_mode, routing, label)
