"""
Routing and loss ablations.

Routing ablations freeze a trained tree and change only where samples land:
learned routing, uniformly random leaves, and every sample forced into one
leaf. Loss ablations retrain from scratch with a different routing objective
or tree-data choice and compare both accuracy and spoof leaf occupancy.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, TextIO, Tuple

import numpy as np

from .baseline import CollapseDiagnostic, collapse_diagnostic
from .evalkit import (DEFAULT_THRESHOLD, apcer_bpcer_acer, auc, eer, random_leaves,
                      score_tree)
from .trainer import TrainConfig, fit
from .tree import DESK, TreeConfig

LOSS_VARIANTS = ("proposed", "mpt", "no-unique", "tree-data-all")


@dataclass
class AblationRow:
    name: str
    acer: float
    auc: float = float("nan")
    eer: float = float("nan")
    std: Optional[float] = None
    extra: Dict[str, object] = field(default_factory=dict)

    def cells(self) -> List[str]:
        acer = f"{self.acer:.4f}" if self.std is None else f"{self.acer:.4f} +- {self.std:.4f}"
        return [self.name, acer, f"{self.auc:.4f}", f"{self.eer:.4f}"] + \
            [f"{k}={v}" for k, v in self.extra.items()]


@dataclass
class AblationTable:
    title: str
    rows: List[AblationRow] = field(default_factory=list)
    notes: List[str] = field(default_factory=list)

    def row(self, name: str) -> AblationRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_tsv(self) -> str:
        lines = ["\t".join(["method", "acer", "auc", "eer", "extra"])]
        lines += ["\t".join(r.cells()) for r in self.rows]
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        lines = [self.title]
        for r in self.rows:
            c = r.cells()
            lines.append(f"  {c[0]:<16} ACER {c[1]:<18} AUC {c[2]}  EER {c[3]}  " + " ".join(c[4:]))
        lines += [f"  note: {n}" for n in self.notes]
        return "\n".join(lines) + "\n"


def _metrics(scores, strategy: str, threshold: float) -> Tuple[float, float, float]:
    samples = scores.samples(strategy)
    return apcer_bpcer_acer(samples, threshold)[2], auc(samples), eer(samples)[0]


def routing_ablation(tree, test, threshold: float = DEFAULT_THRESHOLD, strategy: str = "avg",
                     seed: int = 0, label: str = "") -> AblationTable:
    """Learned vs random routing vs pick-one-leaf on a frozen tree."""
    n_leaves = tree.config.n_leaves
    table = AblationTable(f"routing ablation {label}".strip())
    learned = score_tree(tree, test)
    acer, a, e = _metrics(learned, strategy, threshold)
    table.rows.append(AblationRow("learned", acer, a, e))

    rand = score_tree(tree, test, random_leaves(len(test), n_leaves, seed))
    acer, a, e = _metrics(rand, strategy, threshold)
    table.rows.append(AblationRow("random", acer, a, e, extra={"seed": seed}))

    per_leaf = []
    for leaf in range(n_leaves):
        s = score_tree(tree, test, np.full(len(test), leaf))
        per_leaf.append(_metrics(s, strategy, threshold))
    per_leaf = np.array(per_leaf)
    table.rows.append(AblationRow("pick-one-leaf", float(per_leaf[:, 0].mean()), float(per_leaf[:, 1].mean()),
                                  float(per_leaf[:, 2].mean()), std=float(per_leaf[:, 0].std()),
                                  extra={"leaf_acers": ",".join(f"{x:.4f}" for x in per_leaf[:, 0])}))
    return table


def variant_configs(name: str, train_config: TrainConfig = TrainConfig(),
                    tree_config: TreeConfig = DESK) -> Tuple[TrainConfig, TreeConfig]:
    """Training and tree configs for one loss variant; everything else is shared."""
    if name == "proposed":
        return train_config, tree_config
    if name == "mpt":
        return train_config, replace(tree_config, routing_kind="mpt")
    if name == "no-unique":
        return replace(train_config, unique_loss=False), tree_config
    if name == "tree-data-all":
        return replace(train_config, tree_data="all"), tree_config
    from .errors import UsageError
    raise UsageError(f"unknown loss variant {name!r}; choose from {', '.join(LOSS_VARIANTS)}")


@dataclass
class VariantResult:
    name: str
    tree: object
    collapse: CollapseDiagnostic
    live_right: float
    seconds: float


def train_variant(name: str, dataset, protocol, train_config: TrainConfig = TrainConfig(),
                  tree_config: TreeConfig = DESK, log: Optional[TextIO] = None) -> VariantResult:
    t0 = time.perf_counter()
    tc, trc = variant_configs(name, train_config, tree_config)
    res = fit(dataset, protocol, tc, trc, log=log)
    train = dataset.subset(protocol.train_ids)
    collapse = collapse_diagnostic(res.tree, train.images[train.labels == 1])
    return VariantResult(name, res.tree, collapse, root_live_split(res.tree, train),
                         time.perf_counter() - t0)


def root_live_split(tree, dataset, batch_size: int = 128) -> float:
    """Fraction of live samples the root sends to its right child."""
    from .tensor import no_grad

    live = dataset.images[dataset.labels == 0]
    if len(live) == 0 or tree.config.depth == 1:
        return float("nan")
    right = 0
    with no_grad():
        for start in range(0, len(live), batch_size):
            out = tree.forward_batch(live[start:start + batch_size].astype(tree.config.dtype), heads=False)
            right += int(np.sum(out.phi[0] >= 0))
    return right / len(live)


def loss_ablation(dataset, protocol, train_config: TrainConfig = TrainConfig(),
                  tree_config: TreeConfig = DESK, variants: Sequence[str] = LOSS_VARIANTS,
                  threshold: float = DEFAULT_THRESHOLD, strategy: str = "avg",
                  budget_s: Optional[float] = None, log: Optional[TextIO] = None,
                  trained: Optional[Dict[str, VariantResult]] = None):
    """Retrain each variant on the same data and seed and tabulate the results.

    ``trained`` may carry already-trained variants to reuse. When
    ``budget_s`` runs out before a variant starts, the remaining rows are
    skipped and the table says so. Returns ``(table, results)``.
    """
    for name in variants:
        variant_configs(name, train_config, tree_config)
    test = dataset.subset(protocol.test_ids)
    table = AblationTable(f"loss ablation (held out {protocol.held_out_type})")
    results: Dict[str, VariantResult] = dict(trained or {})
    start = time.perf_counter()
    for name in variants:
        if name not in results:
            if budget_s is not None and time.perf_counter() - start > budget_s:
                table.notes.append(f"insufficient budget: {name} not trained")
                continue
            results[name] = train_variant(name, dataset, protocol, train_config, tree_config, log)
        r = results[name]
        acer, a, e = _metrics(score_tree(r.tree, test), strategy, threshold)
        table.rows.append(AblationRow(name, acer, a, e, extra={
            "active_leaves": r.collapse.active_leaves,
            "entropy": f"{r.collapse.entropy:.4f}",
            "live_right": f"{r.live_right:.3f}",
        }))
    return table, results
