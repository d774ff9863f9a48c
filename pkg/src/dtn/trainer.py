"""Alternating optimisation of the tree's CRU/SFL weights and its routing units."""
from __future__ import annotations

import io
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, TextIO

import numpy as np

from . import functional as F
from .baseline import mpt_route_loss
from .datagen import Dataset, Protocol
from .errors import NonFiniteError, UsageError
from .objectives import LossWeights, class_loss, mask_loss, overall_loss
from .optim import OPTIMIZERS, make_optimizer
from .routing import batch_mean, center, route_loss, route_response, unique_loss, update_running_mean
from .tensor import Tensor, no_grad
from .tree import DESK, DeepTree, TreeConfig, TreeOutput, collect_visits

PHASES = ("dtn", "tru")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 15
    init_std: float = 0.02
    alternation_period: int = 1
    seed: int = 0
    # the unique loss needs real weight at desk scale to balance live samples
    weights: LossWeights = LossWeights(alpha4=1.0)
    route_alpha: float = 1e-3
    route_beta: float = 1e-2
    optimizer: str = "adam"
    tru_learning_rate: Optional[float] = 0.01   # None: same as learning_rate
    tree_data: str = "spoof"      # "spoof" or "all": which rows train the routing units
    unique_loss: bool = True
    batch_centering: bool = True  # losses centre on the visiting rows' batch mean
    route_center: str = "batch"   # "batch" or "running": centre used for training-time routing

    def __post_init__(self):
        if self.tru_learning_rate is not None and self.tru_learning_rate <= 0:
            raise UsageError("tru_learning_rate must be positive")
        if self.learning_rate <= 0 or self.init_std <= 0:
            raise UsageError("learning_rate and init_std must be positive")
        if self.batch_size < 1 or self.alternation_period < 1 or self.epochs < 0:
            raise UsageError("batch_size and alternation_period must be >= 1, epochs >= 0")
        if self.route_center not in ("batch", "running"):
            raise UsageError(f"unknown route_center {self.route_center!r}")
        if self.tree_data not in ("spoof", "all"):
            raise UsageError(f"unknown tree_data {self.tree_data!r}")
        if self.optimizer not in OPTIMIZERS:
            raise UsageError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = asdict(self.weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("weights"), dict):
            d["weights"] = LossWeights(**d["weights"])
        return cls(**d)


@dataclass
class LossBreakdown:
    total: float
    class_: float
    mask: float
    route: float
    uniq: float
    leaf_counts: List[int]
    node_terms: Dict[str, float] = field(default_factory=dict)


@dataclass
class StepRecord:
    step: int
    phase: str
    losses: LossBreakdown

    def to_line(self) -> str:
        l = self.losses
        counts = ",".join(str(c) for c in l.leaf_counts)
        return (f"step={self.step} phase={self.phase} total={l.total:.6g} class={l.class_:.6g} "
                f"mask={l.mask:.6g} route={l.route:.6g} uniq={l.uniq:.6g} leaves={counts}")


def init_tree(tree_config: TreeConfig = DESK, train_config: TrainConfig = TrainConfig(),
              rng: Optional[np.random.Generator] = None) -> DeepTree:
    """Weights ~ N(0, init_std^2), biases 0, unit random projections, zero means."""
    rng = rng if rng is not None else np.random.default_rng(train_config.seed)
    return DeepTree(tree_config, rng, train_config.init_std)


def tree_losses(tree: DeepTree, out: TreeOutput, labels, masks, config: TrainConfig,
                leaves: bool = True):
    """Per-leaf and per-TRU loss tensors for one forward pass.

    Returns ``(leaf_terms, tru_terms, nodes)`` where the term lists hold
    ``(class, mask)`` and ``(route, unique)`` pairs (None when skipped) and
    ``nodes`` maps TRU index to its NodeBatch.
    """
    labels = np.asarray(labels)
    masks = np.asarray(masks)
    nodes = collect_visits(out, labels, config.tree_data)
    tru_terms = []
    for i, nb in nodes.items():
        state = tree.trus[i].state
        xi = out.compressed[i]
        if state.kind == "mpt":
            phi_s = route_response(F.gather(xi, nb.spoof), state) if nb.n else None
            lr = None
            if phi_s is not None:
                neg = phi_s.data < 0
                lr = mpt_route_loss(phi_s, F.gather(phi_s, np.flatnonzero(neg)),
                                    F.gather(phi_s, np.flatnonzero(~neg)))
            tru_terms.append((lr, None))
            continue
        mu = batch_mean(xi, nb.spoof) if config.batch_centering else None
        xs = center(F.gather(xi, nb.spoof), state, mu) if nb.n else None
        xo = center(F.gather(xi, nb.others), state, mu) if nb.n_minus else None
        lr = route_loss(xs, state, config.route_alpha, config.route_beta) if xs is not None else None
        lu = unique_loss(xs, xo, state) if config.unique_loss else None
        tru_terms.append((lr, lu))
    leaf_terms = []
    if leaves:
        for leaf in range(tree.config.n_leaves):
            rows = out.leaf_rows(leaf)
            if len(rows) == 0:
                leaf_terms.append((None, None))
                continue
            leaf_terms.append((class_loss(out.logits[leaf], labels[rows]),
                               mask_loss(out.masks[leaf], masks[rows])))
    return leaf_terms, tru_terms, nodes


def objective_terms(tree: DeepTree, images, labels, masks, config: TrainConfig = TrainConfig()):
    """Weighted loss terms of one batch as a list of differentiable scalars.

    Routing uses the same centring as a DTN training step.
    """
    labels = np.asarray(labels)
    rows = None
    if config.route_center == "batch":
        rows = labels == 1 if config.tree_data == "spoof" else np.ones(len(labels), dtype=bool)
    out = tree.forward_batch(images, center_rows=rows)
    leaf_terms, tru_terms, _ = tree_losses(tree, out, labels, masks, config)
    w = config.weights
    weighted = [(lc, w.alpha1) for lc, _ in leaf_terms] + [(lm, w.alpha2) for _, lm in leaf_terms]
    weighted += [(lr, w.alpha3) for lr, _ in tru_terms] + [(lu, w.alpha4) for _, lu in tru_terms]
    return [t * a for t, a in weighted if t is not None and a != 0]


def objective(tree: DeepTree, images, labels, masks, config: TrainConfig = TrainConfig()):
    """The full weighted objective for one batch; 0.0 when no term contributes."""
    terms = objective_terms(tree, images, labels, masks, config)
    total = terms[0] if terms else 0.0
    for t in terms[1:]:
        total = total + t
    return total


def _value(t) -> float:
    return 0.0 if t is None else float(t.data) if isinstance(t, Tensor) else float(t)


def _check_finite(leaf_terms, tru_terms) -> None:
    for j, (lc, lm) in enumerate(leaf_terms):
        for name, t in (("class", lc), ("mask", lm)):
            if t is not None and not np.isfinite(_value(t)):
                raise NonFiniteError(f"non-finite {name} loss at leaf {j}")
    for i, (lr, lu) in enumerate(tru_terms):
        for name, t in (("route", lr), ("unique", lu)):
            if t is not None and not np.isfinite(_value(t)):
                raise NonFiniteError(f"non-finite {name} loss at TRU node {i}")


class Trainer:
    """Owns a tree, one optimiser per phase and the global step counter."""

    def __init__(self, tree: DeepTree, config: TrainConfig = TrainConfig()):
        self.tree = tree
        self.config = config
        self.optimizers = {
            "dtn": make_optimizer(config.optimizer, tree.dtn_parameters(), config.learning_rate),
            "tru": make_optimizer(config.optimizer, tree.tru_parameters(),
                                  config.tru_learning_rate or config.learning_rate),
        }
        self.step_count = 0

    def center_rows(self, labels: np.ndarray) -> Optional[np.ndarray]:
        if self.config.route_center != "batch":
            return None
        return labels == 1 if self.config.tree_data == "spoof" else np.ones(len(labels), dtype=bool)

    def phase_for(self, step: int) -> str:
        return PHASES[(step // self.config.alternation_period) % 2]

    def train_step(self, images, labels, masks, phase: Optional[str] = None) -> StepRecord:
        phase = phase or self.phase_for(self.step_count)
        if phase not in PHASES:
            raise UsageError(f"unknown phase {phase!r}")
        if len(labels) == 0:
            raise UsageError("empty batch")
        tree, cfg = self.tree, self.config
        tree.zero_grad()
        w = cfg.weights
        labels = np.asarray(labels)
        rows = self.center_rows(labels)
        if phase == "dtn":
            out = tree.forward_batch(images, center_rows=rows)
            leaf_terms, tru_terms, nodes = tree_losses(tree, out, labels, masks, cfg)
            _check_finite(leaf_terms, tru_terms)
            total = overall_loss(leaf_terms, tru_terms, w)
            if isinstance(total, Tensor):
                total.backward()
            self.optimizers["dtn"].step()
        else:
            # CRUs and leaves are frozen, so their activations need no graph
            with no_grad():
                out = tree.forward_batch(images, center_rows=rows)
            for i in out.compressed:
                out.compressed[i] = tree.trus[i].compress(out.features[i].detach())
            leaf_terms, tru_terms, nodes = tree_losses(tree, out, labels, masks, cfg)
            _check_finite(leaf_terms, tru_terms)
            total = overall_loss(leaf_terms, tru_terms, w)
            tru_total = overall_loss([], tru_terms, w)
            if isinstance(tru_total, Tensor):
                tru_total.backward()
            for state in tree.routing_states():
                state.project_grad()
            self.optimizers["tru"].step()
            for i, nb in nodes.items():
                state = tree.trus[i].state
                state.renormalize()
                if state.kind == "proposed":
                    update_running_mean(state, out.compressed[i].data[nb.spoof])
        record = StepRecord(self.step_count, phase, self._breakdown(total, leaf_terms, tru_terms, out))
        self.step_count += 1
        return record

    def _breakdown(self, total, leaf_terms, tru_terms, out) -> LossBreakdown:
        return LossBreakdown(
            total=_value(total),
            class_=sum(_value(lc) for lc, _ in leaf_terms),
            mask=sum(_value(lm) for _, lm in leaf_terms),
            route=sum(_value(lr) for lr, _ in tru_terms),
            uniq=sum(_value(lu) for _, lu in tru_terms),
            leaf_counts=[int(c) for c in out.leaf_counts(self.tree.config.n_leaves)],
        )


# -- batching ----------------------------------------------------------------

def steps_per_epoch(n_live: int, n_spoof: int, batch_size: int) -> int:
    half = max(batch_size // 2, 1)
    return max(1, math.ceil(max(n_live, n_spoof) / half))


def epoch_batches(labels: np.ndarray, batch_size: int, seed: int, epoch: int) -> List[np.ndarray]:
    """Stratified batches (about half live, half spoof) as row indices into ``labels``.

    The larger class is covered once per epoch; the smaller one is cycled.
    """
    labels = np.asarray(labels)
    live, spoof = np.flatnonzero(labels == 0), np.flatnonzero(labels == 1)
    rng = np.random.default_rng([seed, epoch])
    live, spoof = rng.permutation(live), rng.permutation(spoof)
    n_steps = steps_per_epoch(len(live), len(spoof), batch_size)
    if len(live) == 0 or len(spoof) == 0:
        pool = live if len(spoof) == 0 else spoof
        return [np.sort(pool[(b * batch_size + np.arange(batch_size)) % len(pool)])
                for b in range(math.ceil(len(pool) / batch_size))]
    n_live = batch_size // 2
    n_spoof = batch_size - n_live
    out = []
    for b in range(n_steps):
        rows = np.concatenate([live[(b * n_live + np.arange(n_live)) % len(live)],
                               spoof[(b * n_spoof + np.arange(n_spoof)) % len(spoof)]])
        out.append(rows)
    return out


def recalibrate_means(tree: DeepTree, images, labels, tree_data: str = "spoof",
                      batch_size: int = 128) -> None:
    """Replace each running mean by the exact mean over the given data.

    Nodes are visited top-down so every node sees the routing its ancestors
    will use at evaluation time. Nodes no selected row reaches keep their
    running mean.
    """
    labels = np.asarray(labels)
    select = labels == 1 if tree_data == "spoof" else np.ones(len(labels), dtype=bool)
    cfg = tree.config
    for level in range(cfg.depth - 1):
        nodes = [i for i in range(cfg.n_internal) if cfg.level(i) == level]
        sums = {i: 0.0 for i in nodes}
        counts = {i: 0 for i in nodes}
        with no_grad():
            for start in range(0, len(labels), batch_size):
                chunk = np.asarray(images[start:start + batch_size], dtype=cfg.dtype)
                out = tree.forward_batch(chunk, heads=False)
                sel = select[start:start + batch_size]
                for i in nodes:
                    rows = out.visits[i][sel[out.visits[i]]]
                    sums[i] = sums[i] + out.compressed[i].data[rows].sum(axis=0)
                    counts[i] += len(rows)
        for i in nodes:
            state = tree.trus[i].state
            if counts[i] and state.kind == "proposed" and state.updates:
                state.set_mean(sums[i] / counts[i])


@dataclass
class FitResult:
    tree: DeepTree
    trainer: Trainer
    records: List[StepRecord]


def fit(dataset: Dataset, protocol: Optional[Protocol], config: TrainConfig = TrainConfig(),
        tree_config: TreeConfig = DESK, log: Optional[TextIO] = None,
        trainer: Optional[Trainer] = None, max_steps: Optional[int] = None) -> FitResult:
    """Train on the protocol's training split with interleaved DTN/TRU steps.

    Passing an existing ``trainer`` resumes from its step counter. ``max_steps``
    stops early after that many global steps (used for resume checks).
    """
    train = dataset.subset(protocol.train_ids) if protocol is not None else dataset
    if len(train) == 0:
        raise UsageError("empty training set")
    if trainer is None:
        if train.hw != tree_config.input_hw or train.mask_hw != tree_config.mask_hw:
            raise UsageError(f"data extents {train.hw}/{train.mask_hw} do not fit tree "
                             f"{tree_config.input_hw}/{tree_config.mask_hw}")
        trainer = Trainer(init_tree(tree_config, config), config)
    tree = trainer.tree
    dtype = tree.config.dtype
    per_epoch = len(epoch_batches(train.labels, config.batch_size, config.seed, 0))
    total_steps = config.epochs * per_epoch
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)
    records = []
    cached_epoch, batches = None, None
    while trainer.step_count < total_steps:
        epoch, b = divmod(trainer.step_count, per_epoch)
        if epoch != cached_epoch:
            batches = epoch_batches(train.labels, config.batch_size, config.seed, epoch)
            cached_epoch = epoch
        rows = batches[b]
        rec = trainer.train_step(train.images[rows].astype(dtype), train.labels[rows], train.masks[rows])
        records.append(rec)
        if log is not None:
            log.write(rec.to_line() + "\n")
    if records and trainer.step_count >= config.epochs * per_epoch:
        recalibrate_means(tree, train.images, train.labels, config.tree_data)
    return FitResult(tree, trainer, records)
