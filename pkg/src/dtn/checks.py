"""
Self-checks behind ``dtn check``: gradients of every primitive and of the
full objective, the eigenvector oracle, and routing partition invariants.

Primitive cases look their functions up on the ``functional`` and
``routing`` modules at call time, so a patched primitive is what gets checked.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np

from . import baseline
from . import functional as F
from . import routing
from .gradcheck import finite_diff_check, relative_error
from .tensor import Tensor, no_grad

PRIMITIVE_TOL = 1e-6
OBJECTIVE_TOL = 1e-4
EIGEN_TOL = 1e-8
ROW_SUM_TOL = 1e-9


@dataclass
class CheckResult:
    name: str
    value: float
    tol: float
    passed: bool
    detail: str = ""

    def to_line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"{status} {self.name}: {self.value:.3e} (tol {self.tol:g}){extra}"


def _away_from_zero(rng, shape, gap=0.05):
    """Uniform draws with |x| >= gap so kinks sit far from the FD stencil."""
    x = rng.uniform(gap, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _distinct(rng, shape):
    """Values with no near-ties, for max pooling."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.1 + rng.uniform(0, 0.01, n)).reshape(shape)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return (out * w).sum()


def _state(rng, m):
    return routing.RoutingState.init(m, rng)


# each builder returns a list of (case name, scalar function of one tensor, input)
def _conv_cases(rng):
    x = rng.normal(size=(2, 5, 5, 2))
    k = rng.normal(size=(3, 3, 2, 3))
    b = rng.normal(size=3)
    cases = []
    for pad, stride in (("same", 1), ("valid", 1), ("same", 2)):
        out_shape = F.conv2d(Tensor(x), Tensor(k), Tensor(b), stride, pad).shape
        w = rng.normal(size=out_shape)
        tag = f"conv2d[{pad},s{stride}]"
        cases.append((tag + ".input", lambda t, k=k, b=b, p=pad, s=stride, w=w:
                      _weighted(F.conv2d(t, Tensor(k), Tensor(b), s, p), w), x))
        cases.append((tag + ".kernel", lambda t, b=b, p=pad, s=stride, w=w:
                      _weighted(F.conv2d(Tensor(x), t, Tensor(b), s, p), w), k))
        cases.append((tag + ".bias", lambda t, k=k, p=pad, s=stride, w=w:
                      _weighted(F.conv2d(Tensor(x), Tensor(k), t, s, p), w), b))
    return cases


def _pool_cases(rng):
    x = _distinct(rng, (2, 4, 4, 3))
    w = rng.normal(size=(2, 2, 2, 3))
    return [("max_pool2d", lambda t: _weighted(F.max_pool2d(t), w), x)]


def _norm_cases(rng):
    x = rng.normal(size=(2, 4, 4, 8))
    g = rng.normal(size=8)
    b = rng.normal(size=8)
    w = rng.normal(size=x.shape)
    return [
        ("group_norm.input", lambda t: _weighted(F.group_norm(t, 4, Tensor(g), Tensor(b)), w), x),
        ("group_norm.gamma", lambda t: _weighted(F.group_norm(Tensor(x), 4, t, Tensor(b)), w), g),
        ("group_norm.beta", lambda t: _weighted(F.group_norm(Tensor(x), 4, Tensor(g), t), w), b),
    ]


def _dense_cases(rng):
    x = _away_from_zero(rng, (3, 5))
    W = rng.normal(size=(5, 4))
    b = rng.normal(size=4)
    w_out = rng.normal(size=(3, 4))
    img = rng.normal(size=(2, 4, 4, 3))
    logits = rng.normal(size=(6, 2))
    labels = rng.integers(0, 2, size=6)
    w_flat, w_area, w_gather = rng.normal(size=(2, 48)), rng.normal(size=(2, 2, 2, 3)), rng.normal(size=(3, 5))
    return [
        ("relu", lambda t: _weighted(F.relu(t), w_out[:, :1] * np.ones((3, 5))), x),
        ("linear.input", lambda t: _weighted(F.linear(t, Tensor(W), Tensor(b)), w_out), x),
        ("linear.weight", lambda t: _weighted(F.linear(Tensor(x), t, Tensor(b)), w_out), W),
        ("linear.bias", lambda t: _weighted(F.linear(Tensor(x), Tensor(W), t), w_out), b),
        ("flatten", lambda t: _weighted(F.flatten(t), w_flat), img),
        ("l1_norm", lambda t: F.l1_norm(t), x),
        ("area_resize", lambda t: _weighted(F.area_resize(t, (2, 2)), w_area), img),
        ("gather", lambda t: _weighted(F.gather(t, [2, 0, 2]), w_gather), x),
        ("softmax_cross_entropy", lambda t: F.softmax_cross_entropy(t, labels), logits),
    ]


def _routing_cases(rng):
    m = 6
    X = rng.normal(size=(7, m))
    Xo = rng.normal(size=(5, m))
    st = _state(rng, m)
    v = st.v.data.copy()

    def with_v(t):
        s = routing.RoutingState(t, st.mu, st.momentum)
        return s

    feat = rng.normal(size=(3, 4, 4, 4))
    kern = rng.normal(size=(1, 1, 4, 2))
    wc = rng.normal(size=(3, 8))
    phi = rng.normal(size=9)
    left, right = phi[phi < 0], phi[phi >= 0]
    return [
        ("route_loss.features", lambda t: routing.route_loss(t, st, 0.1, 0.01), X),
        ("route_loss.v", lambda t: routing.route_loss(Tensor(X), with_v(t), 0.1, 0.01), v),
        ("unique_loss.features", lambda t: routing.unique_loss(t, Tensor(Xo), st), X),
        ("unique_loss.v", lambda t: routing.unique_loss(Tensor(X), Tensor(Xo), with_v(t)), v),
        ("compress", lambda t: _weighted(routing.compress(t, Tensor(kern), (2, 2)), wc), feat),
        ("mpt_route_loss", lambda t: baseline.mpt_route_loss(
            t, F.gather(t, np.flatnonzero(phi < 0)), F.gather(t, np.flatnonzero(phi >= 0))), phi),
    ]


PRIMITIVES: Dict[str, Callable] = {
    "conv2d": _conv_cases,
    "max_pool2d": _pool_cases,
    "group_norm": _norm_cases,
    "dense": _dense_cases,
    "routing": _routing_cases,
}


def gradient_checks(seeds=range(10), tol: float = PRIMITIVE_TOL, h: float = 1e-5) -> List[CheckResult]:
    """Worst relative error per primitive case over the given seeds."""
    worst: Dict[str, float] = {}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for group in PRIMITIVES.values():
            for name, f, x in group(rng):
                err = finite_diff_check(f, x, h)
                worst[name] = max(worst.get(name, 0.0), err if np.isfinite(err) else np.inf)
    return [CheckResult(f"grad {n}", e, tol, e < tol) for n, e in worst.items()]


def objective_check(depth: int = 2, seed: int = 0, per_tensor: int = 3, tol: float = OBJECTIVE_TOL,
                    h: float = 3e-6, batch: int = 4, max_tries: int = 20) -> CheckResult:
    """Finite differences of the full weighted objective on a desk-scale tree.

    Every parameter tensor (CRU, SFL and TRU alike) contributes ``per_tensor``
    random coordinates. The batch holds live and spoof rows so every loss
    term is active. Central differences are taken term by term and summed,
    which is the same derivative but keeps a large term that ignores the
    coordinate from adding rounding noise. A coordinate whose stencil changes
    any relu/abs/pool/routing branch is not a smooth point and is redrawn.
    """
    from .tensor import record_kinks
    from .trainer import TrainConfig, init_tree, objective, objective_terms
    from .tree import TreeConfig

    cfg = TreeConfig(depth=depth, mask_hw=32 // 2 ** (depth - 1))
    tc = TrainConfig(seed=seed)
    tree = init_tree(cfg, tc)
    rng = np.random.default_rng(seed)
    images = rng.uniform(0, 1, size=(batch, cfg.input_hw, cfg.input_hw, 6))
    labels = np.arange(batch) % 2
    masks = (rng.uniform(size=(batch, cfg.mask_hw, cfg.mask_hw)) < 0.5) * labels[:, None, None]

    def evaluate():
        with no_grad(), record_kinks() as kinks:
            terms = objective_terms(tree, images, labels, masks, tc)
        return np.array([float(t.data) for t in terms]), kinks

    def same(a, b) -> bool:
        return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))

    tree.zero_grad()
    objective(tree, images, labels, masks, tc).backward()
    _, base = evaluate()
    params = tree.parameters("all")
    analytic, numeric = [], []
    skipped = 0
    for p in params:
        g = p.grad.reshape(-1) if p.grad is not None else np.zeros(p.data.size)
        flat = p.data.reshape(-1)
        done = 0
        for i in rng.permutation(flat.size)[:max_tries * per_tensor]:
            if done == per_tensor:
                break
            orig = flat[i]
            flat[i] = orig + h
            tp, kp = evaluate()
            flat[i] = orig - h
            tm, km = evaluate()
            flat[i] = orig
            if not (same(kp, base) and same(km, base)) or len(tp) != len(tm):
                skipped += 1
                continue
            analytic.append(g[i])
            numeric.append(float(np.sum((tp - tm) / (2 * h))))
            done += 1
    err = relative_error(np.array(analytic), np.array(numeric))
    return CheckResult(f"grad objective depth={depth}", err, tol, err < tol,
                       f"{len(analytic)} coordinates over {len(params)} tensors, {skipped} non-smooth redrawn")


def random_spd(rng, n: int) -> np.ndarray:
    A = rng.normal(size=(n, n))
    return A @ A.T + n * 1e-3 * np.eye(n)


def eigen_checks(n_matrices: int = 50, max_dim: int = 64, seed: int = 0,
                 tol: float = EIGEN_TOL) -> CheckResult:
    """Power-iteration oracle against ``numpy.linalg.eigh`` on random SPD matrices.

    The reported value is the worst of the eigenvalue relative gap and the
    eigenvector misalignment ``1 - |cos|``.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_matrices):
        n = int(rng.integers(2, max_dim + 1))
        C = random_spd(rng, n)
        lam, v = routing.top_eigvec_oracle(C, tol=1e-12)
        evals, evecs = np.linalg.eigh(C)
        gap = abs(lam - evals[-1]) / evals[-1]
        align = 1.0 - abs(float(v @ evecs[:, -1]))
        worst = max(worst, gap, align)
    return CheckResult("eigen oracle vs eigh", worst, tol, worst <= tol, f"{n_matrices} SPD matrices")


def partition_checks(n_batches: int = 100, seed: int = 0, depth: int = 3) -> CheckResult:
    """Leaf visits partition each batch and internal nodes conserve their rows."""
    from .evalkit import occupancy_by_type
    from .tree import DeepTree, TreeConfig

    cfg = TreeConfig(depth=depth, input_hw=8, channels=4, groups=2, feature_len=8,
                     mask_hw=8 // 2 ** (depth - 1), root_compress=(2, 2), node_compress=(2, 2))
    rng = np.random.default_rng(seed)
    tree = DeepTree(cfg, rng)
    failures = 0
    worst_row = 0.0
    for _ in range(n_batches):
        B = int(rng.integers(1, 17))
        with no_grad():
            out = tree.forward_batch(rng.normal(size=(B, 8, 8, 6)), heads=False)
        leaf_sets = [out.leaf_rows(l) for l in range(cfg.n_leaves)]
        joined = np.sort(np.concatenate(leaf_sets))
        if not np.array_equal(joined, np.arange(B)):
            failures += 1
        for i in range(cfg.n_internal):
            kids = np.sort(np.concatenate([out.visits[2 * i + 1], out.visits[2 * i + 2]]))
            if not np.array_equal(kids, np.sort(out.visits[i])):
                failures += 1
        types = [f"t{t}" for t in rng.integers(0, 3, size=B)]
        dist = occupancy_by_type(out.leaf_of, types, ["t0", "t1", "t2"], cfg.n_leaves)
        if len(dist.matrix):
            worst_row = max(worst_row, float(np.max(np.abs(dist.matrix.sum(axis=1) - 1.0))))
    ok = failures == 0 and worst_row <= ROW_SUM_TOL
    return CheckResult("partition invariants", worst_row, ROW_SUM_TOL, ok,
                       f"{failures} partition failures over {n_batches} batches")


def run_all(precision: int = 64, quick: bool = False) -> List[CheckResult]:
    """The full diagnostic suite; ``quick`` uses fewer seeds and matrices."""
    if precision not in (32, 64):
        from .errors import UsageError
        raise UsageError("precision must be 32 or 64")
    # oracles always run at 64-bit; 32-bit only loosens the primitive tolerance
    tol = PRIMITIVE_TOL if precision == 64 else 1e-2
    seeds = range(2) if quick else range(10)
    results = gradient_checks(seeds, tol)
    results.append(objective_check(per_tensor=1 if quick else 3))
    results.append(eigen_checks(10 if quick else 50))
    results.append(partition_checks(20 if quick else 100))
    return results
