"""
Tree Routing Unit math: feature compression, projection routing, route and
unique losses, running-mean tracking, and a power-iteration eigen oracle.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import functional as F
from .errors import ConvergenceError, DimensionError, UsageError
from .tensor import Tensor, as_tensor

ROUTE_ALPHA = 1e-3
ROUTE_BETA = 1e-2
MEAN_MOMENTUM = 0.99


@dataclass
class RoutingState:
    """Projection direction ``v`` (unit norm) and running mean ``mu``.

    ``kind="mpt"`` switches to the biased, unnormalized routing function
    ``x.v + tau`` that the baseline loss trains.

    ``mu`` is the raw zero-initialised moving average and ``updates`` counts
    how often it moved; routing centres with the bias-corrected ``mean``.
    """

    v: Tensor
    mu: np.ndarray
    momentum: float = MEAN_MOMENTUM
    kind: str = "proposed"
    tau: Optional[Tensor] = None
    updates: int = 0

    @classmethod
    def init(cls, m: int, rng: np.random.Generator, momentum: float = MEAN_MOMENTUM,
             kind: str = "proposed", dtype=np.float64) -> "RoutingState":
        v = rng.normal(size=m)
        v = (v / np.linalg.norm(v)).astype(dtype)
        tau = Tensor(np.zeros(1, dtype=dtype), requires_grad=True) if kind == "mpt" else None
        return cls(Tensor(v, requires_grad=True), np.zeros(m, dtype=dtype), momentum, kind, tau)

    @property
    def m(self) -> int:
        return self.v.shape[0]

    @property
    def mean(self) -> np.ndarray:
        if self.updates == 0:
            return self.mu
        return (self.mu / (1.0 - self.momentum ** self.updates)).astype(self.mu.dtype)

    def set_mean(self, value) -> None:
        """Make the bias-corrected mean equal ``value`` while keeping the update count."""
        value = np.asarray(value, dtype=self.mu.dtype)
        if value.shape != self.mu.shape:
            raise DimensionError(f"mean shape {value.shape} != {self.mu.shape}")
        scale = 1.0 - self.momentum ** self.updates if self.updates else 1.0
        self.mu = (value * scale).astype(self.mu.dtype)

    def project_grad(self) -> None:
        """Drop the radial part of ``v``'s gradient so steps stay on the unit sphere.

        Adaptive optimisers rescale coordinates separately; without this the
        radial component turns into a sideways drift after renormalising.
        """
        if self.kind == "proposed" and self.v.grad is not None:
            v = self.v.data
            self.v.grad = self.v.grad - (v @ self.v.grad) * v

    def renormalize(self) -> None:
        if self.kind == "proposed":
            self.v.data = self.v.data / np.linalg.norm(self.v.data)

    def parameters(self) -> List[Tensor]:
        return [self.v] if self.tau is None else [self.v, self.tau]


@dataclass
class NodeBatch:
    """Batch rows that visit a TRU (``spoof``) and the rows it suppresses (``others``)."""

    spoof: np.ndarray
    others: np.ndarray

    @property
    def n(self) -> int:
        return len(self.spoof)

    @property
    def n_minus(self) -> int:
        return len(self.others)


def compress(feature: Tensor, proj_kernel: Tensor, target: Tuple[int, int]) -> Tensor:
    """1x1 channel projection, area downscale to ``target``, row-major flatten."""
    feature = as_tensor(feature)
    th, tw = target
    if th > feature.shape[1] or tw > feature.shape[2]:
        raise DimensionError(f"compress target {target} exceeds feature extent {feature.shape[1:3]}")
    y = F.conv2d(feature, proj_kernel, padding="valid")
    y = F.area_resize(y, target)
    return F.flatten(y)


def center(x: Tensor, state: RoutingState, mu=None) -> Tensor:
    """Subtract ``mu`` (default: the state's running mean); the baseline kind is uncentered."""
    if state.kind == "mpt":
        return as_tensor(x)
    return as_tensor(x) - (state.mean if mu is None else mu)


def batch_mean(x: Tensor, rows) -> Optional[Tensor]:
    """Differentiable mean of the given rows, or None when there are none."""
    rows = np.asarray(rows, dtype=np.intp)
    if len(rows) == 0:
        return None
    return F.gather(as_tensor(x), rows).mean(axis=0)


def route_response(x, state: RoutingState, mu=None) -> Tensor:
    """Signed projection ``(x - mu) . v``; ``x`` is one vector or a [B, m] batch."""
    x = as_tensor(x)
    if x.shape[-1] != state.m:
        raise DimensionError(f"feature length {x.shape[-1]} != routing length {state.m}")
    phi = center(x, state, mu) @ state.v
    if state.tau is not None:
        phi = phi + state.tau.reshape(())
    return phi


def partition(responses: Iterable[Tuple[object, float]]) -> Tuple[list, list]:
    """Negative responses go left, everything else (zero included) right."""
    left, right = [], []
    for sid, phi in responses:
        (left if phi < 0 else right).append(sid)
    return left, right


def route_loss(S_features: Tensor, state: RoutingState, alpha: float = ROUTE_ALPHA,
               beta: float = ROUTE_BETA) -> Optional[Tensor]:
    """``exp(-alpha * v'X'Xv) + beta * Tr(X'X)`` over pre-centered rows ``X``.

    Returns None when no row is given, meaning the node is skipped this step.
    """
    X = as_tensor(S_features)
    if X.ndim != 2 or X.shape[0] == 0:
        return None
    proj = X @ state.v
    spread = proj.square().sum()
    return (spread * (-alpha)).exp() + X.square().sum() * beta


def unique_loss(S_centered: Optional[Tensor], S_minus_centered: Optional[Tensor],
                state: RoutingState) -> Optional[Tensor]:
    """Mean squared response of suppressed rows minus that of visiting spoof rows."""
    terms = []
    if S_centered is not None and S_centered.shape[0] > 0:
        terms.append(-(as_tensor(S_centered) @ state.v).square().mean())
    if S_minus_centered is not None and S_minus_centered.shape[0] > 0:
        terms.append((as_tensor(S_minus_centered) @ state.v).square().mean())
    if not terms:
        return None
    return terms[0] if len(terms) == 1 else terms[0] + terms[1]


def update_running_mean(state: RoutingState, batch_features) -> RoutingState:
    """``mu <- momentum * mu + (1 - momentum) * batch_mean``; empty batches are a no-op."""
    feats = np.asarray(batch_features.data if isinstance(batch_features, Tensor) else batch_features)
    if feats.ndim != 2 or feats.shape[0] == 0:
        return state
    if feats.shape[1] != state.m:
        raise DimensionError(f"feature length {feats.shape[1]} != routing length {state.m}")
    mom = state.momentum
    state.mu = (mom * state.mu + (1.0 - mom) * feats.mean(axis=0)).astype(state.mu.dtype)
    state.updates += 1
    return state


def top_eigvec_oracle(C, max_iter: int = 200_000, tol: float = 1e-8) -> Tuple[float, np.ndarray]:
    """Dominant eigenpair of a symmetric PSD matrix by power iteration.

    Stops once ``||Cv - lam v|| <= tol * max(1, lam)``. The start vector is a
    fixed pseudo-random draw, so repeated calls agree exactly.
    """
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise DimensionError("oracle needs a square matrix")
    if np.max(np.abs(C - C.T), initial=0.0) > 1e-9:
        raise UsageError("oracle needs a symmetric matrix")
    n = C.shape[0]
    v = np.random.default_rng(12345).normal(size=n)
    v /= np.linalg.norm(v)
    lam, res = 0.0, np.inf
    for _ in range(max_iter):
        w = C @ v
        lam = float(v @ w)
        res = float(np.linalg.norm(w - lam * v))
        if res <= tol * max(1.0, lam):
            return lam, v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0, v
        v = w / nw
    raise ConvergenceError(f"power iteration did not converge, residual {res:.3e}", residual=res)


def fit_projection(X_centered: np.ndarray, state: RoutingState, steps: int = 500,
                   lr: float = 1e-3, alpha: float = ROUTE_ALPHA, beta: float = ROUTE_BETA,
                   route_weight: float = 2.0, uniq_weight: float = 1e-3,
                   others_centered: Optional[np.ndarray] = None, optimizer: str = "adam") -> RoutingState:
    """Train ``v`` alone on frozen features with the route and unique losses."""
    from .optim import make_optimizer

    X = Tensor(np.asarray(X_centered))
    Xm = Tensor(np.asarray(others_centered)) if others_centered is not None else None
    opt = make_optimizer(optimizer, [state.v], lr)
    for _ in range(steps):
        state.v.zero_grad()
        loss = route_loss(X, state, alpha, beta) * route_weight
        uq = unique_loss(X, Xm, state)
        if uq is not None:
            loss = loss + uq * uniq_weight
        loss.backward()
        state.project_grad()
        opt.step()
        state.renormalize()
    return state
