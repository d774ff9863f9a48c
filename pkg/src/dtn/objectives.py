"""Leaf supervision losses and the weighted overall objective."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from . import functional as F
from .errors import DimensionError
from .tensor import Tensor, as_tensor


@dataclass(frozen=True)
class LossWeights:
    alpha1: float = 0.001  # classification
    alpha2: float = 1.0    # mask regression
    alpha3: float = 2.0    # route
    alpha4: float = 0.001  # unique

    def __post_init__(self):
        if min(self.alpha1, self.alpha2, self.alpha3, self.alpha4) < 0:
            raise ValueError("loss weights must be nonnegative")


def spoof_probability(codes, w0, w1, b0=0.0, b1=0.0) -> np.ndarray:
    """exp(w1.c) / (exp(w0.c) + exp(w1.c)) evaluated row-wise."""
    codes = np.atleast_2d(np.asarray(codes, dtype=np.float64))
    z0 = codes @ np.asarray(w0) + b0
    z1 = codes @ np.asarray(w1) + b1
    return 1.0 / (1.0 + np.exp(z0 - z1))


def class_loss(logits: Tensor, labels) -> Optional[Tensor]:
    """Mean softmax cross entropy over the samples at one leaf; None if empty."""
    labels = np.asarray(labels)
    if labels.size == 0:
        return None
    return F.softmax_cross_entropy(logits, labels)


def mask_loss(M: Tensor, D) -> Optional[Tensor]:
    """Per-sample L1 distance between predicted and target masks, averaged over samples."""
    M = as_tensor(M)
    D = np.asarray(D, dtype=M.dtype)
    if M.shape != D.shape:
        raise DimensionError(f"mask shape {M.shape} != target shape {D.shape}")
    if M.shape[0] == 0:
        return None
    return F.l1_norm(M - D) * (1.0 / M.shape[0])


def overall_loss(leaf_losses: Iterable, tru_losses: Iterable, weights: LossWeights = LossWeights()):
    """Weighted sum over leaves ``(class, mask)`` and TRUs ``(route, unique)``.

    Any term given as None is skipped. Returns 0.0 when nothing contributes.
    """
    total = None

    def add(term, w):
        nonlocal total
        if term is None or w == 0:
            return
        total = term * w if total is None else total + term * w

    for lc, lm in leaf_losses:
        add(lc, weights.alpha1)
        add(lm, weights.alpha2)
    for lr, lu in tru_losses:
        add(lr, weights.alpha3)
        add(lu, weights.alpha4)
    return total if total is not None else 0.0
