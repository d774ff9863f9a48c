"""The mean-separation routing loss used as an ablation baseline, plus collapse diagnostics."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import UsageError
from .tensor import Tensor, as_tensor, no_grad

DENOM_GUARD = 1e-12
OCCUPANCY_FLOOR = 0.05


def mpt_route_loss(responses_S, responses_left, responses_right) -> Optional[Tensor]:
    """(mean response)^2 / (mean left response - mean right response)^2.

    Returns None when either child is empty. A squared gap below 1e-12 gets
    1e-12 added to it.
    """
    s, l, r = as_tensor(responses_S), as_tensor(responses_left), as_tensor(responses_right)
    if s.size == 0 or l.size == 0 or r.size == 0:
        return None
    num = s.mean().square()
    den = (l.mean() - r.mean()).square()
    if float(den.data) < DENOM_GUARD:
        den = den + DENOM_GUARD
    return num / den


@dataclass
class CollapseDiagnostic:
    fractions: np.ndarray
    entropy: float
    active_leaves: int
    floor: float = OCCUPANCY_FLOOR

    def to_dict(self) -> dict:
        return {"fractions": [float(f) for f in self.fractions], "entropy": self.entropy,
                "active_leaves": self.active_leaves, "floor": self.floor}


def occupancy_diagnostic(leaf_of, n_leaves: int, floor: float = OCCUPANCY_FLOOR) -> CollapseDiagnostic:
    leaf_of = np.asarray(leaf_of, dtype=np.intp)
    if leaf_of.size == 0:
        raise UsageError("collapse diagnostic needs at least one sample")
    frac = np.bincount(leaf_of, minlength=n_leaves) / leaf_of.size
    nz = frac[frac > 0]
    entropy = float(-(nz * np.log(nz)).sum())
    return CollapseDiagnostic(frac, max(entropy, 0.0) + 0.0, int(np.sum(frac >= floor)), floor)


def collapse_diagnostic(tree, spoof_images, batch_size: int = 128,
                        floor: float = OCCUPANCY_FLOOR) -> CollapseDiagnostic:
    """Leaf occupancy of spoof samples under a frozen tree."""
    spoof_images = np.asarray(spoof_images)
    if len(spoof_images) == 0:
        raise UsageError("collapse diagnostic needs at least one sample")
    leaves = []
    with no_grad():
        for start in range(0, len(spoof_images), batch_size):
            chunk = spoof_images[start:start + batch_size].astype(tree.config.dtype)
            leaves.append(tree.forward_batch(chunk, heads=False).leaf_of)
    return occupancy_diagnostic(np.concatenate(leaves), tree.config.n_leaves, floor)
