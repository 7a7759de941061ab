"""Training objectives for the point-proposal model.

Three parts, combined by a weighted sum:

    reg   mean Euclidean distance between matched proposal coords and
          their ground-truth points (optionally squared distances)
    det   cross entropy over objectness, negatives weighted by beta
    cls   per-matched-pair generalized cross entropy plus an L2 penalty
          on the probability vector, summed over pairs (optionally
          averaged)

    total = lam * reg + det + cls

All functions return scalar graph tensors; the discrete match itself
carries no gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, NumericError
from .matching import GroundTruthSet, MatchResult
from .tensor import Tensor

PROB_TOL = 1e-6


@dataclass
class LossConfig:
    alpha: float = 0.05
    beta: float = 0.6
    gamma: float = 0.1
    q: float = 0.4
    lam: float = 2e-3
    regression_squared: bool = False
    classification_mean: bool = False

    def __post_init__(self):
        if not 0.0 < self.q <= 1.0:
            raise ContractError(f"q must lie in (0, 1], got {self.q}")
        for name in ("alpha", "beta", "gamma", "lam"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be non-negative, got {getattr(self, name)}")


@dataclass
class LossBreakdown:
    reg: Tensor
    det: Tensor
    cls: Tensor
    total: Tensor

    def scalars(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("reg", "det", "cls", "total")}


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def regression_loss(proposals, gt: GroundTruthSet, matchres: MatchResult, squared: bool = False) -> Tensor:
    """Mean distance from matched proposals to their ground-truth points.

    Returns a constant 0 outside the gradient graph when there is no
    ground truth.
    """
    n = gt.count
    if n == 0:
        return Tensor(0.0)
    coords = _as_tensor(proposals.coords)
    matched = T.take_rows(coords, matchres.delta)
    diff = matched - Tensor(gt.coords)
    if squared:
        per_pair = T.sum_axis(T.square(diff), 1)
    else:
        per_pair = T.l2norm_rows(diff)
    return T.mean_all(per_pair)


def detection_loss(proposals, matchres: MatchResult, beta: float) -> Tensor:
    """-(1/M) * (sum_pos log p_obj + beta * sum_neg log p_bkg)."""
    objectness = _as_tensor(proposals.objectness)
    m = objectness.shape[0]
    if m < 1:
        raise ContractError("detection loss needs at least one proposal")
    if beta < 0:
        raise ContractError(f"beta must be non-negative, got {beta}")
    p_obj = T.select_column(objectness, 1)
    p_bkg = T.select_column(objectness, 0)
    terms = []
    if matchres.delta.size:
        terms.append(T.sum_all(T.log(T.take_rows(p_obj, matchres.delta))))
    negatives = sorted(matchres.negatives)
    if negatives and beta:
        terms.append(T.scale(T.sum_all(T.log(T.take_rows(p_bkg, negatives))), beta))
    if not terms:
        return Tensor(0.0)
    acc = terms[0]
    for t in terms[1:]:
        acc = T.add(acc, t)
    return T.scale(acc, -1.0 / m)


def gce_l2_loss(class_probs, label: int, q: float, gamma: float) -> Tensor:
    """(1 - p_target^q)/q + gamma * ||p||_2 for one probability vector."""
    if not 0.0 < q <= 1.0:
        raise ContractError(f"q must lie in (0, 1], got {q}")
    probs = _as_tensor(class_probs)
    if probs.data.ndim != 1:
        raise ContractError(f"expected a probability vector, got shape {probs.shape}")
    c = probs.shape[0]
    if not 0 <= label < c:
        raise ContractError(f"label {label} outside [0, {c})")
    if abs(probs.data.sum() - 1.0) > PROB_TOL:
        raise ContractError("class probabilities must sum to 1")
    p_target = T.take_rows(probs, [label])
    gce = T.scale(T.add_scalar(T.scale(T.sum_all(T.powf(p_target, q)), -1.0), 1.0), 1.0 / q)
    l2 = T.sqrt(T.sum_all(T.square(probs)))
    return T.add(gce, T.scale(l2, gamma))


def classification_loss(proposals, gt: GroundTruthSet, matchres: MatchResult, config: LossConfig) -> Tensor:
    """Sum of gce_l2 terms over matched pairs (mean behind a config flag)."""
    n = gt.count
    if n == 0:
        return Tensor(0.0)
    class_probs = _as_tensor(proposals.class_probs)
    matched = T.take_rows(class_probs, matchres.delta)        # (N, C)
    p_targets = T.take_per_row(matched, gt.classes)           # (N,)
    gce = T.scale(T.add_scalar(T.scale(T.sum_all(T.powf(p_targets, config.q)), -1.0), float(n)), 1.0 / config.q)
    l2 = T.sum_all(T.l2norm_rows(matched))
    loss = T.add(gce, T.scale(l2, config.gamma))
    if config.classification_mean:
        loss = T.scale(loss, 1.0 / n)
    return loss


def total_loss(reg: Tensor, det: Tensor, cls: Tensor, config: LossConfig) -> LossBreakdown:
    for name, part in (("reg", reg), ("det", det), ("cls", cls)):
        if not np.isfinite(part.data).all():
            raise NumericError(f"loss component '{name}' is non-finite")
    total = T.add(T.add(T.scale(reg, config.lam), det), cls)
    return LossBreakdown(reg=reg, det=det, cls=cls, total=total)
