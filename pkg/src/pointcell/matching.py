"""One-to-one assignment of point proposals to ground-truth points.

The pairwise cost couples localization distance against confidence:

    E[i][j] = alpha * ||coord_i - gt_j||_2 - p_obj[i] - p_class[i, label_j]

and the minimum-cost injective mapping is found with a shortest
augmenting path solver (Jonker-Volgenant style, O(n^3)). Matching runs
on plain arrays, never on graph tensors: the discrete assignment does
not carry gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, InfeasibleError, NumericError, ShapeError

PROB_TOL = 1e-9


@dataclass
class ProposalSet:
    """Decoded proposals for one image: absolute coords plus probabilities.

    objectness columns are (background, object); class_probs rows span the
    C cell categories. Every probability row must sum to 1.
    """

    coords: np.ndarray      # (M, 2) pixels, x then y
    objectness: np.ndarray  # (M, 2)
    class_probs: np.ndarray  # (M, C)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.objectness = np.asarray(self.objectness, dtype=np.float64)
        self.class_probs = np.asarray(self.class_probs, dtype=np.float64)
        m = self.coords.shape[0]
        if self.coords.ndim != 2 or self.coords.shape[1] != 2:
            raise ShapeError(f"coords must be (M, 2), got {self.coords.shape}")
        if self.objectness.shape != (m, 2):
            raise ShapeError(f"objectness must be ({m}, 2), got {self.objectness.shape}")
        if self.class_probs.ndim != 2 or self.class_probs.shape[0] != m:
            raise ShapeError(f"class_probs must be ({m}, C), got {self.class_probs.shape}")
        if m:
            if np.abs(self.objectness.sum(axis=1) - 1.0).max() > PROB_TOL:
                raise ContractError("objectness rows must sum to 1")
            if np.abs(self.class_probs.sum(axis=1) - 1.0).max() > PROB_TOL:
                raise ContractError("class probability rows must sum to 1")

    @property
    def count(self) -> int:
        return self.coords.shape[0]


@dataclass
class GroundTruthSet:
    """Annotated points for one image."""

    coords: np.ndarray   # (N, 2) pixels, x then y
    classes: np.ndarray  # (N,) ints in [0, C)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        self.classes = np.asarray(self.classes, dtype=np.intp).reshape(-1)
        if self.coords.shape[0] != self.classes.shape[0]:
            raise ShapeError(
                f"coords and classes disagree: {self.coords.shape[0]} vs {self.classes.shape[0]}"
            )
        if self.classes.size and self.classes.min() < 0:
            raise ContractError("negative class id")

    @property
    def count(self) -> int:
        return self.coords.shape[0]


@dataclass
class CostMatrix:
    values: np.ndarray  # (M, N)
    alpha: float


@dataclass
class MatchResult:
    """delta[j] = proposal index matched to ground-truth j; the rest are negatives."""

    delta: np.ndarray            # (N,) intp
    negatives: set[int] = field(default_factory=set)

    @property
    def positives(self) -> set[int]:
        return set(int(i) for i in self.delta)


def build_cost_matrix(proposals: ProposalSet, gt: GroundTruthSet, alpha: float) -> CostMatrix:
    m, n = proposals.count, gt.count
    if m < n:
        raise InfeasibleError(f"need at least as many proposals as ground-truth points: M={m} < N={n}")
    if alpha < 0:
        raise ContractError(f"alpha must be non-negative, got {alpha}")
    if n and gt.classes.max() >= proposals.class_probs.shape[1]:
        raise ContractError(
            f"class id {int(gt.classes.max())} outside [0, {proposals.class_probs.shape[1]})"
        )
    diff = proposals.coords[:, None, :] - gt.coords[None, :, :]  # (M, N, 2)
    dist = np.sqrt((diff * diff).sum(axis=2))
    values = alpha * dist - proposals.objectness[:, 1:2] - proposals.class_probs[:, gt.classes]
    if not np.isfinite(values).all():
        raise NumericError("non-finite entries in cost matrix")
    return CostMatrix(values=values, alpha=alpha)


def _augmenting_path_solve(cost: np.ndarray) -> np.ndarray:
    """Columns of an (n, m) matrix assigned to rows, n <= m; returns col_of_row.

    Shortest augmenting path with dual potentials. Ties resolve to the
    lowest column index (first argmin).
    """
    n, m = cost.shape
    u = np.zeros(n)
    v = np.zeros(m + 1)                       # slot 0 is the virtual start column
    owner = np.full(m + 1, -1, dtype=np.intp)  # owner[j] = row holding column j
    for i in range(n):
        owner[0] = i
        j0 = 0
        minv = np.full(m, np.inf)  # best reduced cost to reach each real column
        way = np.zeros(m, dtype=np.intp)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            cur = cost[i0] - u[i0] - v[1:]
            free = ~used[1:]
            improve = free & (cur < minv)
            minv[improve] = cur[improve]
            way[improve] = j0
            masked = np.where(free, minv, np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if owner[j0] == -1:
                break
        while j0 != 0:
            j_prev = way[j0 - 1]
            owner[j0] = owner[j_prev]
            j0 = j_prev
    col_of_row = np.empty(n, dtype=np.intp)
    for j in range(1, m + 1):
        if owner[j] != -1:
            col_of_row[owner[j]] = j - 1
    return col_of_row


def solve_assignment(costs: CostMatrix) -> MatchResult:
    values = np.asarray(costs.values, dtype=np.float64)
    if values.ndim != 2:
        raise ShapeError(f"cost matrix must be 2-D, got shape {values.shape}")
    m, n = values.shape
    if m < n:
        raise InfeasibleError(f"need at least as many proposals as ground-truth points: M={m} < N={n}")
    if not np.isfinite(values).all():
        raise NumericError("non-finite entries in cost matrix")
    if n == 0:
        return MatchResult(delta=np.empty(0, dtype=np.intp), negatives=set(range(m)))
    # solver wants rows <= cols: ground truth as rows, proposals as cols
    delta = _augmenting_path_solve(values.T)
    negatives = set(range(m)) - set(int(i) for i in delta)
    return MatchResult(delta=delta, negatives=negatives)


def match(proposals: ProposalSet, gt: GroundTruthSet, alpha: float) -> MatchResult:
    return solve_assignment(build_cost_matrix(proposals, gt, alpha))
