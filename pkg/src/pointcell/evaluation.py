"""Prediction extraction and radius-limited scoring.

Protocol: proposals above an objectness threshold become predictions
(argmax class, no NMS). Predictions are matched to ground truth
greedily in descending score order, each taking its nearest still-free
ground-truth point within the radius (distance <= radius counts).
Unmatched predictions are false positives, unmatched ground truth
false negatives. Precision, recall, and F1 = 2PR/(P+R) are reported
for detection (class-blind), per class, and macro-averaged over the
classes present in the ground truth.

An optimal radius-constrained assignment mode is available for
comparison with the greedy protocol.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .matching import CostMatrix, GroundTruthSet, ProposalSet, solve_assignment

INFEASIBLE = 1e9  # cost for pairs beyond the radius in assignment mode


@dataclass
class Prediction:
    x: float
    y: float
    score: float
    class_id: int


@dataclass
class MatchOutcome:
    pairs: list[tuple[int, int, float]]  # (prediction index, gt index, distance)
    unmatched_preds: list[int]
    unmatched_gt: list[int]


@dataclass
class ClassCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0


@dataclass
class MetricsReport:
    detection: dict
    per_class: list[dict]
    classification_macro: dict
    matched_pairs: list[tuple[int, int, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "detection": self.detection,
            "per_class": self.per_class,
            "classification_macro": self.classification_macro,
            "matched_pairs": [
                {"prediction": int(p), "gt": int(g), "distance": float(d)} for p, g, d in self.matched_pairs
            ],
        }


def extract_predictions(proposals: ProposalSet, threshold: float) -> list[Prediction]:
    """Proposals with p_obj strictly above threshold, class by argmax."""
    if not 0.0 <= threshold <= 1.0:
        raise ContractError(f"threshold must lie in [0, 1], got {threshold}")
    preds = []
    scores = proposals.objectness[:, 1]
    classes = proposals.class_probs.argmax(axis=1)
    for i in range(proposals.count):
        if scores[i] > threshold:
            preds.append(
                Prediction(
                    x=float(proposals.coords[i, 0]),
                    y=float(proposals.coords[i, 1]),
                    score=float(scores[i]),
                    class_id=int(classes[i]),
                )
            )
    return preds


def _distance_table(preds: list[Prediction], gt: GroundTruthSet) -> np.ndarray:
    if not preds or gt.count == 0:
        return np.empty((len(preds), gt.count))
    pc = np.array([[p.x, p.y] for p in preds])
    diff = pc[:, None, :] - gt.coords[None, :, :]
    return np.sqrt((diff * diff).sum(axis=2))


def greedy_match(preds: list[Prediction], gt: GroundTruthSet, radius: float) -> MatchOutcome:
    if radius <= 0:
        raise ContractError(f"radius must be positive, got {radius}")
    dists = _distance_table(preds, gt)
    # stable sort on -score keeps lower index first among ties
    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
    taken = np.zeros(gt.count, dtype=bool)
    pairs = []
    unmatched_preds = []
    for i in order:
        best_j, best_d = -1, np.inf
        for j in range(gt.count):
            if not taken[j] and dists[i, j] <= radius and dists[i, j] < best_d:
                best_j, best_d = j, dists[i, j]
        if best_j >= 0:
            taken[best_j] = True
            pairs.append((i, best_j, float(best_d)))
        else:
            unmatched_preds.append(i)
    unmatched_gt = [j for j in range(gt.count) if not taken[j]]
    return MatchOutcome(pairs=pairs, unmatched_preds=sorted(unmatched_preds), unmatched_gt=unmatched_gt)


def assignment_match(preds: list[Prediction], gt: GroundTruthSet, radius: float) -> MatchOutcome:
    """Minimum-total-distance matching under the radius, via the assignment solver."""
    if radius <= 0:
        raise ContractError(f"radius must be positive, got {radius}")
    np_preds, n_gt = len(preds), gt.count
    if np_preds == 0 or n_gt == 0:
        return MatchOutcome(pairs=[], unmatched_preds=list(range(np_preds)), unmatched_gt=list(range(n_gt)))
    dists = _distance_table(preds, gt)
    costs = np.where(dists <= radius, dists, INFEASIBLE)
    if np_preds >= n_gt:
        res = solve_assignment(CostMatrix(costs, 0.0))
        raw = [(int(res.delta[j]), j) for j in range(n_gt)]
    else:
        res = solve_assignment(CostMatrix(costs.T, 0.0))
        raw = [(i, int(res.delta[i])) for i in range(np_preds)]
    pairs = [(i, j, float(dists[i, j])) for i, j in raw if dists[i, j] <= radius]
    got_p = {i for i, _, _ in pairs}
    got_g = {j for _, j, _ in pairs}
    return MatchOutcome(
        pairs=pairs,
        unmatched_preds=[i for i in range(np_preds) if i not in got_p],
        unmatched_gt=[j for j in range(n_gt) if j not in got_g],
    )


def match_predictions(
    preds: list[Prediction], gt: GroundTruthSet, radius: float, mode: str = "greedy"
) -> MatchOutcome:
    if mode == "greedy":
        return greedy_match(preds, gt, radius)
    if mode == "assignment":
        return assignment_match(preds, gt, radius)
    raise ContractError(f"unknown match mode '{mode}'")


def _prf(tp: int, fp: int, fn: int) -> dict:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return {"tp": tp, "fp": fp, "fn": fn, "precision": p, "recall": r, "f1": f1}


def accumulate_counts(
    outcome: MatchOutcome,
    preds: list[Prediction],
    gt: GroundTruthSet,
    num_classes: int,
    det: ClassCounts,
    per_class: list[ClassCounts],
) -> None:
    """Add one image's confusion counts into running totals."""
    det.tp += len(outcome.pairs)
    det.fp += len(outcome.unmatched_preds)
    det.fn += len(outcome.unmatched_gt)
    for i, j, _ in outcome.pairs:
        pc, gc = preds[i].class_id, int(gt.classes[j])
        if pc == gc:
            per_class[pc].tp += 1
        else:
            per_class[pc].fp += 1
            per_class[gc].fn += 1
    for i in outcome.unmatched_preds:
        per_class[preds[i].class_id].fp += 1
    for j in outcome.unmatched_gt:
        per_class[int(gt.classes[j])].fn += 1


def report_from_counts(
    det: ClassCounts, per_class: list[ClassCounts], matched_pairs: list | None = None
) -> MetricsReport:
    per_class_dicts = [_prf(c.tp, c.fp, c.fn) for c in per_class]
    # classes present in ground truth: tp + fn covers every GT point of the class
    present = [d for d, c in zip(per_class_dicts, per_class) if c.tp + c.fn > 0]
    if present:
        macro = {
            "precision": sum(d["precision"] for d in present) / len(present),
            "recall": sum(d["recall"] for d in present) / len(present),
            "f1": sum(d["f1"] for d in present) / len(present),
        }
    else:
        macro = {"precision": 0.0, "recall": 0.0, "f1": 0.0}
    return MetricsReport(
        detection=_prf(det.tp, det.fp, det.fn),
        per_class=per_class_dicts,
        classification_macro=macro,
        matched_pairs=matched_pairs or [],
    )


def compute_metrics(
    outcome: MatchOutcome, preds: list[Prediction], gt: GroundTruthSet, num_classes: int
) -> MetricsReport:
    det = ClassCounts()
    per_class = [ClassCounts() for _ in range(num_classes)]
    accumulate_counts(outcome, preds, gt, num_classes, det, per_class)
    return report_from_counts(det, per_class, matched_pairs=outcome.pairs)


def evaluate_images(
    per_image: list[tuple[list[Prediction], GroundTruthSet]],
    radius: float,
    num_classes: int,
    mode: str = "greedy",
) -> MetricsReport:
    """Counts accumulated across images, rates computed once at the end."""
    det = ClassCounts()
    per_class = [ClassCounts() for _ in range(num_classes)]
    for preds, gt in per_image:
        outcome = match_predictions(preds, gt, radius, mode=mode)
        accumulate_counts(outcome, preds, gt, num_classes, det, per_class)
    return report_from_counts(det, per_class)


def time_inference(infer_fn, images: list, repeats: int = 1) -> float:
    """Mean wall-clock seconds of infer_fn per image over the given list."""
    if not images:
        raise ContractError("need at least one image to time")
    if repeats < 1:
        raise ContractError(f"repeats must be positive, got {repeats}")
    start = time.perf_counter()
    for _ in range(repeats):
        for img in images:
            infer_fn(img)
    return (time.perf_counter() - start) / (repeats * len(images))
