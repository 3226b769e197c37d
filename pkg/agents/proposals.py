from __future__ import annotations

from typing import Callable, List, Optional

import numpy as np

from core.geometry import boxes_from_params, iou_oriented
from core.models import Box3D, Detection, PerPointPrediction, Proposal, ProposalSet
from core.nn import softmax


MIN_SCORE = 1e-12


def foreground_scores(semantic_logits: np.ndarray) -> np.ndarray:
    """s_b = 1 - P(background) per point."""
    return 1.0 - softmax(semantic_logits)[:, 0]


def foreground_classes(semantic_logits: np.ndarray) -> np.ndarray:
    """Most likely foreground class per point (1-based, background excluded)."""
    return np.argmax(semantic_logits[:, 1:], axis=1) + 1


def selection_order(
    centers: np.ndarray,
    scores: np.ndarray,
    alpha: float,
    max_proposals: int,
) -> List[int]:
    """
    Greedy farthest-and-highest selection.

    The first pick is the best score; each following pick maximizes
    log s + alpha * log(min distance to the picked centers). Candidates
    with s < 1e-12 never qualify, and selection stops once every remaining
    objective is -inf (e.g. duplicates of picked centers when alpha > 0).
    Ties resolve to the lowest point index.
    """
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    n = len(scores)
    valid = scores >= MIN_SCORE
    with np.errstate(divide="ignore"):
        log_s = np.where(valid, np.log(np.where(valid, scores, 1.0)), -np.inf)

    picked: List[int] = []
    min_dist = np.full(n, np.inf)
    available = valid.copy()
    while len(picked) < max_proposals and available.any():
        if not picked or alpha == 0.0:
            objective = log_s.copy()
        else:
            with np.errstate(divide="ignore"):
                objective = log_s + alpha * np.log(min_dist)
        objective[~available] = -np.inf
        best = int(np.argmax(objective))
        if objective[best] == -np.inf:
            break
        picked.append(best)
        available[best] = False
        d = np.sqrt(np.sum((centers - centers[best]) ** 2, axis=1))
        np.minimum(min_dist, d, out=min_dist)
    return picked


def propose_boxes(
    pred: PerPointPrediction,
    alpha: float = 1.0,
    max_proposals: int = 100,
) -> ProposalSet:
    """Seed proposals from per-point boxes in selection order."""
    scores = foreground_scores(pred.semantic_logits)
    order = selection_order(pred.center, scores, alpha, max_proposals)
    if not order:
        return ProposalSet()
    idx = np.asarray(order)
    classes = foreground_classes(pred.semantic_logits)
    boxes = boxes_from_params(pred.center[idx], pred.size[idx], pred.rot6[idx])
    return ProposalSet(
        [
            Proposal(box=box, class_id=int(classes[i]), score=float(scores[i]), index=int(i))
            for box, i in zip(boxes, idx)
        ]
    )


def nms(
    props: ProposalSet,
    iou_thresh: float,
    iou_fn: Optional[Callable[[Box3D, Box3D], float]] = None,
) -> ProposalSet:
    """
    Greedy suppression in (-score, index) order: a proposal survives unless
    a kept one overlaps it with IoU > iou_thresh. Survivors keep that order.
    """
    iou_fn = iou_fn or iou_oriented
    order = sorted(props.proposals, key=lambda p: (-p.score, p.index))
    keep: List[Proposal] = []
    while order:
        head = order[0]
        keep.append(head)
        order = [p for p in order[1:] if iou_fn(head.box, p.box) <= iou_thresh]
    return ProposalSet(keep)


def to_detections(props: ProposalSet, min_score: float = 0.0) -> List[Detection]:
    return [
        Detection(box=p.box, class_id=p.class_id, score=p.score)
        for p in props
        if p.score >= min_score
    ]
