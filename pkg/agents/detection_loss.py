from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from agents.heads import zero_prediction_grads
from agents.shape_prior import ShapeDecoder, prior_loss
from agents.shape_queries import preprocess_observed, ray_augment
from core.config import DetectionConfig
from core.errors import ShapeObservationError
from core.geometry import box_corners, boxes_from_params, corner_loss_from_params, points_in_box
from core.logs import logger
from core.models import Box3D, LabeledBox, LabelMode, PerPointPrediction
from core.nn import softmax_cross_entropy


IouFn = Callable[[Box3D, Box3D], float]


@dataclass
class PointLabels:
    matched: np.ndarray   # (N,) gt index of the box containing the point, -1 outside all boxes
    positive: np.ndarray  # (N,) bool
    iou: np.ndarray       # (N,) IoU of the point's box with its gt box, 0 when unmatched

    def targets(self, gt: Sequence[LabeledBox]) -> np.ndarray:
        """Classification target per point: gt class when positive, else background."""
        classes = np.array([g.class_id for g in gt] + [0], dtype=np.int64)
        return np.where(self.positive, classes[self.matched], 0)


def match_points(positions: np.ndarray, gt: Sequence[LabeledBox]) -> np.ndarray:
    """Index of the first gt box containing each point, -1 for none."""
    matched = np.full(len(positions), -1, dtype=np.int64)
    for j, item in enumerate(gt):
        inside = points_in_box(positions, item.box) & (matched < 0)
        matched[inside] = j
    return matched


def dynamic_labels(
    pred: PerPointPrediction,
    positions: np.ndarray,
    gt: Sequence[LabeledBox],
    iou_fn: IouFn,
    threshold: float = 0.7,
    mode: LabelMode = LabelMode.DYNAMIC,
) -> PointLabels:
    """
    A point inside gt box j is positive iff IoU(its predicted box, j) is
    strictly above ``threshold``. In inside-box mode membership alone
    decides.
    """
    matched = match_points(positions, gt)
    iou = np.zeros(len(positions))
    hit = np.nonzero(matched >= 0)[0]
    if LabelMode(mode) is LabelMode.INSIDE_BOX:
        return PointLabels(matched, matched >= 0, iou)
    if len(hit):
        boxes = boxes_from_params(pred.center[hit], pred.size[hit], pred.rot6[hit])
        iou[hit] = [iou_fn(box, gt[matched[i]].box) for box, i in zip(boxes, hit)]
    return PointLabels(matched, (matched >= 0) & (iou > threshold), iou)


def gt_corners_per_point(matched: np.ndarray, gt: Sequence[LabeledBox]) -> np.ndarray:
    corners = np.zeros((len(matched), 8, 3))
    for j, item in enumerate(gt):
        corners[matched == j] = box_corners(item.box)
    return corners


def object_members(matched: np.ndarray, num_objects: int) -> List[np.ndarray]:
    return [np.nonzero(matched == j)[0] for j in range(num_objects)]


def shape_loss(
    decoder: ShapeDecoder,
    embeddings: np.ndarray,
    positions: np.ndarray,
    gt: Sequence[LabeledBox],
    matched: np.ndarray,
    config: DetectionConfig,
    ground_z: float = 0.0,
    margin: float = 0.05,
) -> Tuple[float, np.ndarray, int]:
    """
    Sign loss of the frozen decoder on ray queries of every gt object with
    at least ``min_shape_points`` points, conditioned on the object's mean
    point embedding. Averaged over those objects; returns the loss, the
    per-point embedding gradient and the number of objects used.
    """
    d_emb = np.zeros_like(embeddings)
    losses: List[float] = []
    grads: List[Tuple[np.ndarray, np.ndarray]] = []
    for j, idx in enumerate(object_members(matched, len(gt))):
        if len(idx) < config.min_shape_points:
            continue
        try:
            canonical, _ = preprocess_observed(
                positions[idx], gt[j].box, ground_z, config.symmetry, margin,
                config.ground_threshold_fraction,
            )
        except ShapeObservationError as exc:
            logger.debug("shape loss skips object %d: %s", j, exc)
            continue
        queries = ray_augment(canonical, config.shape_delta)
        if not len(queries):
            continue
        e = embeddings[idx].mean(axis=0)
        values = decoder.forward(queries.positions, np.repeat(e[None], len(queries), axis=0))
        loss, d_values = prior_loss(values, queries.targets)
        _, d_rows = decoder.backward(d_values)
        losses.append(loss)
        grads.append((idx, d_rows.sum(axis=0)))
    # the decoder is frozen here; only the embedding gradient is kept
    decoder.zero_grad()

    if not losses:
        return 0.0, d_emb, 0
    n = len(losses)
    for idx, d_e in grads:
        d_emb[idx] += d_e / (n * len(idx))
    return float(np.mean(losses)), d_emb, n


@dataclass
class DetectionLossResult:
    total: float
    terms: Dict[str, float]
    d_pre: PerPointPrediction
    d_post: Optional[PerPointPrediction]
    labels: PointLabels
    shape_objects: int = 0
    extras: Dict[str, float] = field(default_factory=dict)


def detection_loss(
    pre: PerPointPrediction,
    post: Optional[PerPointPrediction],
    positions: np.ndarray,
    gt: Sequence[LabeledBox],
    config: DetectionConfig,
    iou_fn: IouFn,
    decoder: Optional[ShapeDecoder] = None,
    ground_z: float = 0.0,
    labels: Optional[PointLabels] = None,
) -> DetectionLossResult:
    """
    Corner loss before and after consolidation + point classification +
    shape sign loss, all with unit weight.

    ``post`` is None when consolidation is disabled; labels come from the
    final (post-consolidation) boxes unless given, which lets gradient
    checks hold them fixed.
    """
    final = post if post is not None else pre
    if labels is None:
        labels = dynamic_labels(
            final, positions, gt, iou_fn, config.iou_positive_threshold, config.label_mode
        )
    mask = (labels.matched >= 0).astype(np.float64)
    gt_corners = gt_corners_per_point(labels.matched, gt)

    d_pre = zero_prediction_grads(pre)
    terms: Dict[str, float] = {}

    loss, dc, ds, dr = corner_loss_from_params(
        pre.center, pre.size, pre.rot6, gt_corners, mask, config.huber_delta
    )
    terms["corner_pre"] = loss
    d_pre.center += dc
    d_pre.size += ds
    d_pre.rot6 += dr

    d_post = None
    if post is not None:
        d_post = zero_prediction_grads(post)
        loss, dc, ds, dr = corner_loss_from_params(
            post.center, post.size, post.rot6, gt_corners, mask, config.huber_delta
        )
        terms["corner_post"] = loss
        d_post.center += dc
        d_post.size += ds
        d_post.rot6 += dr

    loss, d_logits = softmax_cross_entropy(pre.semantic_logits, labels.targets(gt))
    terms["classification"] = loss
    d_pre.semantic_logits += d_logits

    shape_objects = 0
    if config.use_shape_loss and decoder is not None and len(gt):
        loss, d_emb, shape_objects = shape_loss(
            decoder, final.shape_embedding, positions, gt, labels.matched, config, ground_z
        )
        terms["shape"] = loss
        (d_post if d_post is not None else d_pre).shape_embedding += d_emb

    return DetectionLossResult(
        total=float(sum(terms.values())),
        terms=terms,
        d_pre=d_pre,
        d_post=d_post,
        labels=labels,
        shape_objects=shape_objects,
        extras={"positive_fraction": float(labels.positive.mean()) if len(positions) else 0.0},
    )
