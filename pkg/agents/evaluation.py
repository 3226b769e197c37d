from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from core.errors import DataFormatError
from core.geometry import iou_oriented
from core.io import read_detections, read_gt_boxes
from core.logs import LoggingAgent
from core.models import Box3D, Detection, LabeledBox


IouFn = Callable[[Box3D, Box3D], float]


def voc_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-point interpolated AP: area under the monotone precision envelope."""
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    i = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


def class_pr_curve(
    detections: Sequence[Sequence[Detection]],
    gt: Sequence[Sequence[LabeledBox]],
    class_id: int,
    threshold: float,
    iou_fn: IouFn,
):
    """
    Precision/recall for one class: detections of every scene sorted by
    descending score, each matched to its best-overlapping gt box of the
    same scene, at most once per gt box.
    """
    entries = [
        (-d.score, s, i, d)
        for s, scene in enumerate(detections)
        for i, d in enumerate(scene)
        if d.class_id == class_id
    ]
    entries.sort(key=lambda e: e[:3])
    gt_boxes = [[g.box for g in scene if g.class_id == class_id] for scene in gt]
    n_pos = sum(len(b) for b in gt_boxes)
    used = [np.zeros(len(b), dtype=bool) for b in gt_boxes]

    tp = np.zeros(len(entries))
    for k, (_, s, _, det) in enumerate(entries):
        candidates = gt_boxes[s] if s < len(gt_boxes) else []
        if not candidates:
            continue
        overlaps = np.array([iou_fn(det.box, g) for g in candidates])
        best = int(np.argmax(overlaps))
        if overlaps[best] >= threshold and not used[s][best]:
            used[s][best] = True
            tp[k] = 1.0
    fp = 1.0 - tp
    tp_cum, fp_cum = np.cumsum(tp), np.cumsum(fp)
    recall = tp_cum / max(n_pos, 1)
    precision = tp_cum / np.maximum(tp_cum + fp_cum, np.finfo(np.float64).eps)
    return recall, precision, n_pos


@dataclass
class MapResult:
    map: Dict[float, float]
    per_class: pd.DataFrame  # threshold, class, num_gt, num_detections, ap


def evaluate_map(
    detections: Sequence[Sequence[Detection]],
    gt: Sequence[Sequence[LabeledBox]],
    thresholds: Sequence[float] = (0.25, 0.5),
    iou_fn: Optional[IouFn] = None,
) -> MapResult:
    """
    mAP per IoU threshold over a set of scenes (scene i of ``detections``
    pairs with scene i of ``gt``). Classes without gt boxes are left out of
    the mean; no gt at all gives mAP 0.
    """
    if len(detections) != len(gt):
        raise DataFormatError(f"{len(detections)} detection scenes but {len(gt)} gt scenes")
    iou_fn = iou_fn or iou_oriented
    classes = sorted({g.class_id for scene in gt for g in scene})
    rows = []
    result: Dict[float, float] = {}
    for t in thresholds:
        aps = []
        for c in classes:
            recall, precision, n_pos = class_pr_curve(detections, gt, c, t, iou_fn)
            ap = voc_ap(recall, precision) if len(recall) else 0.0
            aps.append(ap)
            rows.append(
                {"threshold": float(t), "class": c, "num_gt": n_pos,
                 "num_detections": len(recall), "ap": ap}
            )
        result[float(t)] = float(np.mean(aps)) if aps else 0.0
    per_class = pd.DataFrame(rows, columns=["threshold", "class", "num_gt", "num_detections", "ap"])
    return MapResult(map=result, per_class=per_class)


def map_summary(result: MapResult) -> pd.DataFrame:
    return pd.DataFrame(
        [{"threshold": t, "mAP": m} for t, m in result.map.items()], columns=["threshold", "mAP"]
    )


@dataclass
class EvaluationAgent(LoggingAgent):
    """Scores detection files against gt files matched by file name."""

    thresholds: List[float] = field(default_factory=lambda: [0.25, 0.5])
    iou_fn: Optional[IouFn] = None
    logs: List[str] = field(default_factory=list)

    def evaluate(self, pred_dir: Path, gt_dir: Path) -> MapResult:
        pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
        for d in (pred_dir, gt_dir):
            if not d.is_dir():
                raise DataFormatError(f"Directory not found: {d}")
        stems = sorted(p.stem for p in gt_dir.glob("*.txt"))
        if not stems:
            raise DataFormatError(f"No ground-truth .txt files in {gt_dir}")
        detections, gt = [], []
        for stem in stems:
            pred_path = pred_dir / f"{stem}.txt"
            detections.append(read_detections(pred_path) if pred_path.exists() else [])
            gt.append(read_gt_boxes(gt_dir / f"{stem}.txt"))
        result = evaluate_map(detections, gt, self.thresholds, self.iou_fn)
        for t, m in result.map.items():
            self.log(f"mAP@{t:g} = {m:.4f} over {len(stems)} scenes")
        return result
