from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from agents.detector import DetectorTrainingResult, SceneDetections
from agents.evaluation import MapResult
from agents.prior_trainer import PriorTrainingResult
from core.config import RunConfig
from core.models import LabelMode


@dataclass
class ExplanationAgent:
    """
    Produces a human-readable summary of a full run.
    """

    def summarize(
        self,
        config: RunConfig,
        prior: Optional[PriorTrainingResult] = None,
        training: Optional[DetectorTrainingResult] = None,
        detections: Sequence[SceneDetections] = (),
        evaluation: Optional[MapResult] = None,
    ) -> List[str]:
        lines: List[str] = []
        det = config.detection

        lines.append(
            f"Detector: {det.rotation_mode.value} boxes, {det.num_classes} classes, "
            f"voxel {det.voxel_size:g}, K={det.k}, alpha={det.alpha:g}."
        )
        ablations = []
        if not det.use_consolidation:
            ablations.append("graph consolidation off")
        if det.label_mode is not LabelMode.DYNAMIC:
            ablations.append("inside-box classification labels")
        if not det.use_shape_loss or prior is None:
            ablations.append("no shape loss")
        if ablations:
            lines.append("Ablations: " + ", ".join(ablations) + ".")

        if prior is not None and len(prior.loss_log):
            first = float(prior.loss_log["loss"].iloc[0])
            lines.append(
                f"Shape prior: sign loss {first:.4f} -> {prior.final_loss:.4f} "
                f"over {len(prior.loss_log)} iterations."
            )

        if training is not None and len(training.loss_log):
            log = training.loss_log
            tail = log.tail(max(1, len(log) // 10))
            lines.append(
                f"Detector training: loss {float(log['loss'].iloc[0]):.4f} -> "
                f"{float(tail['loss'].mean()):.4f} (mean of the last {len(tail)} iterations), "
                f"positive points {100.0 * float(tail['positive_fraction'].mean()):.1f}%."
            )

        if detections:
            counts = [len(s.detections) for s in detections]
            meshes = sum(1 for s in detections for m in s.meshes if not m.is_empty)
            line = (
                f"Inference: {sum(counts)} detections over {len(counts)} scenes "
                f"({np.mean(counts):.1f} per scene)"
            )
            lines.append(line + (f", {meshes} meshes decoded." if meshes else "."))

        if evaluation is not None:
            parts = [f"mAP@{t:g} = {m:.3f}" for t, m in evaluation.map.items()]
            lines.append("Evaluation: " + ", ".join(parts) + ".")
            table = evaluation.per_class
            if len(table):
                strictest = table[table["threshold"] == table["threshold"].max()]
                worst = strictest.sort_values(["ap", "class"]).iloc[0]
                lines.append(
                    f"Weakest class at IoU {worst['threshold']:g}: class {int(worst['class'])} "
                    f"with AP {worst['ap']:.3f} ({int(worst['num_gt'])} gt boxes)."
                )

        return lines
