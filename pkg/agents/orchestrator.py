from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from time import perf_counter
from typing import List, Optional, Sequence

from agents.detector import (
    DetectionAgent,
    DetectorTrainerAgent,
    DetectorTrainingResult,
    SceneDetections,
    save_detector,
)
from agents.evaluation import EvaluationAgent, MapResult
from agents.explainer import ExplanationAgent
from agents.export import ExportAgent
from agents.prior_trainer import PriorTrainerAgent, PriorTrainingResult, save_prior
from agents.synthdata import DatasetWriterAgent, default_shapes, load_dataset
from core.config import RunConfig
from core.geometry import iou_function
from core.logs import LoggingAgent
from core.models import PrimitiveShape


@dataclass
class OrchestratorResult:
    prior: Optional[PriorTrainingResult]
    training: DetectorTrainingResult
    detections: List[SceneDetections]
    evaluation: MapResult
    logs: List[str] = field(default_factory=list)


@dataclass
class OrchestratorAgent(LoggingAgent):
    """
    Coordinates the end-to-end pipeline:
    1. Generate train and test scenes
    2. Train the shape prior on analytic primitives (skipped without shape loss)
    3. Train the detector, with the frozen decoder in the loss
    4. Detect on the test scenes (boxes + decoded meshes)
    5. Export detections and tables, score mAP, summarize
    """

    config: RunConfig
    work_dir: Path
    train_seeds: Sequence[int] = tuple(range(0, 20))
    test_seeds: Sequence[int] = tuple(range(1000, 1005))
    shapes: Optional[Sequence[PrimitiveShape]] = None
    prior_iterations: Optional[int] = None
    detector_iterations: Optional[int] = None
    mesh_resolution: int = 32
    logs: List[str] = field(default_factory=list)

    def run(self) -> OrchestratorResult:
        start_ts = perf_counter()
        cfg = self.config
        work_dir = Path(self.work_dir)
        self.log(
            f"Starting run in {work_dir}: {len(self.train_seeds)} train / "
            f"{len(self.test_seeds)} test scenes, seed {cfg.run.seed}"
        )

        # 1. Data
        writer = DatasetWriterAgent(config=cfg.scene)
        writer.write(work_dir / "train", self.train_seeds)
        writer.write(work_dir / "test", self.test_seeds)
        train_records = load_dataset(work_dir / "train")
        test_records = load_dataset(work_dir / "test")
        self.log(
            f"Generated {sum(len(r.gt) for r in train_records)} train objects and "
            f"{sum(len(r.gt) for r in test_records)} test objects."
        )

        # 2. Shape prior
        prior: Optional[PriorTrainingResult] = None
        decoder = None
        if cfg.detection.use_shape_loss:
            shapes = list(self.shapes) if self.shapes is not None else default_shapes()
            prior = PriorTrainerAgent(config=cfg).train(shapes, iterations=self.prior_iterations)
            save_prior(work_dir / "prior.npz", prior.encoder, prior.decoder, cfg)
            decoder = prior.decoder
            self.log(f"Shape prior trained on {len(shapes)} shapes, final loss {prior.final_loss:.4f}")
        else:
            self.log("Shape loss disabled; skipping the shape prior.")

        # 3. Detector
        training = DetectorTrainerAgent(config=cfg).train(
            train_records, decoder=decoder, iterations=self.detector_iterations
        )
        save_detector(work_dir / "detector.npz", training.model)

        # 4. Inference
        detector = DetectionAgent(training.model, decoder=decoder, mesh_resolution=self.mesh_resolution)
        # layers cache activations, so scenes run one at a time
        detections = [detector.detect(r.cloud, r.name) for r in test_records]

        # 5. Export, evaluation, summary
        exporter = ExportAgent(output_dir=work_dir / "detections")
        exporter.export_detections(detections, mesh_dir=work_dir / "meshes" if decoder is not None else None)
        exporter.export_table(training.loss_log, "detector_loss.csv")
        if prior is not None:
            exporter.export_table(prior.loss_log, "prior_loss.csv")

        evaluator = EvaluationAgent(iou_fn=iou_function(cfg.detection.rotation_mode, cfg.detection.sampled_iou_samples))
        evaluation = evaluator.evaluate(work_dir / "detections", work_dir / "test")
        exporter.export_table(evaluation.per_class, "per_class_ap.csv")

        for line in ExplanationAgent().summarize(cfg, prior, training, detections, evaluation):
            self.log("[Summary] " + line)

        elapsed = perf_counter() - start_ts
        self.log(f"Total run time: {elapsed:.1f}s.")

        return OrchestratorResult(
            prior=prior,
            training=training,
            detections=detections,
            evaluation=evaluation,
            logs=list(self.logs),
        )
