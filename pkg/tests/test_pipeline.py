"""Export, run summaries and the end-to-end orchestrated pipeline."""

from __future__ import annotations

import numpy as np
import pandas as pd
import pytest

from agents.detector import SceneDetections
from agents.evaluation import MapResult
from agents.explainer import ExplanationAgent
from agents.export import ExportAgent
from agents.orchestrator import OrchestratorAgent
from core.config import (
    BackboneConfig,
    DecoderConfig,
    DetectionConfig,
    EncoderConfig,
    HeadsConfig,
    PriorTrainConfig,
    RunConfig,
    SceneConfig,
)
from core.errors import DataFormatError
from core.io import read_detections
from core.mesh import extract_mesh
from core.models import Box3D, Detection, LabelMode, Mesh


# ── Helpers ──────────────────────────────────────────────────────────────

def _sphere_mesh() -> Mesh:
    return extract_mesh(lambda q: np.linalg.norm(q - 0.5, axis=1) - 0.3, 12)


def _empty_mesh() -> Mesh:
    return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))


def _scene(name: str, n: int) -> SceneDetections:
    dets = [Detection(Box3D.from_yaw([float(i), 0.0, 0.5], [1.0, 1.0, 1.0], 0.1), 1 + i % 2, 0.9 - 0.1 * i)
            for i in range(n)]
    return SceneDetections(name, dets, meshes=[_sphere_mesh() if i == 0 else _empty_mesh() for i in range(n)])


def _tiny_run_config() -> RunConfig:
    return RunConfig(
        backbone=BackboneConfig(encoder_channels=[4, 6], bottleneck_channels=8, convs_per_block=1),
        heads=HeadsConfig(hidden=6),
        detection=DetectionConfig(k=4, embedding_dim=4, min_shape_points=20, max_proposals=10),
        encoder=EncoderConfig(channels=[[4]], grid_resolution=8, embedding_dim=4),
        decoder=DecoderConfig(conditional_blocks=1, hidden=8, embedding_dim=4),
        prior=PriorTrainConfig(n_near=32, n_uniform=32, n_input_points=64, log_every=0),
        scene=SceneConfig(min_objects=1, max_objects=2, extent=8.0, n_azimuth=90, n_elevation=8,
                          elevation_range_deg=(-30.0, 0.0), max_range=30.0),
    )


# ── Export ──────────────────────────────────────────────────────────────

class TestExportAgent:
    def test_detection_files_round_trip(self, tmp_path):
        scenes = [_scene("s0", 2), _scene("s1", 0)]
        paths = ExportAgent(output_dir=tmp_path).export_detections(scenes)
        assert [p.name for p in paths] == ["s0.txt", "s1.txt"]
        back = read_detections(paths[0])
        assert [d.class_id for d in back] == [1, 2]
        assert back[1].score == pytest.approx(0.8)
        assert read_detections(paths[1]) == []

    def test_empty_meshes_are_skipped(self, tmp_path):
        agent = ExportAgent(output_dir=tmp_path / "det", mesh_format="ply")
        agent.export_detections([_scene("s0", 3)], mesh_dir=tmp_path / "meshes")
        assert sorted(p.name for p in (tmp_path / "meshes").iterdir()) == ["s0_000.ply"]
        assert any("1 meshes" in line for line in agent.logs)

    def test_unknown_mesh_format(self, tmp_path):
        with pytest.raises(DataFormatError):
            ExportAgent(output_dir=tmp_path, mesh_format="stl")

    def test_table(self, tmp_path):
        path = ExportAgent(output_dir=tmp_path / "tables").export_table(pd.DataFrame({"a": [1, 2]}), "t.csv")
        assert pd.read_csv(path)["a"].tolist() == [1, 2]


# ── Summaries ───────────────────────────────────────────────────────────

class TestExplanationAgent:
    def test_ablations_are_named(self):
        config = RunConfig(detection=DetectionConfig(use_consolidation=False, label_mode=LabelMode.INSIDE_BOX))
        lines = ExplanationAgent().summarize(config)
        assert lines[0].startswith("Detector: yaw boxes, 4 classes")
        assert "graph consolidation off" in lines[1]
        assert "inside-box classification labels" in lines[1]
        assert "no shape loss" in lines[1]

    def test_detection_and_evaluation_lines(self):
        per_class = pd.DataFrame(
            [
                {"threshold": 0.25, "class": 1, "num_gt": 3, "num_detections": 4, "ap": 0.9},
                {"threshold": 0.5, "class": 1, "num_gt": 3, "num_detections": 4, "ap": 0.7},
                {"threshold": 0.5, "class": 2, "num_gt": 2, "num_detections": 1, "ap": 0.4},
            ]
        )
        evaluation = MapResult({0.25: 0.9, 0.5: 0.55}, per_class)
        lines = ExplanationAgent().summarize(RunConfig(), detections=[_scene("s0", 2)], evaluation=evaluation)
        assert "Inference: 2 detections over 1 scenes (2.0 per scene), 1 meshes decoded." in lines
        assert "Evaluation: mAP@0.25 = 0.900, mAP@0.5 = 0.550." in lines
        assert lines[-1].startswith("Weakest class at IoU 0.5: class 2 with AP 0.400")


# ── End to end ──────────────────────────────────────────────────────────

class TestOrchestrator:
    def test_tiny_run(self, tmp_path):
        agent = OrchestratorAgent(
            config=_tiny_run_config(),
            work_dir=tmp_path,
            train_seeds=(0, 1),
            test_seeds=(100,),
            prior_iterations=2,
            detector_iterations=2,
            mesh_resolution=8,
        )
        result = agent.run()
        assert (tmp_path / "prior.npz").exists()
        assert (tmp_path / "detector.npz").exists()
        assert (tmp_path / "detections" / "scene_0100.txt").exists()
        assert (tmp_path / "detections" / "per_class_ap.csv").exists()
        assert set(result.evaluation.map) == {0.25, 0.5}
        assert len(result.training.loss_log) == 2
        assert any(line.startswith("[Summary] Detector:") for line in result.logs)

    def test_without_shape_loss(self, tmp_path):
        config = _tiny_run_config().model_copy(
            update={"detection": DetectionConfig(k=4, embedding_dim=4, use_shape_loss=False)}
        )
        result = OrchestratorAgent(
            config=config, work_dir=tmp_path, train_seeds=(0,), test_seeds=(100,), detector_iterations=1,
        ).run()
        assert result.prior is None
        assert not (tmp_path / "prior.npz").exists()
