"""Command-line subcommands, their stdout summaries and exit codes."""

from __future__ import annotations

import io
import json

import numpy as np
import pandas as pd
import pytest

from agents.detector import DopsDetector, save_detector
from agents.prior_trainer import save_prior
from agents.shape_prior import build_prior
from core.config import BackboneConfig, DecoderConfig, DetectionConfig, EncoderConfig, HeadsConfig, RunConfig
from core.io import write_boxes, write_cloud_bin
from core.models import Box3D, Detection, LabeledBox, PointCloud
from scripts.dops import EXIT_DATA, EXIT_OK, EXIT_USAGE, main


# ── Helpers ──────────────────────────────────────────────────────────────

SMALL_SCENE = [
    "--set", "scene.min_objects=1", "--set", "scene.max_objects=2", "--set", "scene.extent=8",
    "--set", "scene.n_azimuth=60", "--set", "scene.n_elevation=6", "--set", "scene.max_range=20",
]


def _small_config() -> RunConfig:
    return RunConfig(
        backbone=BackboneConfig(encoder_channels=[4, 6], bottleneck_channels=8, convs_per_block=1),
        heads=HeadsConfig(hidden=6),
        detection=DetectionConfig(num_classes=2, k=4, embedding_dim=4, max_proposals=5),
        encoder=EncoderConfig(channels=[[4]], grid_resolution=8, embedding_dim=4),
        decoder=DecoderConfig(conditional_blocks=1, hidden=8, embedding_dim=4),
    )


def _stdout_json(capsys) -> dict:
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


def _stdout_csv(capsys) -> pd.DataFrame:
    return pd.read_csv(io.StringIO(capsys.readouterr().out))


def _cloud_file(tmp_path, rng) -> str:
    d = rng.normal(size=(300, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    points = d[d[:, 2] > -0.8] * 0.5 + [3.0, 0.0, 0.5]
    return str(write_cloud_bin(tmp_path / "obj.bin", PointCloud(points)))


GT = [
    LabeledBox(Box3D.from_yaw([0.0, 0.0, 1.0], [1.0, 1.0, 2.0], 0.0), 1),
    LabeledBox(Box3D.from_yaw([4.0, 1.0, 0.5], [2.0, 1.0, 1.0], 0.4), 2),
]


# ── Usage ───────────────────────────────────────────────────────────────

class TestUsage:
    def test_no_subcommand(self):
        assert main([]) == EXIT_USAGE

    def test_missing_required_flag(self):
        assert main(["gen-data"]) == EXIT_USAGE

    def test_bad_override(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path), "--set", "detection.k"]) == EXIT_USAGE

    def test_unknown_config_key(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path), "--set", "scene.planets=3"]) == EXIT_USAGE

    def test_gradcheck_needs_a_selection(self):
        assert main(["gradcheck"]) == EXIT_USAGE


# ── Subcommands ─────────────────────────────────────────────────────────

class TestSubcommands:
    def test_gen_data(self, tmp_path, capsys):
        out = tmp_path / "data"
        code = main(["gen-data", "--out", str(out), "--scenes", "2", *SMALL_SCENE])
        assert code == EXIT_OK
        summary = _stdout_json(capsys)
        assert summary["scenes"] == 2
        assert summary["points"] > 0
        assert (out / "shapes.csv").exists()

    def test_bench_hash(self, capsys):
        assert main(["bench-hash", "--n", "500", "--repeats", "1"]) == EXIT_OK
        table = _stdout_csv(capsys)
        assert len(table) == 2
        assert (table["load_factor"] <= 0.42 + 1e-9).all()
        assert table["scaling_ratio"].iloc[0] == pytest.approx(1.0)

    def test_voxelize(self, tmp_path, capsys, rng):
        cloud = _cloud_file(tmp_path, rng)
        csv = tmp_path / "voxels.csv"
        assert main(["voxelize", "--cloud", cloud, "--voxel-size", "0.1", "--out", str(csv)]) == EXIT_OK
        summary = _stdout_json(capsys)
        table = pd.read_csv(csv)
        assert len(table) == summary["voxels"]
        assert table["points"].sum() == summary["points"]

    def test_missing_cloud_is_a_data_error(self, tmp_path):
        assert main(["voxelize", "--cloud", str(tmp_path / "none.bin")]) == EXIT_DATA

    def test_gradcheck_linear(self, capsys):
        assert main(["gradcheck", "--check", "linear"]) == EXIT_OK
        table = _stdout_csv(capsys)
        assert set(table["check"]) == {"linear"}
        assert table["passed"].all()

    def test_fit_shape(self, tmp_path, capsys, rng):
        _, decoder = build_prior(EncoderConfig(embedding_dim=4), DecoderConfig(conditional_blocks=1, hidden=8,
                                                                                embedding_dim=4), with_encoder=False)
        ckpt = save_prior(tmp_path / "prior.npz", None, decoder.eval(), _small_config())
        mesh = tmp_path / "fit.obj"
        args = ["fit-shape", "--ckpt", str(ckpt), "--cloud", _cloud_file(tmp_path, rng),
                "--res", "8", "--iterations", "3", "--out", str(mesh)]
        assert main([*args, "--box", "3,0,0.5,1,1,1,0"]) == EXIT_OK
        summary = _stdout_json(capsys)
        assert summary["queries"] > 0
        assert mesh.exists()
        assert main([*args, "--box", "3,0,0.5,1,1"]) == EXIT_USAGE

    def test_detect_writes_one_file_per_cloud(self, tmp_path, capsys, rng):
        ckpt = save_detector(tmp_path / "det.npz", DopsDetector(_small_config()).eval())
        out = tmp_path / "pred"
        code = main(["detect", "--ckpt", str(ckpt), "--cloud", _cloud_file(tmp_path, rng), "--out", str(out)])
        assert code == EXIT_OK
        assert (out / "obj.txt").exists()
        assert _stdout_json(capsys)["scenes"] == 1

    def test_detect_meshes_need_a_prior(self, tmp_path, rng):
        ckpt = save_detector(tmp_path / "det.npz", DopsDetector(_small_config()).eval())
        args = ["detect", "--ckpt", str(ckpt), "--cloud", _cloud_file(tmp_path, rng),
                "--out", str(tmp_path / "pred"), "--meshes-out", str(tmp_path / "meshes")]
        assert main(args) == EXIT_USAGE


# ── Evaluation ──────────────────────────────────────────────────────────

class TestEvalDetect:
    def test_ground_truth_scores_one(self, tmp_path, capsys):
        write_boxes(tmp_path / "gt" / "s0.txt", GT)
        write_boxes(tmp_path / "pred" / "s0.txt", [Detection(g.box, g.class_id, 0.9) for g in GT])
        per_class = tmp_path / "per_class.csv"
        code = main(["eval-detect", "--pred", str(tmp_path / "pred"), "--gt", str(tmp_path / "gt"),
                     "--per-class", str(per_class)])
        assert code == EXIT_OK
        table = _stdout_csv(capsys)
        assert list(table["threshold"]) == [0.25, 0.5]
        np.testing.assert_allclose(table["mAP"], 1.0)
        assert per_class.exists()

    def test_missing_predictions_score_zero(self, tmp_path, capsys):
        write_boxes(tmp_path / "gt" / "s0.txt", GT)
        (tmp_path / "pred").mkdir()
        assert main(["eval-detect", "--pred", str(tmp_path / "pred"), "--gt", str(tmp_path / "gt")]) == EXIT_OK
        np.testing.assert_allclose(_stdout_csv(capsys)["mAP"], 0.0)

    def test_missing_directory(self, tmp_path):
        assert main(["eval-detect", "--pred", str(tmp_path / "a"), "--gt", str(tmp_path / "b")]) == EXIT_DATA
