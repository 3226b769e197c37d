"""
Command-line entry point.

    python -m scripts.dops <subcommand> [--config FILE] [--set section.key=value ...]

Logs go to stderr; stdout carries only the machine-readable summary (a CSV
table or one JSON line). Exit codes: 0 success, 1 usage/config error,
2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from time import perf_counter
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from agents.backbone import voxelize_points
from agents.detector import DetectionAgent, DetectorTrainerAgent, load_detector, save_detector
from agents.diagnostics import GRADCHECKS, run_gradchecks
from agents.evaluation import EvaluationAgent, map_summary
from agents.export import ExportAgent
from agents.prior_trainer import PriorEvaluationAgent, PriorTrainerAgent, load_decoder, load_prior, save_prior
from agents.shape_fitter import ShapeFitterAgent
from agents.synthdata import DatasetWriterAgent, default_shapes, load_dataset, read_shapes, write_shapes
from core.config import RunConfig, load_config
from core.errors import (
    ConfigError,
    ContractViolation,
    DataFormatError,
    DopsError,
    NumericalFailure,
    SceneGenerationError,
    ShapeObservationError,
)
from core.geometry import iou_function
from core.hashmap import build_hashmap, probe_summary
from core.io import read_cloud
from core.mesh import export_obj, export_ply
from core.models import Box3D
from core.runtime import configure


EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

logger = logging.getLogger("dops.cli")


class UsageError(DopsError):
    pass


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _emit_json(payload: Dict[str, object]) -> None:
    print(json.dumps(payload, sort_keys=True))


def _emit_csv(df: pd.DataFrame) -> None:
    sys.stdout.write(df.to_csv(index=False, float_format="%.6g"))


def _parse_overrides(items: Optional[Sequence[str]]) -> Dict[str, str]:
    overrides: Dict[str, str] = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value
    return overrides


def _parse_box(text: str) -> Box3D:
    try:
        values = [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise UsageError(f"--box must be 7 comma-separated numbers, got {text!r}") from exc
    if len(values) != 7:
        raise UsageError(f"--box needs cx,cy,cz,l,w,h,yaw (7 numbers), got {len(values)}")
    if min(values[3:6]) <= 0:
        raise UsageError(f"--box sizes must be > 0, got {values[3:6]!r}")
    return Box3D.from_yaw(values[0:3], values[3:6], values[6])


def _parse_thresholds(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"--thresholds must be comma-separated numbers, got {text!r}") from exc


def _require_dir(path: Path, flag: str) -> Path:
    path = Path(path)
    if not path.is_dir():
        raise DataFormatError(f"{flag}: directory not found: {path}")
    return path


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args, cfg: RunConfig) -> int:
    seeds = list(range(args.start_seed, args.start_seed + args.scenes))
    manifest = DatasetWriterAgent(config=cfg.scene).write(args.out, seeds)
    shapes_csv = write_shapes(args.out, default_shapes())
    manifest_df = pd.read_csv(manifest)
    _emit_json(
        {
            "command": "gen-data",
            "scenes": len(manifest_df),
            "points": int(manifest_df["num_points"].sum()),
            "objects": int(manifest_df["num_objects"].sum()),
            "manifest": str(manifest),
            "shapes": str(shapes_csv),
        }
    )
    return EXIT_OK


def cmd_bench_hash(args, cfg: RunConfig) -> int:
    if args.n < 1:
        raise UsageError(f"--n must be >= 1, got {args.n!r}")
    rng = np.random.default_rng(cfg.run.seed)
    rows = []
    for n in (args.n, 2 * args.n):
        keys = np.unique(rng.integers(-(2 ** 20), 2 ** 20, size=(n, 3)), axis=0)
        # unique() sorts; shuffle so probe patterns are not ordered
        keys = keys[rng.permutation(len(keys))]
        best = float("inf")
        for _ in range(max(1, args.repeats)):
            t0 = perf_counter()
            table = build_hashmap(keys, args.load)
            best = min(best, perf_counter() - t0)
        load, collisions, mean_probe = probe_summary(table)
        rows.append(
            {"n": len(keys), "capacity": table.capacity, "load_factor": load,
             "collision_rate": collisions, "mean_probe": mean_probe, "build_seconds": best}
        )
    df = pd.DataFrame(rows)
    df["scaling_ratio"] = df["build_seconds"] / df["build_seconds"].iloc[0]
    _emit_csv(df)
    return EXIT_OK


def cmd_voxelize(args, cfg: RunConfig) -> int:
    cloud = read_cloud(args.cloud)
    voxel_size = args.voxel_size if args.voxel_size is not None else cfg.detection.voxel_size
    tensor, p2v = voxelize_points(cloud.positions, voxel_size)
    if args.out is not None:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        df = pd.DataFrame(tensor.coords, columns=["ix", "iy", "iz"])
        df["points"] = np.bincount(p2v, minlength=tensor.num_voxels)
        df.to_csv(out, index=False)
    _emit_json(
        {
            "command": "voxelize",
            "points": len(cloud),
            "voxels": tensor.num_voxels,
            "voxel_size": voxel_size,
            "origin": tensor.origin.tolist(),
        }
    )
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    if not args.all and not args.check:
        raise UsageError("gradcheck needs --all or at least one --check NAME")
    names = None if args.all else args.check
    table = run_gradchecks(names, seed=cfg.run.seed)
    _emit_csv(table)
    failed = table[~table["passed"]]
    if len(failed):
        raise NumericalFailure(
            f"{len(failed)} gradient check(s) over tolerance: "
            + ", ".join(f"{r.check}/{r.input}={r.max_rel_error:.2e}" for r in failed.itertuples())
        )
    return EXIT_OK


def cmd_train_prior(args, cfg: RunConfig) -> int:
    shapes = read_shapes(_require_dir(args.shapes, "--shapes"))
    result = PriorTrainerAgent(config=cfg).train(shapes, iterations=args.iterations)
    ckpt = save_prior(args.out, result.encoder, result.decoder, cfg)
    log_path = Path(args.out).with_suffix(".loss.csv")
    result.loss_log.to_csv(log_path, index=False, float_format="%.9g")
    _emit_json(
        {"command": "train-prior", "shapes": len(shapes), "iterations": len(result.loss_log),
         "final_loss": result.final_loss, "checkpoint": str(ckpt), "loss_log": str(log_path)}
    )
    return EXIT_OK


def cmd_eval_prior(args, cfg: RunConfig) -> int:
    encoder, decoder, _ = load_prior(args.ckpt)
    if encoder is None:
        raise DataFormatError(f"{args.ckpt}: checkpoint has no encoder weights")
    shapes = read_shapes(_require_dir(args.shapes, "--shapes"))
    agent = PriorEvaluationAgent(
        resolution=args.resolution,
        n_input_points=cfg.prior.n_input_points,
        margin=cfg.prior.margin,
        seed=cfg.run.seed,
    )
    _emit_csv(agent.evaluate(encoder, decoder, shapes))
    return EXIT_OK


def cmd_fit_shape(args, cfg: RunConfig) -> int:
    _, decoder, _ = load_prior(args.ckpt)
    box = _parse_box(args.box)
    updates = {"delta": args.delta, "resolution": args.res}
    if args.iterations is not None:
        updates["iterations"] = args.iterations
    if args.surface_only:
        updates.update(include_surface=True, use_rays=False)
    fit_cfg = cfg.fit.model_copy(update=updates)
    cloud = read_cloud(args.cloud)
    result = ShapeFitterAgent(config=fit_cfg).fit(cloud.positions, box, decoder, ground_z=args.ground_z)
    out = Path(args.out)
    (export_ply if out.suffix.lower() == ".ply" else export_obj)(result.mesh, out)
    _emit_json(
        {"command": "fit-shape", "queries": len(result.queries), "final_loss": result.final_loss,
         "vertices": len(result.mesh.vertices), "faces": len(result.mesh.faces), "mesh": str(out)}
    )
    return EXIT_OK


def cmd_train_detect(args, cfg: RunConfig) -> int:
    records = load_dataset(_require_dir(args.data, "--data"))
    prior_path = args.prior or cfg.train.prior_checkpoint
    decoder = load_decoder(Path(prior_path)) if prior_path and cfg.detection.use_shape_loss else None
    result = DetectorTrainerAgent(config=cfg).train(records, decoder=decoder, iterations=args.iterations)
    ckpt = save_detector(args.out, result.model)
    log_path = Path(args.out).with_suffix(".loss.csv")
    result.loss_log.to_csv(log_path, index=False, float_format="%.9g")
    final = float(result.loss_log["loss"].iloc[-1]) if len(result.loss_log) else float("nan")
    _emit_json(
        {"command": "train-detect", "scenes": len(records), "iterations": len(result.loss_log),
         "final_loss": final, "shape_loss": decoder is not None,
         "checkpoint": str(ckpt), "loss_log": str(log_path)}
    )
    return EXIT_OK


def cmd_detect(args, cfg: RunConfig) -> int:
    model = load_detector(args.ckpt)
    decoder = load_decoder(Path(args.prior)) if args.prior else None
    if args.meshes_out and decoder is None:
        raise UsageError("--meshes-out needs --prior")
    if bool(args.data) == bool(args.cloud):
        raise UsageError("detect needs exactly one of --data or --cloud")
    if args.data:
        inputs = [(r.name, r.cloud) for r in load_dataset(_require_dir(args.data, "--data"))]
    else:
        inputs = [(Path(args.cloud).stem, read_cloud(args.cloud))]
    agent = DetectionAgent(model, decoder=decoder if args.meshes_out else None, mesh_resolution=args.res)
    scenes = [agent.detect(cloud, name) for name, cloud in inputs]
    ExportAgent(output_dir=args.out, mesh_format=args.mesh_format).export_detections(
        scenes, mesh_dir=Path(args.meshes_out) if args.meshes_out else None
    )
    _emit_json(
        {"command": "detect", "scenes": len(scenes),
         "detections": sum(len(s.detections) for s in scenes), "out": str(args.out)}
    )
    return EXIT_OK


def cmd_eval_detect(args, cfg: RunConfig) -> int:
    det = cfg.detection
    agent = EvaluationAgent(
        thresholds=_parse_thresholds(args.thresholds),
        iou_fn=iou_function(det.rotation_mode, det.sampled_iou_samples),
    )
    result = agent.evaluate(args.pred, args.gt)
    if args.per_class is not None:
        Path(args.per_class).parent.mkdir(parents=True, exist_ok=True)
        result.per_class.to_csv(args.per_class, index=False, float_format="%.6g")
    _emit_csv(map_summary(result))
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "bench-hash": cmd_bench_hash,
    "voxelize": cmd_voxelize,
    "gradcheck": cmd_gradcheck,
    "train-prior": cmd_train_prior,
    "eval-prior": cmd_eval_prior,
    "fit-shape": cmd_fit_shape,
    "train-detect": cmd_train_detect,
    "detect": cmd_detect,
    "eval-detect": cmd_eval_detect,
}


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so main() owns exit codes."""

    def error(self, message: str):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="key = value config file with [sections]")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--seed", type=int, default=None, help="global seed (run.seed)")
    common.add_argument("--threads", type=int, default=None, help="thread cap (run.threads)")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    p = _Parser(prog="dops", description="Desk-scale 3D detection with a learned shape prior.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("gen-data", parents=[common], help="generate synthetic LIDAR scenes")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--scenes", type=int, default=10)
    s.add_argument("--start-seed", type=int, default=0)

    s = sub.add_parser("bench-hash", parents=[common], help="hashmap collision rate and build-time scaling")
    s.add_argument("--n", type=int, default=100000)
    s.add_argument("--load", type=float, default=0.42)
    s.add_argument("--repeats", type=int, default=3)

    s = sub.add_parser("voxelize", parents=[common], help="voxelize one cloud and report the active set")
    s.add_argument("--cloud", type=Path, required=True)
    s.add_argument("--voxel-size", type=float, default=None)
    s.add_argument("--out", type=Path, default=None, help="optional CSV of voxel keys and point counts")

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    s.add_argument("--all", action="store_true")
    s.add_argument("--check", action="append", choices=sorted(GRADCHECKS), default=[])

    s = sub.add_parser("train-prior", parents=[common], help="train the shape encoder and decoder")
    s.add_argument("--shapes", type=Path, required=True, help="directory holding shapes.csv")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--iterations", type=int, default=None)

    s = sub.add_parser("eval-prior", parents=[common], help="Chamfer / IoU of reconstructed training shapes")
    s.add_argument("--ckpt", type=Path, required=True)
    s.add_argument("--shapes", type=Path, required=True)
    s.add_argument("--resolution", type=int, default=64)

    s = sub.add_parser("fit-shape", parents=[common], help="fit an embedding to one observed object")
    s.add_argument("--ckpt", type=Path, required=True)
    s.add_argument("--cloud", type=Path, required=True)
    s.add_argument("--box", required=True, help="cx,cy,cz,l,w,h,yaw")
    s.add_argument("--delta", type=float, default=0.1)
    s.add_argument("--res", type=int, default=100)
    s.add_argument("--iterations", type=int, default=None)
    s.add_argument("--ground-z", type=float, default=0.0)
    s.add_argument("--surface-only", action="store_true", help="surface constraints only, no ray queries")
    s.add_argument("--out", type=Path, required=True)

    s = sub.add_parser("train-detect", parents=[common], help="train the detector")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--prior", type=Path, default=None, help="prior checkpoint for the shape loss")
    s.add_argument("--iterations", type=int, default=None)

    s = sub.add_parser("detect", parents=[common], help="run a trained detector")
    s.add_argument("--ckpt", type=Path, required=True)
    s.add_argument("--data", type=Path, default=None)
    s.add_argument("--cloud", type=Path, default=None)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--prior", type=Path, default=None)
    s.add_argument("--meshes-out", type=Path, default=None)
    s.add_argument("--mesh-format", choices=["obj", "ply"], default="obj")
    s.add_argument("--res", type=int, default=64)

    s = sub.add_parser("eval-detect", parents=[common], help="mAP of detection files against gt files")
    s.add_argument("--pred", type=Path, required=True)
    s.add_argument("--gt", type=Path, required=True)
    s.add_argument("--thresholds", default="0.25,0.5")
    s.add_argument("--per-class", type=Path, default=None, help="optional per-class AP CSV")
    return p


def parse_args(argv: Optional[Sequence[str]]) -> argparse.Namespace:
    args = build_parser().parse_args(argv)
    if args.command is None:
        raise UsageError(f"a subcommand is required: {', '.join(COMMANDS)}")
    return args


def resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides = _parse_overrides(args.set)
    if args.seed is not None:
        overrides["run.seed"] = str(args.seed)
    if args.threads is not None:
        overrides["run.threads"] = str(args.threads)
    cfg = load_config(args.config, overrides)
    configure(threads=cfg.run.threads, deterministic=cfg.run.deterministic, precision=cfg.run.precision)
    return cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = parse_args(argv)
        logging.basicConfig(
            level=getattr(logging, args.log_level),
            stream=sys.stderr,
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        )
        cfg = resolve_config(args)
        logger.info("effective config:\n%s", cfg.echo())
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"dops: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, SceneGenerationError, ShapeObservationError, FileNotFoundError) as exc:
        print(f"dops: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalFailure as exc:
        print(f"dops: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ContractViolation as exc:
        print(f"dops: invalid input: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
