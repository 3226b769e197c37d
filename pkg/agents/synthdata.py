from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from shapely.geometry import Point

from core.config import SceneConfig
from core.errors import ContractViolation, DataFormatError, SceneGenerationError
from core.geometry import bev_polygon, yaw_rotation
from core.io import read_cloud_bin, read_gt_boxes, write_boxes, write_cloud_bin
from core.logs import LoggingAgent
from core.models import (
    Box3D,
    LabeledBox,
    PointCloud,
    PrimitiveShape,
    SceneObject,
    ShapeKind,
    SyntheticScene,
)
from core.runtime import parallel_map


# class 0 is background
CLASS_OF_KIND: Dict[ShapeKind, int] = {
    ShapeKind.SPHERE: 1,
    ShapeKind.BOX: 2,
    ShapeKind.CAPSULE: 3,
    ShapeKind.VEHICLE: 4,
}

HIT_TOLERANCE = 1e-6
RANGE_NOISE_CLIP = 2.5  # range noise is a Gaussian truncated at this many sigmas


# ---------------------------------------------------------------------------
# 1. Primitive shapes and their analytic SDFs
# ---------------------------------------------------------------------------

def default_shapes() -> List[PrimitiveShape]:
    """One primitive per kind, in shape units (the unit of object scale)."""
    return [
        PrimitiveShape(ShapeKind.SPHERE, {"radius": 0.5}, name="sphere"),
        PrimitiveShape(ShapeKind.BOX, {"half_x": 0.5, "half_y": 0.3, "half_z": 0.25}, name="box"),
        PrimitiveShape(ShapeKind.CAPSULE, {"half_length": 0.35, "radius": 0.2}, name="capsule"),
        PrimitiveShape(
            ShapeKind.VEHICLE,
            {
                "body_x": 0.5, "body_y": 0.22, "body_z": 0.12,
                "cabin_x": 0.25, "cabin_y": 0.2, "cabin_z": 0.1, "cabin_offset_x": -0.08,
            },
            name="vehicle",
        ),
    ]


def shape_for_kind(kind: ShapeKind) -> PrimitiveShape:
    for shape in default_shapes():
        if shape.kind == kind:
            return shape
    raise ContractViolation(f"No default shape for kind {kind!r}")


def shape_half_extents(shape: PrimitiveShape) -> np.ndarray:
    p = shape.params
    if shape.kind == ShapeKind.SPHERE:
        return np.full(3, p["radius"])
    if shape.kind == ShapeKind.BOX:
        return np.array([p["half_x"], p["half_y"], p["half_z"]])
    if shape.kind == ShapeKind.CAPSULE:
        return np.array([p["half_length"] + p["radius"], p["radius"], p["radius"]])
    if shape.kind == ShapeKind.VEHICLE:
        if abs(p["cabin_offset_x"]) + p["cabin_x"] > p["body_x"] or p["cabin_y"] > p["body_y"]:
            raise ContractViolation(f"vehicle cabin must sit within the body footprint: {p!r}")
        return np.array([p["body_x"], p["body_y"], p["body_z"] + p["cabin_z"]])
    raise ContractViolation(f"Unknown shape kind {shape.kind!r}")


def _box_sdf(p: np.ndarray, half: np.ndarray) -> np.ndarray:
    q = np.abs(p) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.minimum(q.max(axis=1), 0.0)
    return outside + inside


def _vehicle_parts(params: Dict[str, float]) -> List[Tuple[np.ndarray, np.ndarray]]:
    """(center, half extents) of body and cabin around the tight-box center."""
    bz, cz = params["body_z"], params["cabin_z"]
    body = (np.array([0.0, 0.0, -cz]), np.array([params["body_x"], params["body_y"], bz]))
    cabin = (
        np.array([params["cabin_offset_x"], 0.0, bz]),
        np.array([params["cabin_x"], params["cabin_y"], cz]),
    )
    return [body, cabin]


def analytic_sdf(shape: PrimitiveShape, p: np.ndarray) -> np.ndarray:
    """
    Signed distance (shape units) at points given relative to the shape's
    tight-box center. Exact for sphere, box and capsule; the vehicle is the
    min over its two boxes, which has the exact sign and never overestimates
    the distance.
    """
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    params = shape.params
    if shape.kind == ShapeKind.SPHERE:
        return np.linalg.norm(p, axis=1) - params["radius"]
    if shape.kind == ShapeKind.BOX:
        return _box_sdf(p, shape_half_extents(shape))
    if shape.kind == ShapeKind.CAPSULE:
        hl = params["half_length"]
        on_axis = np.zeros_like(p)
        on_axis[:, 0] = np.clip(p[:, 0], -hl, hl)
        return np.linalg.norm(p - on_axis, axis=1) - params["radius"]
    if shape.kind == ShapeKind.VEHICLE:
        return np.min([_box_sdf(p - c, h) for c, h in _vehicle_parts(params)], axis=0)
    raise ContractViolation(f"Unknown shape kind {shape.kind!r}")


def canonical_side(shape: PrimitiveShape, margin: float = 0.05) -> float:
    """Edge of the unit cube in shape units; matches canonical_frame of the tight box."""
    return 2.0 * float(shape_half_extents(shape).max()) * (1.0 + 2.0 * margin)


def canonical_sdf(shape: PrimitiveShape, q: np.ndarray, margin: float = 0.05) -> np.ndarray:
    """SDF in unit-cube units at canonical points q in [0, 1]^3."""
    side = canonical_side(shape, margin)
    return analytic_sdf(shape, (np.asarray(q, dtype=np.float64) - 0.5) * side) / side


def _sample_box_surface(half: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    # faces come in +-pairs per axis; area of a face pair orthogonal to axis a
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
    axis = rng.choice(3, size=n, p=areas / areas.sum())
    pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
    sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    pts[np.arange(n), axis] = sign * half[axis]
    return pts


def _sample_surface_once(
    shape: PrimitiveShape, n: int, rng: np.random.Generator, remove_internal: bool = True
) -> np.ndarray:
    params = shape.params
    if shape.kind == ShapeKind.SPHERE:
        d = rng.normal(size=(n, 3))
        return d / np.linalg.norm(d, axis=1, keepdims=True) * params["radius"]
    if shape.kind == ShapeKind.BOX:
        return _sample_box_surface(shape_half_extents(shape), n, rng)
    if shape.kind == ShapeKind.CAPSULE:
        hl, r = params["half_length"], params["radius"]
        cyl_area, cap_area = 2 * np.pi * r * 2 * hl, 4 * np.pi * r * r
        on_cyl = rng.random(n) < cyl_area / (cyl_area + cap_area)
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        pts = d * r
        pts[:, 0] += np.where(d[:, 0] >= 0, hl, -hl)
        theta = rng.uniform(0, 2 * np.pi, size=n)
        cyl = np.stack([rng.uniform(-hl, hl, size=n), r * np.cos(theta), r * np.sin(theta)], axis=1)
        return np.where(on_cyl[:, None], cyl, pts)
    if shape.kind == ShapeKind.VEHICLE:
        parts = _vehicle_parts(params)
        areas = np.array([h[0] * h[1] + h[0] * h[2] + h[1] * h[2] for _, h in parts])
        counts = rng.multinomial(n, areas / areas.sum())
        kept = []
        for i, ((c, h), k) in enumerate(zip(parts, counts)):
            pts = _sample_box_surface(h, k, rng) + c
            if not remove_internal:
                kept.append(pts)
                continue
            oc, oh = parts[1 - i]
            # the contact patch and anything covered by the other part is interior
            kept.append(pts[_box_sdf(pts - oc, oh) > 1e-9])
        return np.concatenate(kept)
    raise ContractViolation(f"Unknown shape kind {shape.kind!r}")


def sample_shape_surface(
    shape: PrimitiveShape, n: int, rng: np.random.Generator, remove_internal: bool = True
) -> np.ndarray:
    """
    n points on the zero level set (shape units, tight-box centered).

    With remove_internal=False the vehicle keeps the faces hidden inside the
    union (contact patch and covered walls), like an unprocessed mesh.
    """
    if not remove_internal:
        return _sample_surface_once(shape, n, rng, remove_internal=False)[:n]
    out: List[np.ndarray] = []
    have = 0
    while have < n:
        cand = _sample_surface_once(shape, 2 * (n - have) + 8, rng)
        cand = cand[np.abs(analytic_sdf(shape, cand)) < 1e-9]
        out.append(cand)
        have += len(cand)
    return np.concatenate(out)[:n]


# ---------------------------------------------------------------------------
# 2. Scenes
# ---------------------------------------------------------------------------

def object_sdf(obj: SceneObject, points: np.ndarray) -> np.ndarray:
    """Scene-unit signed distance to an object's surface."""
    local = (np.asarray(points, dtype=np.float64).reshape(-1, 3) - obj.box.center) @ obj.box.rotation
    return obj.scale * analytic_sdf(obj.shape, local / obj.scale)


def lidar_rays(config: SceneConfig, origin: np.ndarray) -> np.ndarray:
    """(R, 3) unit directions, elevation-major, azimuth from +x counter-clockwise."""
    az = np.arange(config.n_azimuth) * (2.0 * np.pi / config.n_azimuth)
    el = np.deg2rad(np.linspace(*config.elevation_range_deg, config.n_elevation))
    e, a = np.meshgrid(el, az, indexing="ij")
    return np.stack(
        [np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], axis=-1
    ).reshape(-1, 3)


def _slab_interval(o: np.ndarray, d: np.ndarray, half: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Entry/exit parameters of rays o + t d against the box |x| <= half."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-half - o) * inv
        t2 = (half - o) * inv
    lo = np.where(np.isfinite(t1), np.minimum(t1, t2), -np.inf)
    hi = np.where(np.isfinite(t1), np.maximum(t1, t2), np.inf)
    # parallel rays: inside the slab for all t or for none
    parallel = d == 0
    outside = parallel & (np.abs(o) > half)
    lo = np.where(parallel, -np.inf, lo)
    hi = np.where(parallel, np.inf, hi)
    t_near = lo.max(axis=1)
    t_far = hi.min(axis=1)
    t_far = np.where(outside.any(axis=1), -np.inf, t_far)
    return np.maximum(t_near, 0.0), t_far


def trace_object(
    obj: SceneObject,
    origin: np.ndarray,
    directions: np.ndarray,
    max_steps: int = 96,
) -> np.ndarray:
    """First-hit distance along each ray (inf on a miss) by sphere tracing."""
    rot, scale = obj.box.rotation, obj.scale
    o_local = (origin - obj.box.center) @ rot / scale
    d_local = directions @ rot / scale  # t stays in scene units
    half = shape_half_extents(obj.shape) + 1e-6
    t_near, t_far = _slab_interval(np.broadcast_to(o_local, d_local.shape), d_local, half)

    hit = np.full(len(directions), np.inf)
    active = np.nonzero(t_near <= t_far)[0]
    t = t_near[active]
    for _ in range(max_steps):
        if not len(active):
            break
        dist = object_sdf(obj, origin + t[:, None] * directions[active])
        done = dist < HIT_TOLERANCE
        hit[active[done]] = t[done]
        t = t + np.maximum(dist, 0.0)
        keep = ~done & (t <= t_far[active])
        active, t = active[keep], t[keep]
    return hit


@dataclass
class SceneGeneratorAgent(LoggingAgent):
    """
    Deterministic synthetic LIDAR scenes.

    Objects stand on the ground plane at random yaw without touching in
    bird's-eye view; a spinning sensor casts rays and keeps the first hit
    per ray (objects or ground), with truncated Gaussian range noise.
    """

    config: SceneConfig = field(default_factory=SceneConfig)
    logs: List[str] = field(default_factory=list)

    @property
    def sensor_origin(self) -> np.ndarray:
        return np.array([0.0, 0.0, self.config.sensor_height])

    def _place_objects(self, rng: np.random.Generator) -> List[SceneObject]:
        cfg = self.config
        n_objects = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
        sensor_xy = Point(0.0, 0.0)
        placed: List[SceneObject] = []
        footprints = []
        for _ in range(n_objects):
            for _attempt in range(cfg.max_placement_retries):
                kind = ShapeKind(cfg.kinds[int(rng.integers(len(cfg.kinds)))])
                shape = shape_for_kind(kind)
                scale = float(rng.uniform(*cfg.scale_range))
                yaw = float(np.deg2rad(rng.uniform(-cfg.yaw_range_deg, cfg.yaw_range_deg)))
                xy = rng.uniform(-cfg.extent, cfg.extent, size=2)
                half = shape_half_extents(shape) * scale
                center = np.array([xy[0], xy[1], 0.0 + half[2]])
                box = Box3D.from_yaw(center, 2.0 * half + 2.0 * cfg.box_padding, yaw)
                footprint = bev_polygon(box)
                if footprint.distance(sensor_xy) < cfg.min_sensor_distance:
                    continue
                if any(footprint.distance(other) < cfg.object_gap for other in footprints):
                    continue
                placed.append(SceneObject(box=box, class_id=CLASS_OF_KIND[kind], shape=shape, scale=scale))
                footprints.append(footprint)
                break
            else:
                raise SceneGenerationError(
                    f"Could not place object {len(placed) + 1} of {n_objects} "
                    f"after {cfg.max_placement_retries} attempts"
                )
        return placed

    def generate(self, seed: int) -> SyntheticScene:
        cfg = self.config
        rng = np.random.default_rng(seed)
        objects = self._place_objects(rng)
        origin = self.sensor_origin
        dirs = lidar_rays(cfg, origin)

        # column 0 = ground, then one column per object
        ranges = np.full((len(dirs), len(objects) + 1), np.inf)
        if cfg.ground:
            with np.errstate(divide="ignore"):
                t_ground = (0.0 - origin[2]) / dirs[:, 2]
            ranges[:, 0] = np.where(dirs[:, 2] < 0, t_ground, np.inf)
        for j, obj in enumerate(objects):
            ranges[:, j + 1] = trace_object(obj, origin, dirs, cfg.max_trace_steps)

        first = np.argmin(ranges, axis=1)
        t = ranges[np.arange(len(dirs)), first]
        valid = np.isfinite(t) & (t <= cfg.max_range)
        ray_id = np.nonzero(valid)[0]
        t, source = t[valid], first[valid] - 1

        noise = np.clip(rng.normal(0.0, 1.0, size=len(t)), -RANGE_NOISE_CLIP, RANGE_NOISE_CLIP)
        positions = origin + (t + cfg.noise_sigma * noise)[:, None] * dirs[ray_id]

        # drop objects nobody saw and renumber the rest
        seen = np.zeros(len(objects), dtype=bool)
        seen[source[source >= 0]] = True
        remap = np.full(len(objects), -1, dtype=np.int64)
        remap[seen] = np.arange(int(seen.sum()))
        kept = [o for o, s in zip(objects, seen) if s]
        point_object = np.full(len(source), -1, dtype=np.int64)
        point_object[source >= 0] = remap[source[source >= 0]]
        if len(kept) < len(objects):
            self.log(f"seed {seed}: dropped {len(objects) - len(kept)} unobserved object(s)")

        self.log(f"seed {seed}: {len(positions)} points, {len(kept)} objects")
        return SyntheticScene(
            cloud=PointCloud(positions),
            objects=kept,
            sensor_origin=origin,
            seed=seed,
            ground_z=0.0,
            point_object=point_object,
            point_ray=ray_id,
        )


# ---------------------------------------------------------------------------
# 3. Augmentation
# ---------------------------------------------------------------------------

def transform_scene(scene: SyntheticScene, yaw: float, scale: float) -> SyntheticScene:
    """Rotate about the z axis through the origin, then scale uniformly."""
    rz = yaw_rotation(yaw)
    positions = scale * scene.cloud.positions @ rz.T
    objects = [
        replace(
            o,
            box=Box3D(scale * (rz @ o.box.center), scale * o.box.size, rz @ o.box.rotation),
            scale=o.scale * scale,
        )
        for o in scene.objects
    ]
    return replace(
        scene,
        cloud=PointCloud(positions, scene.cloud.features.copy()),
        objects=objects,
        sensor_origin=scale * (rz @ scene.sensor_origin),
        ground_z=scene.ground_z * scale,
    )


def augment_scene(
    scene: SyntheticScene,
    rotation_range_deg: float = 10.0,
    scale_range: Tuple[float, float] = (0.9, 1.1),
    seed: int = 0,
) -> SyntheticScene:
    rng = np.random.default_rng(seed)
    yaw = float(np.deg2rad(rng.uniform(-rotation_range_deg, rotation_range_deg)))
    scale = float(rng.uniform(*scale_range))
    return transform_scene(scene, yaw, scale)


def transform_boxes(boxes: Sequence[LabeledBox], yaw: float, scale: float) -> List[LabeledBox]:
    rz = yaw_rotation(yaw)
    return [
        LabeledBox(Box3D(scale * (rz @ b.box.center), scale * b.box.size, rz @ b.box.rotation), b.class_id)
        for b in boxes
    ]


def augment_record(
    record: "SceneRecord",
    rotation_range_deg: float = 10.0,
    scale_range: Tuple[float, float] = (0.9, 1.1),
    seed: int = 0,
) -> "SceneRecord":
    """Random z-rotation and uniform scale of a scene loaded from disk (cloud + gt boxes)."""
    rng = np.random.default_rng(seed)
    yaw = float(np.deg2rad(rng.uniform(-rotation_range_deg, rotation_range_deg)))
    scale = float(rng.uniform(*scale_range))
    positions = scale * record.cloud.positions @ yaw_rotation(yaw).T
    return SceneRecord(
        name=record.name,
        cloud=PointCloud(positions, record.cloud.features.copy()),
        gt=transform_boxes(record.gt, yaw, scale),
    )


# ---------------------------------------------------------------------------
# 4. Dataset files
# ---------------------------------------------------------------------------

def config_hash(config: SceneConfig) -> str:
    text = json.dumps(config.model_dump(mode="json"), sort_keys=True)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def scene_stem(seed: int) -> str:
    return f"scene_{seed:04d}"


@dataclass
class SceneRecord:
    name: str
    cloud: PointCloud
    gt: List[LabeledBox]


@dataclass
class DatasetWriterAgent(LoggingAgent):
    config: SceneConfig = field(default_factory=SceneConfig)
    logs: List[str] = field(default_factory=list)

    def write(self, out_dir: Path, seeds: Sequence[int]) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        generator = SceneGeneratorAgent(config=self.config)
        scenes = parallel_map(generator.generate, list(seeds))

        rows = []
        digest = config_hash(self.config)
        for scene in scenes:
            stem = scene_stem(scene.seed)
            write_cloud_bin(out_dir / f"{stem}.bin", scene.cloud)
            write_boxes(out_dir / f"{stem}.txt", scene.gt_boxes)
            rows.append(
                {
                    "scene": stem,
                    "seed": scene.seed,
                    "num_points": len(scene.cloud),
                    "num_objects": len(scene.objects),
                    "config_hash": digest,
                }
            )
        manifest = out_dir / "manifest.csv"
        pd.DataFrame(rows, columns=["scene", "seed", "num_points", "num_objects", "config_hash"]).to_csv(
            manifest, index=False
        )
        self.log(f"Wrote {len(scenes)} scenes to {out_dir}")
        return manifest


def load_dataset(data_dir: Path) -> List[SceneRecord]:
    """Scenes listed in manifest.csv, or every scene_*.bin when there is none."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise DataFormatError(f"Dataset directory not found: {data_dir}")
    manifest = data_dir / "manifest.csv"
    if manifest.exists():
        stems = pd.read_csv(manifest)["scene"].astype(str).tolist()
    else:
        stems = sorted(p.stem for p in data_dir.glob("scene_*.bin"))
    records = []
    for stem in stems:
        cloud = read_cloud_bin(data_dir / f"{stem}.bin")
        gt_path = data_dir / f"{stem}.txt"
        gt = read_gt_boxes(gt_path) if gt_path.exists() else []
        records.append(SceneRecord(name=stem, cloud=cloud, gt=gt))
    return records


def write_shapes(out_dir: Path, shapes: Sequence[PrimitiveShape]) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "shapes.csv"
    df = pd.DataFrame(
        [{"name": s.name, "kind": s.kind.value, "params": json.dumps(s.params, sort_keys=True)} for s in shapes],
        columns=["name", "kind", "params"],
    )
    df.to_csv(path, index=False)
    return path


def read_shapes(shapes_dir: Path) -> List[PrimitiveShape]:
    path = Path(shapes_dir) / "shapes.csv"
    if not path.exists():
        raise DataFormatError(f"Shape list not found: {path}")
    df = pd.read_csv(path)
    missing = {"name", "kind", "params"} - set(df.columns)
    if missing:
        raise DataFormatError(f"{path}: missing columns {sorted(missing)!r}")
    shapes = []
    for _, row in df.iterrows():
        try:
            shape = PrimitiveShape(ShapeKind(row["kind"]), json.loads(row["params"]), name=str(row["name"]))
            shape_half_extents(shape)
        except (ValueError, KeyError) as exc:
            raise DataFormatError(f"{path}: bad shape row {row['name']!r}: {exc}") from exc
        shapes.append(shape)
    return shapes
