from __future__ import annotations

from pathlib import Path
from typing import Callable, Optional

import mcubes
import numpy as np
import trimesh
from scipy.spatial import cKDTree

from core.errors import ContractViolation
from core.logs import logger
from core.models import CanonicalFrame, Mesh
from core.runtime import parallel_map


SdfField = Callable[[np.ndarray], np.ndarray]

GRID_CHUNK = 65536


def grid_points(resolution: int) -> np.ndarray:
    """(res^3, 3) lattice over the unit cube, 'ij' order (x slowest)."""
    ticks = np.linspace(0.0, 1.0, resolution)
    gx, gy, gz = np.meshgrid(ticks, ticks, ticks, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


def evaluate_grid(field: SdfField, resolution: int) -> np.ndarray:
    points = grid_points(resolution)
    chunks = [points[i:i + GRID_CHUNK] for i in range(0, len(points), GRID_CHUNK)]
    values = parallel_map(lambda c: np.asarray(field(c), dtype=np.float64).reshape(-1), chunks)
    return np.concatenate(values).reshape(resolution, resolution, resolution)


def extract_mesh(
    field: SdfField,
    resolution: int = 100,
    frame: Optional[CanonicalFrame] = None,
) -> Mesh:
    """
    Zero level set of ``field`` sampled on a resolution^3 unit-cube grid.

    Vertices are in canonical coordinates; ``frame`` (if given) maps them
    back to the scene. A field with no sign change yields an empty mesh.
    """
    if resolution < 2:
        raise ContractViolation(f"resolution must be >= 2, got {resolution!r}")
    volume = evaluate_grid(field, resolution)
    if volume.min() > 0.0 or volume.max() < 0.0:
        logger.info("extract_mesh: field has no zero crossing at resolution %d", resolution)
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), frame)
    vertices, faces = mcubes.marching_cubes(volume, 0.0)
    vertices = np.asarray(vertices, dtype=np.float64) / (resolution - 1)
    return Mesh(vertices, np.asarray(faces, dtype=np.int64), frame)


def to_trimesh(mesh: Mesh, scene: bool = False) -> trimesh.Trimesh:
    vertices = mesh.scene_vertices() if scene else mesh.vertices
    return trimesh.Trimesh(vertices=vertices, faces=mesh.faces, process=False)


def mesh_area(mesh: Mesh) -> float:
    if mesh.is_empty:
        return 0.0
    return float(to_trimesh(mesh).area)


def sample_surface(mesh: Mesh, n: int, seed: int = 0) -> np.ndarray:
    """Area-weighted samples on the mesh (canonical frame)."""
    if mesh.is_empty:
        return np.zeros((0, 3))
    points, _ = trimesh.sample.sample_surface(to_trimesh(mesh), n, seed=seed)
    return np.asarray(points, dtype=np.float64)


def chamfer_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric mean nearest-neighbour distance: (mean_a d(a,B) + mean_b d(b,A)) / 2."""
    if len(a) == 0 or len(b) == 0:
        return float("inf")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


def export_obj(mesh: Mesh, path: Path, scene: bool = True) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    vertices = mesh.scene_vertices() if scene else mesh.vertices
    mcubes.export_obj(vertices, mesh.faces, str(path))
    return path


def export_ply(mesh: Mesh, path: Path, scene: bool = True) -> Path:
    """Binary little-endian PLY."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = to_trimesh(mesh, scene=scene).export(file_type="ply", encoding="binary")
    path.write_bytes(data)
    return path
