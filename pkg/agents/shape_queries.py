"""
Turning observed LIDAR points of one object into decoder supervision:
ground removal, symmetry completion, canonicalization and ray queries.
"""
from __future__ import annotations

from typing import Optional, Tuple

import numpy as np

from core.errors import ContractViolation, ShapeObservationError
from core.geometry import canonical_frame
from core.models import Box3D, CanonicalFrame, SdfQueries, SymmetryPlane


CUBE_CENTER = np.array([0.5, 0.5, 0.5])
MIN_RAY_LENGTH = 1e-12


def mirror_points(canonical: np.ndarray, plane: SymmetryPlane) -> np.ndarray:
    """Reflect canonical points across the object's plane of symmetry."""
    out = np.array(canonical, dtype=np.float64, copy=True).reshape(-1, 3)
    axis = 1 if SymmetryPlane(plane) is SymmetryPlane.LONGITUDINAL else 0
    out[:, axis] = 1.0 - out[:, axis]
    return out


def preprocess_observed(
    points: np.ndarray,
    box: Box3D,
    ground_z: float = 0.0,
    symmetry: Optional[SymmetryPlane] = None,
    margin: float = 0.05,
    ground_fraction: float = 0.05,
) -> Tuple[np.ndarray, CanonicalFrame]:
    """
    Canonical points of one observed object.

    Points less than ``ground_fraction * box height`` above the ground are
    dropped; the rest go to the box's unit-cube frame and, with a symmetry
    plane, are joined by their mirror images.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    keep = points[:, 2] - ground_z >= ground_fraction * box.size[2]
    if not keep.any():
        raise ShapeObservationError(
            f"no points left after ground removal ({len(points)} observed)"
        )
    frame = canonical_frame(box, margin)
    canonical = frame.to_canonical(points[keep])
    if symmetry is not None:
        canonical = np.concatenate([canonical, mirror_points(canonical, symmetry)])
    return canonical, frame


def ray_augment(
    canonical: np.ndarray,
    delta: float = 0.1,
    include_surface: bool = False,
    include_rays: bool = True,
) -> SdfQueries:
    """
    Sign queries along the ray from the cube center through each point.

    For a point p at distance r from the center with unit direction u the
    inside query is p - min(delta, r) u (label -1) and the outside query is
    p + delta u clipped to the cube (label +1). Points on the center are
    skipped. ``include_surface`` adds p itself with target 0.
    """
    q = np.asarray(canonical, dtype=np.float64).reshape(-1, 3)
    if include_rays and delta <= 0:
        raise ContractViolation(f"delta must be > 0, got {delta!r}")
    offset = q - CUBE_CENTER
    r = np.linalg.norm(offset, axis=1)
    valid = r >= MIN_RAY_LENGTH
    q, offset, r = q[valid], offset[valid], r[valid]

    parts = []
    if include_rays and len(q):
        u = offset / r[:, None]
        inside = q - np.minimum(delta, r)[:, None] * u
        outside = np.clip(q + delta * u, 0.0, 1.0)
        parts.append(SdfQueries(inside, -np.ones(len(q))))
        parts.append(SdfQueries(outside, np.ones(len(q))))
    if include_surface and len(q):
        parts.append(SdfQueries(q.copy(), np.zeros(len(q))))
    return SdfQueries.concat(parts)
