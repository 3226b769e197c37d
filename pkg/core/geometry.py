"""
Oriented-box geometry: rotation parametrization, corners, the corner loss
kernel, IoU variants and the canonical object frame.

Batched functions take leading ``N`` axes; the scalar helpers work on a
single ``Box3D``. Every function is pure.
"""
from __future__ import annotations

import math
from functools import partial
from typing import Callable, List, Tuple

import numpy as np
from shapely.geometry import Polygon

from core.errors import ContractViolation
from core.models import Box3D, CanonicalFrame, PointCloud, RotationMode


PAIR_EPS = 1e-12
INSIDE_TOL = 1e-9

# Corner j: bit0 -> +-length/2, bit1 -> +-width/2, bit2 -> +-height/2 (bit set = +).
CORNER_SIGNS = np.array(
    [[1.0 if j & 1 else -1.0, 1.0 if j & 2 else -1.0, 1.0 if j & 4 else -1.0] for j in range(8)]
)
# Bottom face (bit2 clear) walked counter-clockwise in the box frame.
BEV_CORNER_ORDER = (0, 1, 3, 2)


# ---------------------------------------------------------------------------
# Rotation
# ---------------------------------------------------------------------------

def _normalize_pairs(params: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(N, 6) -> unit pairs (N, 3, 2), norms (N, 3), degenerate mask (N, 3)."""
    pairs = params.reshape(-1, 3, 2)
    norms = np.sqrt(np.sum(pairs ** 2, axis=-1))
    degenerate = norms < PAIR_EPS
    safe = np.where(degenerate, 1.0, norms)
    unit = pairs / safe[..., None]
    unit = np.where(degenerate[..., None], np.array([1.0, 0.0]), unit)
    return unit, norms, degenerate


def _axis_matrices(unit: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = unit.shape[0]
    cx, sx = unit[:, 0, 0], unit[:, 0, 1]
    cy, sy = unit[:, 1, 0], unit[:, 1, 1]
    cz, sz = unit[:, 2, 0], unit[:, 2, 1]
    one, zero = np.ones(n), np.zeros(n)

    rx = np.stack([one, zero, zero, zero, cx, -sx, zero, sx, cx], axis=-1).reshape(n, 3, 3)
    ry = np.stack([cy, zero, sy, zero, one, zero, -sy, zero, cy], axis=-1).reshape(n, 3, 3)
    rz = np.stack([cz, -sz, zero, sz, cz, zero, zero, zero, one], axis=-1).reshape(n, 3, 3)
    return rx, ry, rz


def rotations_from_params(params: np.ndarray) -> np.ndarray:
    """
    (N, 6) unnormalized (cos_x, sin_x, cos_y, sin_y, cos_z, sin_z) -> (N, 3, 3).

    Each pair is normalized to unit length (a pair with norm < 1e-12 becomes
    the zero angle) and R = Rx @ Ry @ Rz.
    """
    params = np.asarray(params, dtype=np.float64).reshape(-1, 6)
    unit, _, _ = _normalize_pairs(params)
    rx, ry, rz = _axis_matrices(unit)
    return rx @ ry @ rz


def rotation_from_params(params) -> np.ndarray:
    return rotations_from_params(np.asarray(params, dtype=np.float64).reshape(1, 6))[0]


def rotations_backward(params: np.ndarray, d_rot: np.ndarray) -> np.ndarray:
    """Gradient of a loss w.r.t. the 6 raw params given dL/dR (N, 3, 3)."""
    params = np.asarray(params, dtype=np.float64).reshape(-1, 6)
    unit, norms, degenerate = _normalize_pairs(params)
    rx, ry, rz = _axis_matrices(unit)

    g_rx = d_rot @ np.transpose(ry @ rz, (0, 2, 1))
    g_ry = np.transpose(rx, (0, 2, 1)) @ d_rot @ np.transpose(rz, (0, 2, 1))
    g_rz = np.transpose(rx @ ry, (0, 2, 1)) @ d_rot

    g_unit = np.zeros_like(unit)
    g_unit[:, 0, 0] = g_rx[:, 1, 1] + g_rx[:, 2, 2]
    g_unit[:, 0, 1] = -g_rx[:, 1, 2] + g_rx[:, 2, 1]
    g_unit[:, 1, 0] = g_ry[:, 0, 0] + g_ry[:, 2, 2]
    g_unit[:, 1, 1] = g_ry[:, 0, 2] - g_ry[:, 2, 0]
    g_unit[:, 2, 0] = g_rz[:, 0, 0] + g_rz[:, 1, 1]
    g_unit[:, 2, 1] = -g_rz[:, 0, 1] + g_rz[:, 1, 0]

    # through (c, s) / sqrt(c^2 + s^2)
    pairs = params.reshape(-1, 3, 2)
    c, s = pairs[..., 0], pairs[..., 1]
    n3 = np.where(degenerate, 1.0, norms) ** 3
    gc, gs = g_unit[..., 0], g_unit[..., 1]
    d_c = (s * s * gc - c * s * gs) / n3
    d_s = (-c * s * gc + c * c * gs) / n3
    d_pairs = np.stack([d_c, d_s], axis=-1)
    d_pairs = np.where(degenerate[..., None], 0.0, d_pairs)
    return d_pairs.reshape(-1, 6)


def yaw_rotation(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rot6_from_rotation_yaw(yaw: np.ndarray) -> np.ndarray:
    yaw = np.asarray(yaw, dtype=np.float64).reshape(-1)
    out = np.zeros((len(yaw), 6))
    out[:, 0] = 1.0
    out[:, 2] = 1.0
    out[:, 4] = np.cos(yaw)
    out[:, 5] = np.sin(yaw)
    return out


# ---------------------------------------------------------------------------
# Corners and the corner loss
# ---------------------------------------------------------------------------

def corners_batch(center: np.ndarray, size: np.ndarray, rotation: np.ndarray) -> np.ndarray:
    """(N,3), (N,3), (N,3,3) -> (N, 8, 3) in the documented corner order."""
    local = CORNER_SIGNS[None, :, :] * (np.asarray(size).reshape(-1, 1, 3) / 2.0)
    return np.asarray(center).reshape(-1, 1, 3) + np.einsum("nij,nkj->nki", rotation, local)


def corners_backward(
    size: np.ndarray, rotation: np.ndarray, d_corners: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (center, size, rotation) given dL/dcorners (N, 8, 3)."""
    local = CORNER_SIGNS[None, :, :] * (np.asarray(size).reshape(-1, 1, 3) / 2.0)
    d_center = d_corners.sum(axis=1)
    d_rot = np.einsum("nki,nkj->nij", d_corners, local)
    d_local = np.einsum("nij,nki->nkj", rotation, d_corners)
    d_size = np.sum(d_local * CORNER_SIGNS[None, :, :], axis=1) / 2.0
    return d_center, d_size, d_rot


def box_corners(box: Box3D) -> np.ndarray:
    return corners_batch(box.center[None], box.size[None], box.rotation[None])[0]


def huber(d: np.ndarray, delta: float = 1.0) -> np.ndarray:
    return np.where(d <= delta, 0.5 * d * d, delta * (d - 0.5 * delta))


def corner_huber_loss(
    pred: np.ndarray,
    gt: np.ndarray,
    mask: np.ndarray,
    delta: float = 1.0,
) -> Tuple[float, np.ndarray]:
    """
    Mean Huber distance between index-matched corners of masked points.

    pred, gt: (N, 8, 3); mask: (N,) binary. Returns the loss and dL/dpred.
    An all-zero mask yields 0 with a zero gradient.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64).reshape(-1)
    if pred.shape != gt.shape or len(mask) != len(pred):
        raise ContractViolation(
            f"corner_huber_loss shapes disagree: pred {pred.shape}, gt {gt.shape}, mask {mask.shape}"
        )
    d_pred = np.zeros_like(pred)
    total = float(mask.sum())
    if total == 0.0:
        return 0.0, d_pred

    diff = pred - gt
    dist = np.sqrt(np.sum(diff * diff, axis=-1))  # (N, 8)
    norm = 1.0 / (8.0 * total)
    loss = float(norm * np.sum(mask[:, None] * huber(dist, delta)))

    # dH/dd * dd/dp; in the quadratic branch this is exactly diff
    scale = np.where(dist <= delta, 1.0, delta / np.where(dist > 0, dist, 1.0))
    d_pred = norm * mask[:, None, None] * scale[..., None] * diff
    return loss, d_pred


def corner_loss_from_params(
    center: np.ndarray,
    size: np.ndarray,
    rot6: np.ndarray,
    gt_corners: np.ndarray,
    mask: np.ndarray,
    delta: float = 1.0,
) -> Tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Corner loss chained back to (center, size, rot6)."""
    rot = rotations_from_params(rot6)
    pred = corners_batch(center, size, rot)
    loss, d_pred = corner_huber_loss(pred, gt_corners, mask, delta)
    d_center, d_size, d_rot = corners_backward(size, rot, d_pred)
    d_rot6 = rotations_backward(rot6, d_rot)
    return loss, d_center, d_size, d_rot6


# ---------------------------------------------------------------------------
# Membership and IoU
# ---------------------------------------------------------------------------

def points_in_box(points: np.ndarray, box: Box3D) -> np.ndarray:
    """Boundary-inclusive membership (tolerance 1e-9 on the half extents)."""
    local = (np.asarray(points, dtype=np.float64).reshape(-1, 3) - box.center) @ box.rotation
    return np.all(np.abs(local) <= box.size / 2.0 + INSIDE_TOL, axis=1)


def point_in_box(p, box: Box3D) -> bool:
    return bool(points_in_box(np.asarray(p).reshape(1, 3), box)[0])


def iou_axis_aligned(a: Box3D, b: Box3D) -> float:
    if not (a.is_axis_aligned() and b.is_axis_aligned()):
        raise ContractViolation("iou_axis_aligned needs identity rotations on both boxes")
    lo = np.maximum(a.center - a.size / 2, b.center - b.size / 2)
    hi = np.minimum(a.center + a.size / 2, b.center + b.size / 2)
    inter = float(np.prod(np.clip(hi - lo, 0.0, None)))
    union = a.volume + b.volume - inter
    return inter / union if union > 0 else 0.0


def bev_polygon(box: Box3D) -> Polygon:
    corners = box_corners(box)
    return Polygon([tuple(corners[j, :2]) for j in BEV_CORNER_ORDER])


def _yaw_iou(a: Box3D, b: Box3D) -> float:
    area = bev_polygon(a).intersection(bev_polygon(b)).area
    z_lo = max(a.center[2] - a.size[2] / 2, b.center[2] - b.size[2] / 2)
    z_hi = min(a.center[2] + a.size[2] / 2, b.center[2] + b.size[2] / 2)
    inter = float(area) * max(0.0, z_hi - z_lo)
    union = a.volume + b.volume - inter
    return min(1.0, max(0.0, inter / union)) if union > 0 else 0.0


def iou_oriented_flagged(a: Box3D, b: Box3D, n_samples: int = 1_000_000) -> Tuple[float, bool]:
    """IoU and whether it is exact (yaw-only boxes) or sampled."""
    if a.is_yaw_only() and b.is_yaw_only():
        return _yaw_iou(a, b), True
    return iou_sampled(a, b, n_samples), False


def iou_oriented(a: Box3D, b: Box3D, n_samples: int = 1_000_000) -> float:
    return iou_oriented_flagged(a, b, n_samples)[0]


def iou_sampled(a: Box3D, b: Box3D, n_samples: int = 1_000_000, seed: int = 0) -> float:
    """
    Jittered-stratified IoU estimate over the AABB of both boxes.

    The AABB is split into m^3 cells (m = ceil(n^(1/3))) with one uniformly
    jittered sample per cell from a fixed seed, so the estimate is
    deterministic. Only cells crossed by a box face contribute variance;
    the standard error is about sqrt(boundary cells) / (2 * cells in union).
    """
    if n_samples < 1:
        raise ContractViolation(f"n_samples must be >= 1, got {n_samples!r}")
    corners = np.concatenate([box_corners(a), box_corners(b)])
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    m = max(1, int(math.ceil(n_samples ** (1.0 / 3.0) - 1e-9)))
    rng = np.random.default_rng(seed)

    ticks = np.arange(m, dtype=np.float64)
    ix, iy, iz = np.meshgrid(ticks, ticks, ticks, indexing="ij")
    cells = np.stack([ix.ravel(), iy.ravel(), iz.ravel()], axis=1)
    samples = lo + (cells + rng.random(cells.shape)) / m * (hi - lo)

    in_a = points_in_box(samples, a)
    in_b = points_in_box(samples, b)
    union = int(np.count_nonzero(in_a | in_b))
    if union == 0:
        return 0.0
    return float(np.count_nonzero(in_a & in_b)) / union


def iou_function(mode: RotationMode, n_samples: int = 4096) -> Callable[[Box3D, Box3D], float]:
    """IoU used for labels, NMS and evaluation under a rotation mode."""
    mode = RotationMode(mode)
    if mode is RotationMode.AXIS_ALIGNED:
        return iou_axis_aligned
    if mode is RotationMode.YAW:
        return partial(iou_oriented, n_samples=n_samples)
    return partial(iou_sampled, n_samples=n_samples)


def boxes_from_params(center: np.ndarray, size: np.ndarray, rot6: np.ndarray) -> List[Box3D]:
    rot = rotations_from_params(rot6)
    return [Box3D(center[i], size[i], rot[i]) for i in range(len(center))]


# ---------------------------------------------------------------------------
# Canonical frame
# ---------------------------------------------------------------------------

def canonical_frame(box: Box3D, margin: float = 0.05) -> CanonicalFrame:
    if not 0.0 <= margin < 0.5:
        raise ContractViolation(f"margin must be in [0, 0.5), got {margin!r}")
    scale = float(np.max(box.size)) * (1.0 + 2.0 * margin)
    return CanonicalFrame(center=box.center.copy(), rotation=box.rotation.copy(), scale=scale)


def canonicalize_points(
    points: PointCloud, box: Box3D, margin: float = 0.05
) -> Tuple[PointCloud, CanonicalFrame]:
    frame = canonical_frame(box, margin)
    return PointCloud(frame.to_canonical(points.positions), points.features.copy()), frame
