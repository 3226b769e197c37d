"""
Sparse voxel operations over hash-indexed active sites.

All ops keep the coordinate sets explicit: submanifold convolution never
changes the active set, pooling halves keys with floor division, unpooling
restores the exact pre-pool set. Backward passes accumulate with
``np.add.at`` so reductions run in a fixed order.
"""
from __future__ import annotations

import itertools
from typing import Optional, Tuple

import numpy as np

from core.errors import ContractViolation, ShapeMismatchError
from core.hashmap import build_hashmap, group_keys
from core.models import NeighborTable, PointCloud, PoolAssignment, PoolMode, SparseTensor


# (dx, dy, dz) with dz varying fastest; index 13 is the center
KERNEL_OFFSETS = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.int64)
CENTER_OFFSET = 13


# ---------------------------------------------------------------------------
# Voxelization
# ---------------------------------------------------------------------------

def voxel_keys(
    positions: np.ndarray, voxel_size: float, origin: np.ndarray
) -> np.ndarray:
    return np.floor((np.asarray(positions) - origin) / voxel_size).astype(np.int64)


def default_origin(positions: np.ndarray) -> np.ndarray:
    """Floor of the cloud's min corner."""
    if len(positions) == 0:
        return np.zeros(3)
    return np.floor(np.asarray(positions).min(axis=0))


def voxelize(
    pc: PointCloud,
    voxel_size: float,
    origin: Optional[np.ndarray] = None,
) -> Tuple[SparseTensor, np.ndarray]:
    """
    Average-pool points into voxels through the hash multimap.

    Voxel rows follow the first appearance of their key in the cloud.
    Returns the tensor and the (N,) voxel row of every point.
    """
    if voxel_size <= 0:
        raise ContractViolation(f"voxel_size must be > 0, got {voxel_size!r}")
    origin = default_origin(pc.positions) if origin is None else np.asarray(origin, dtype=np.float64)
    if len(pc) == 0:
        empty = SparseTensor(
            np.zeros((0, 3), dtype=np.int64), np.zeros((0, pc.num_features)),
            origin=origin, voxel_size=voxel_size,
        )
        return empty, np.zeros(0, dtype=np.int64)

    groups = group_keys(voxel_keys(pc.positions, voxel_size, origin))
    sums = np.zeros((groups.num_groups, pc.num_features), dtype=pc.features.dtype)
    np.add.at(sums, groups.group, pc.features)
    features = sums / groups.counts[:, None]
    tensor = SparseTensor(groups.keys, features, stride=1, origin=origin, voxel_size=voxel_size)
    return tensor, groups.group


# ---------------------------------------------------------------------------
# Neighbors and submanifold convolution
# ---------------------------------------------------------------------------

def precompute_neighbors(t: SparseTensor) -> NeighborTable:
    """27-neighborhood row indices (-1 = inactive) for every active voxel."""
    table = build_hashmap(t.coords)
    m = t.num_voxels
    indices = np.full((m, len(KERNEL_OFFSETS)), -1, dtype=np.int64)
    if m:
        for k, off in enumerate(KERNEL_OFFSETS):
            indices[:, k] = table.lookup_many(t.coords + off)
    return NeighborTable(indices=indices, stride=t.stride)


def _check_conv(t: SparseTensor, weights: np.ndarray, nbrs: NeighborTable) -> None:
    if weights.ndim != 3 or weights.shape[0] != len(KERNEL_OFFSETS):
        raise ShapeMismatchError(f"weights must be (27, C_in, C_out), got {weights.shape!r}")
    if weights.shape[1] != t.channels:
        raise ShapeMismatchError(
            f"conv expects {weights.shape[1]} input channels, tensor has {t.channels}"
        )
    if len(nbrs.indices) != t.num_voxels or nbrs.stride != t.stride:
        raise ContractViolation("neighbor table was not built from this tensor")


def gather_neighbors(features: np.ndarray, nbrs: NeighborTable) -> np.ndarray:
    """(M, 27, C) neighbor features, zeros where a neighbor is inactive."""
    padded = np.vstack([features, np.zeros((1, features.shape[1]), dtype=features.dtype)])
    # -1 selects the appended zero row
    return padded[nbrs.indices]


def submanifold_conv(
    t: SparseTensor,
    weights: np.ndarray,
    bias: np.ndarray,
    nbrs: NeighborTable,
) -> SparseTensor:
    _check_conv(t, weights, nbrs)
    gathered = gather_neighbors(t.features, nbrs)
    out = np.einsum("mki,kio->mo", gathered, weights) + bias
    return t.with_features(out)


def submanifold_conv_backward(
    t: SparseTensor,
    weights: np.ndarray,
    nbrs: NeighborTable,
    grad_out: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (features, weights, bias) of a submanifold convolution."""
    gathered = gather_neighbors(t.features, nbrs)
    d_weights = np.einsum("mki,mo->kio", gathered, grad_out)
    d_bias = grad_out.sum(axis=0)
    d_gathered = np.einsum("mo,kio->mki", grad_out, weights)
    d_padded = np.zeros((t.num_voxels + 1, t.channels), dtype=grad_out.dtype)
    np.add.at(d_padded, nbrs.indices, d_gathered)
    return d_padded[:-1], d_weights, d_bias


# ---------------------------------------------------------------------------
# Pooling
# ---------------------------------------------------------------------------

def sparse_pool(
    t: SparseTensor,
    mode: PoolMode = PoolMode.MAX,
    stride_factor: int = 2,
) -> Tuple[SparseTensor, PoolAssignment]:
    """
    Merge voxels sharing ``floor(key / stride_factor)``.

    Max mode records, per pooled voxel and channel, the first fine row that
    attains the maximum; gradients route only to that row.
    """
    mode = PoolMode(mode)
    coarse_keys = np.floor_divide(t.coords, stride_factor)
    groups = group_keys(coarse_keys)
    n_groups, channels = groups.num_groups, t.channels

    argmax = None
    if mode is PoolMode.MAX:
        pooled = np.full((n_groups, channels), -np.inf, dtype=t.features.dtype)
        np.maximum.at(pooled, groups.group, t.features)
        rows = np.arange(t.num_voxels)[:, None]
        hits = t.features == pooled[groups.group]
        candidate = np.where(hits, rows, t.num_voxels)
        argmax = np.full((n_groups, channels), t.num_voxels, dtype=np.int64)
        np.minimum.at(argmax, groups.group, candidate)
    else:
        pooled = np.zeros((n_groups, channels), dtype=t.features.dtype)
        np.add.at(pooled, groups.group, t.features)
        pooled = pooled / groups.counts[:, None]

    out = SparseTensor(
        groups.keys, pooled, stride=t.stride * stride_factor,
        origin=t.origin, voxel_size=t.voxel_size,
    )
    assignment = PoolAssignment(
        parent=groups.group,
        counts=groups.counts,
        fine_coords=t.coords,
        coarse_coords=groups.keys,
        fine_stride=t.stride,
        mode=mode,
        argmax=argmax,
    )
    return out, assignment


def sparse_pool_backward(assignment: PoolAssignment, grad_out: np.ndarray) -> np.ndarray:
    m_fine = len(assignment.parent)
    if assignment.mode is PoolMode.AVERAGE:
        return grad_out[assignment.parent] / assignment.counts[assignment.parent][:, None]
    channels = grad_out.shape[1]
    grad_in = np.zeros((m_fine, channels), dtype=grad_out.dtype)
    cols = np.broadcast_to(np.arange(channels), assignment.argmax.shape)
    np.add.at(grad_in, (assignment.argmax, cols), grad_out)
    return grad_in


def _check_assignment(t: SparseTensor, assignment: PoolAssignment) -> None:
    if t.num_voxels != len(assignment.coarse_coords) or not np.array_equal(
        t.coords, assignment.coarse_coords
    ):
        raise ContractViolation("pool assignment does not match the tensor being unpooled")


def sparse_unpool(t: SparseTensor, assignment: PoolAssignment) -> SparseTensor:
    """Broadcast every pooled feature back onto its fine voxels."""
    _check_assignment(t, assignment)
    return SparseTensor(
        assignment.fine_coords, t.features[assignment.parent],
        stride=assignment.fine_stride, origin=t.origin, voxel_size=t.voxel_size,
    )


def sparse_unpool_backward(assignment: PoolAssignment, grad_fine: np.ndarray) -> np.ndarray:
    grad = np.zeros((len(assignment.counts), grad_fine.shape[1]), dtype=grad_fine.dtype)
    np.add.at(grad, assignment.parent, grad_fine)
    return grad


# ---------------------------------------------------------------------------
# Points
# ---------------------------------------------------------------------------

def voxel_to_point(t: SparseTensor, point_to_voxel: np.ndarray) -> np.ndarray:
    idx = np.asarray(point_to_voxel, dtype=np.int64)
    if len(idx) and (idx.min() < 0 or idx.max() >= t.num_voxels):
        raise ContractViolation(
            f"point_to_voxel references rows outside [0, {t.num_voxels})"
        )
    return t.features[idx]


def voxel_to_point_backward(
    num_voxels: int, point_to_voxel: np.ndarray, grad_points: np.ndarray
) -> np.ndarray:
    grad = np.zeros((num_voxels, grad_points.shape[1]), dtype=grad_points.dtype)
    np.add.at(grad, point_to_voxel, grad_points)
    return grad
