from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from core.config import BackboneConfig
from core.errors import ShapeMismatchError
from core.models import NeighborTable, PointCloud, PoolAssignment, PoolMode, SparseTensor
from core.nn import BatchNorm, Module, ReLU, SubmanifoldConv
from core.sparse import (
    default_origin,
    precompute_neighbors,
    sparse_pool,
    sparse_pool_backward,
    sparse_unpool,
    sparse_unpool_backward,
    voxel_keys,
    voxelize,
)


def point_voxel_features(positions: np.ndarray, voxel_size: float, origin: np.ndarray) -> np.ndarray:
    """[1, offset of the point inside its voxel in [0, 1)^3] per point."""
    scaled = (np.asarray(positions) - origin) / voxel_size
    frac = scaled - voxel_keys(positions, voxel_size, origin)
    return np.hstack([np.ones((len(scaled), 1)), frac])


def voxelize_points(
    positions: np.ndarray, voxel_size: float, origin: Optional[np.ndarray] = None
) -> Tuple[SparseTensor, np.ndarray]:
    """Voxelize a cloud with the 4-channel occupancy/offset input features."""
    origin = default_origin(positions) if origin is None else np.asarray(origin, dtype=np.float64)
    feats = point_voxel_features(positions, voxel_size, origin)
    return voxelize(PointCloud(positions, feats), voxel_size, origin=origin)


class SparseConvBlock(Module):
    """``convs`` submanifold convs, each followed by optional batchnorm and ReLU."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator,
                 convs: int = 2, use_batchnorm: bool = False):
        self.convs = [
            SubmanifoldConv(in_channels if i == 0 else out_channels, out_channels, rng)
            for i in range(convs)
        ]
        self.norms = [BatchNorm(out_channels) for _ in range(convs)] if use_batchnorm else []
        self.relus = [ReLU() for _ in range(convs)]

    @property
    def in_channels(self) -> int:
        return int(self.convs[0].weight.value.shape[1])

    def forward(self, t: SparseTensor, nbrs: NeighborTable) -> SparseTensor:
        for i, conv in enumerate(self.convs):
            t = conv.forward(t, nbrs)
            x = t.features
            if self.norms:
                x = self.norms[i].forward(x)
            t = t.with_features(self.relus[i].forward(x))
        return t

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for i in reversed(range(len(self.convs))):
            grad = self.relus[i].backward(grad)
            if self.norms:
                grad = self.norms[i].backward(grad)
            grad = self.convs[i].backward(grad)
        return grad


@dataclass
class _LevelState:
    nbrs: NeighborTable
    skip_channels: int = 0
    assignment: Optional[PoolAssignment] = None


class SparseUNet(Module):
    """
    Encoder/decoder over submanifold convolutions.

    Level i runs a conv block at stride 2**i and pools into level i+1; the
    bottleneck block runs at the coarsest level. The decoder unpools back
    level by level, concatenates the encoder features of that level (same
    row order, so skips match by coordinate identity) and runs another
    block. Each level's neighbor table is built once and used by both the
    encoder and decoder blocks of that level.
    """

    def __init__(self, config: BackboneConfig, rng: np.random.Generator):
        self.config = config
        chans = list(config.encoder_channels)
        conv_kw = dict(convs=config.convs_per_block, use_batchnorm=config.use_batchnorm)
        self.encoder = []
        c_in = config.in_channels
        for c in chans:
            self.encoder.append(SparseConvBlock(c_in, c, rng, **conv_kw))
            c_in = c
        self.bottleneck = SparseConvBlock(c_in, config.bottleneck_channels, rng, **conv_kw)
        self.decoder = []
        c_up = config.bottleneck_channels
        for c in reversed(chans):
            self.decoder.append(SparseConvBlock(c_up + c, c, rng, **conv_kw))
            c_up = c

    @property
    def out_channels(self) -> int:
        return self.config.out_channels

    def forward(self, t: SparseTensor) -> SparseTensor:
        if t.channels != self.config.in_channels:
            raise ShapeMismatchError(
                f"backbone expects {self.config.in_channels} input channels, got {t.channels}"
            )
        pool_mode = PoolMode(self.config.pool_mode)
        self._levels: List[_LevelState] = []
        skips: List[SparseTensor] = []
        for block in self.encoder:
            level = _LevelState(nbrs=precompute_neighbors(t))
            t = block.forward(t, level.nbrs)
            skips.append(t)
            level.skip_channels = t.channels
            t, level.assignment = sparse_pool(t, pool_mode)
            self._levels.append(level)

        self._bottom_nbrs = precompute_neighbors(t)
        t = self.bottleneck.forward(t, self._bottom_nbrs)

        for block, level, skip in zip(self.decoder, reversed(self._levels), reversed(skips)):
            up = sparse_unpool(t, level.assignment)
            t = block.forward(up.with_features(np.hstack([up.features, skip.features])), level.nbrs)
        return t

    def backward(self, grad: np.ndarray) -> np.ndarray:
        """Gradient w.r.t. the input voxel features."""
        # decoder ran coarse -> fine, so unwind fine -> coarse
        skip_grads: List[np.ndarray] = []
        for block, level in zip(reversed(self.decoder), self._levels):
            grad = block.backward(grad)
            c_up = grad.shape[1] - level.skip_channels
            skip_grads.append(grad[:, c_up:])
            grad = sparse_unpool_backward(level.assignment, grad[:, :c_up])

        grad = self.bottleneck.backward(grad)

        for block, level, skip_grad in zip(
            reversed(self.encoder), reversed(self._levels), reversed(skip_grads)
        ):
            grad = sparse_pool_backward(level.assignment, grad) + skip_grad
            grad = block.backward(grad)
        return grad
