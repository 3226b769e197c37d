"""
SDF shape prior: sparse-conv point encoder, conditional decoder and the
sign-regression loss that ties them together.
"""
from __future__ import annotations

from typing import List, Optional, Sequence, Tuple

import numpy as np

from agents.backbone import SparseConvBlock, voxelize_points
from agents.synthdata import canonical_sdf, canonical_side, sample_shape_surface
from core.config import DecoderConfig, EncoderConfig
from core.errors import ContractViolation, EmptyInputError, ShapeMismatchError
from core.mesh import SdfField
from core.models import NeighborTable, PoolAssignment, PoolMode, PrimitiveShape, SdfQueries
from core.nn import ConditionalBatchNorm, Linear, Module, ReLU, Tanh
from core.sparse import precompute_neighbors, sparse_pool, sparse_pool_backward


# ---------------------------------------------------------------------------
# 1. Encoder
# ---------------------------------------------------------------------------

def _group_mean(x: np.ndarray, group: np.ndarray, n_groups: int) -> Tuple[np.ndarray, np.ndarray]:
    counts = np.bincount(group, minlength=n_groups).astype(np.float64)
    sums = np.zeros((n_groups, x.shape[1]), dtype=x.dtype)
    np.add.at(sums, group, x)
    return sums / counts[:, None], counts


class ShapeEncoder(Module):
    """
    Canonical object points -> one embedding per object.

    Every object is voxelized on a ``grid_resolution``^3 grid over the unit
    cube. Objects of a batch are laid side by side along x with a one-cube
    gap, so no convolution window or pooling cell spans two objects. Each
    stage runs its convolutions and pools with stride 2; the result is
    averaged per object, with the projection to D applied per voxel before
    the average or after it depending on ``fc_before_pool``.
    """

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        if not config.channels:
            raise ContractViolation("encoder needs at least one stage")
        self.config = config
        self.stages: List[List[SparseConvBlock]] = []
        self.blocks = []
        c_in = config.in_channels
        for stage in config.channels:
            convs = []
            for c in stage:
                convs.append(SparseConvBlock(c_in, c, rng, convs=1, use_batchnorm=config.use_batchnorm))
                c_in = c
            self.stages.append(convs)
            self.blocks.extend(convs)
        self.fc = Linear(c_in, config.embedding_dim, rng)

    @property
    def embedding_dim(self) -> int:
        return self.config.embedding_dim

    def children(self):
        for i, block in enumerate(self.blocks):
            yield f"blocks.{i}", block
        yield "fc", self.fc

    def _batch_tensor(self, clouds: Sequence[np.ndarray]):
        grid = self.config.grid_resolution
        positions, owner = [], []
        for b, pts in enumerate(clouds):
            pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
            if len(pts) == 0:
                raise EmptyInputError(f"encoder input {b} has no points")
            q = np.clip(pts, 0.0, np.nextafter(1.0, 0.0))
            q[:, 0] += 2.0 * b
            positions.append(q)
            owner.append(np.full(len(q), b))
        t, _ = voxelize_points(np.concatenate(positions), 1.0 / grid, origin=np.zeros(3))
        voxel_owner = np.floor_divide(t.coords[:, 0], 2 * grid)
        return t, voxel_owner

    def forward(self, clouds: Sequence[np.ndarray]) -> np.ndarray:
        """(B, D) embeddings for B point sets in canonical coordinates."""
        if len(clouds) == 0:
            raise EmptyInputError("encoder needs at least one point set")
        t, owner = self._batch_tensor(clouds)
        mode = PoolMode(self.config.pool_mode)
        self._trace: List[Tuple[NeighborTable, PoolAssignment]] = []
        for convs in self.stages:
            nbrs = precompute_neighbors(t)
            for block in convs:
                t = block.forward(t, nbrs)
            t, assignment = sparse_pool(t, mode)
            coarse_owner = np.zeros(t.num_voxels, dtype=np.int64)
            coarse_owner[assignment.parent] = owner
            owner = coarse_owner
            self._trace.append((nbrs, assignment))

        n = len(clouds)
        self._owner, self._n = owner, n
        if self.config.fc_before_pool:
            per_voxel = self.fc.forward(t.features)
            emb, self._counts = _group_mean(per_voxel, owner, n)
        else:
            pooled, self._counts = _group_mean(t.features, owner, n)
            emb = self.fc.forward(pooled)
        return emb

    def backward(self, d_emb: np.ndarray) -> None:
        """Accumulates parameter gradients; the input is not differentiable."""
        if d_emb.shape != (self._n, self.embedding_dim):
            raise ShapeMismatchError(f"expected ({self._n}, {self.embedding_dim}) gradient, got {d_emb.shape}")
        owner, counts = self._owner, self._counts
        if self.config.fc_before_pool:
            grad = self.fc.backward(d_emb[owner] / counts[owner][:, None])
        else:
            d_pooled = self.fc.backward(d_emb)
            grad = d_pooled[owner] / counts[owner][:, None]
        for convs, (_, assignment) in zip(reversed(self.stages), reversed(self._trace)):
            grad = sparse_pool_backward(assignment, grad)
            for block in reversed(convs):
                grad = block.backward(grad)


# ---------------------------------------------------------------------------
# 2. Decoder
# ---------------------------------------------------------------------------

class ConditionalBlock(Module):
    """x + fc2(relu(cbn(fc1(x), e)))."""

    def __init__(self, hidden: int, embedding_dim: int, rng: np.random.Generator):
        self.fc1 = Linear(hidden, hidden, rng)
        self.norm = ConditionalBatchNorm(hidden, embedding_dim, rng)
        self.relu = ReLU()
        self.fc2 = Linear(hidden, hidden, rng, weight_scale=0.5)

    def forward(self, x: np.ndarray, e: np.ndarray) -> np.ndarray:
        h = self.fc2.forward(self.relu.forward(self.norm.forward(self.fc1.forward(x), e)))
        return x + h

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        d_norm, de = self.norm.backward(self.relu.backward(self.fc2.backward(grad)))
        return grad + self.fc1.backward(d_norm), de


class ShapeDecoder(Module):
    """
    f(q | e) in (-1, 1): an input projection, ``conditional_blocks``
    residual blocks modulated by e, then cbn -> relu -> fc -> tanh.
    """

    def __init__(self, config: DecoderConfig, rng: np.random.Generator):
        self.config = config
        h, d = config.hidden, config.embedding_dim
        self.fc_in = Linear(3, h, rng)
        self.blocks = [ConditionalBlock(h, d, rng) for _ in range(config.conditional_blocks)]
        self.norm_out = ConditionalBatchNorm(h, d, rng)
        self.relu_out = ReLU()
        self.fc_out = Linear(h, 1, rng)
        self.tanh = Tanh()

    @property
    def embedding_dim(self) -> int:
        return self.config.embedding_dim

    def forward(self, queries: np.ndarray, e_rows: np.ndarray) -> np.ndarray:
        queries = np.asarray(queries).reshape(-1, 3)
        if e_rows.shape != (len(queries), self.embedding_dim):
            raise ShapeMismatchError(
                f"decoder needs one {self.embedding_dim}-dim embedding per query, got {e_rows.shape}"
            )
        x = self.fc_in.forward(queries)
        for block in self.blocks:
            x = block.forward(x, e_rows)
        x = self.relu_out.forward(self.norm_out.forward(x, e_rows))
        return self.tanh.forward(self.fc_out.forward(x))[:, 0]

    def backward(self, d_out: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Returns (d_queries, d_embedding_rows)."""
        grad = self.fc_out.backward(self.tanh.backward(d_out.reshape(-1, 1)))
        grad, de = self.norm_out.backward(self.relu_out.backward(grad))
        for block in reversed(self.blocks):
            grad, de_block = block.backward(grad)
            de = de + de_block
        return self.fc_in.backward(grad), de


def decoder_field(decoder: ShapeDecoder, embedding: np.ndarray) -> SdfField:
    """The decoder as a field over canonical points for one embedding."""
    if decoder.training:
        raise ContractViolation("decoder_field needs the decoder in eval mode")
    e = np.asarray(embedding, dtype=np.float64).reshape(1, -1)

    def field(points: np.ndarray) -> np.ndarray:
        return decoder.forward(points, np.repeat(e, len(points), axis=0))

    return field


# ---------------------------------------------------------------------------
# 3. Loss and embedding pooling
# ---------------------------------------------------------------------------

def prior_loss(predicted: np.ndarray, targets: np.ndarray) -> Tuple[float, np.ndarray]:
    """mean (f - sign(t))^2 and its gradient w.r.t. f."""
    predicted = np.asarray(predicted, dtype=np.float64).reshape(-1)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    if predicted.shape != targets.shape:
        raise ShapeMismatchError(f"{len(predicted)} predictions for {len(targets)} targets")
    if len(predicted) == 0:
        return 0.0, np.zeros(0)
    diff = predicted - np.sign(targets)
    return float(np.mean(diff ** 2)), 2.0 * diff / len(diff)


def pool_embeddings(embeddings: np.ndarray, members: Sequence[np.ndarray]) -> np.ndarray:
    """Mean embedding of each object's member points."""
    out = np.zeros((len(members), embeddings.shape[1]), dtype=embeddings.dtype)
    for j, idx in enumerate(members):
        if len(idx) == 0:
            raise EmptyInputError(f"object {j} has no member points")
        out[j] = embeddings[idx].mean(axis=0)
    return out


def pool_embeddings_backward(
    d_pooled: np.ndarray, members: Sequence[np.ndarray], num_points: int
) -> np.ndarray:
    grad = np.zeros((num_points, d_pooled.shape[1]), dtype=d_pooled.dtype)
    for j, idx in enumerate(members):
        np.add.at(grad, idx, d_pooled[j] / len(idx))
    return grad


# ---------------------------------------------------------------------------
# 4. Training samples from analytic shapes
# ---------------------------------------------------------------------------

def to_canonical_shape_points(shape: PrimitiveShape, points: np.ndarray, margin: float = 0.05) -> np.ndarray:
    """Shape-unit points (tight-box centered) -> unit cube."""
    return np.asarray(points, dtype=np.float64) / canonical_side(shape, margin) + 0.5


def sample_prior_queries(
    shape: PrimitiveShape,
    n_near: int,
    n_uniform: int,
    near_sigma: float,
    rng: np.random.Generator,
    margin: float = 0.05,
) -> SdfQueries:
    """
    Jittered surface samples plus uniform samples in the unit cube, labelled
    with the sign of the analytic SDF (zero counts as outside).
    """
    surface = to_canonical_shape_points(shape, sample_shape_surface(shape, n_near, rng), margin)
    near = np.clip(surface + rng.normal(0.0, near_sigma, size=surface.shape), 0.0, 1.0)
    uniform = rng.random((n_uniform, 3))
    positions = np.concatenate([near, uniform])
    sdf = canonical_sdf(shape, positions, margin)
    return SdfQueries(positions, np.where(sdf < 0.0, -1.0, 1.0))


def crop_by_plane(
    points: np.ndarray, rng: np.random.Generator, min_fraction: float = 0.5
) -> np.ndarray:
    """Keep the points on one side of a random plane, at least ``min_fraction`` of them."""
    normal = rng.normal(size=3)
    normal /= np.linalg.norm(normal)
    keep_fraction = rng.uniform(min_fraction, 1.0)
    proj = points @ normal
    cut = np.quantile(proj, keep_fraction)
    kept = points[proj <= cut]
    return kept if len(kept) else points


def sample_encoder_input(
    shape: PrimitiveShape,
    n_points: int,
    rng: np.random.Generator,
    margin: float = 0.05,
    crop_probability: float = 0.0,
    min_crop_fraction: float = 0.5,
    remove_internal: bool = True,
) -> np.ndarray:
    """Canonical surface points fed to the encoder during prior training."""
    raw = sample_shape_surface(shape, n_points, rng, remove_internal=remove_internal)
    points = to_canonical_shape_points(shape, raw, margin)
    if crop_probability > 0.0 and rng.random() < crop_probability:
        points = crop_by_plane(points, rng, min_crop_fraction)
    return points


def embedding_rows(embeddings: np.ndarray, owner: np.ndarray) -> np.ndarray:
    """One embedding row per query given each query's object index."""
    return embeddings[np.asarray(owner, dtype=np.int64)]


def embedding_rows_backward(d_rows: np.ndarray, owner: np.ndarray, num_objects: int) -> np.ndarray:
    grad = np.zeros((num_objects, d_rows.shape[1]), dtype=d_rows.dtype)
    np.add.at(grad, owner, d_rows)
    return grad


def build_prior(
    encoder_config: EncoderConfig,
    decoder_config: DecoderConfig,
    seed: int = 0,
    with_encoder: bool = True,
) -> Tuple[Optional[ShapeEncoder], ShapeDecoder]:
    rng = np.random.default_rng(seed)
    encoder = ShapeEncoder(encoder_config, rng) if with_encoder else None
    return encoder, ShapeDecoder(decoder_config, rng)
