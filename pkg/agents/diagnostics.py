"""
Finite-difference checks of every differentiable piece, from single layers
up to the full detection loss on a tiny scene.

Each check builds a small random instance, projects the output on a fixed
random direction to get a scalar loss, and hands the analytic gradients to
``core.nn.gradcheck``. Discrete choices (vote graph, point labels) are
computed once at the unperturbed point and held fixed.
"""
from __future__ import annotations

from typing import Callable, Dict, Iterable, List, Optional

import numpy as np
import pandas as pd

from agents.backbone import SparseUNet, voxelize_points
from agents.consolidation import GraphConsolidation, build_vote_graph
from agents.detection_loss import detection_loss, dynamic_labels
from agents.detector import DopsDetector
from agents.heads import DetectionHeads
from agents.shape_prior import ShapeDecoder, ShapeEncoder, prior_loss
from core.config import (
    BackboneConfig,
    DecoderConfig,
    DetectionConfig,
    EncoderConfig,
    HeadsConfig,
    RunConfig,
)
from core.geometry import corner_loss_from_params, corners_batch, iou_function, rotations_from_params
from core.models import Box3D, LabeledBox, PerPointPrediction, PoolMode, RotationMode, SparseTensor
from core.nn import (
    BatchNorm,
    ConditionalBatchNorm,
    GradcheckReport,
    Linear,
    SubmanifoldConv,
    Tanh,
    gradcheck,
    softmax_cross_entropy,
)
from core.sparse import precompute_neighbors, sparse_pool, sparse_pool_backward


H = 1e-5
TOLERANCE = 1e-4


def _random_tensor(rng: np.random.Generator, n_voxels: int, channels: int, extent: int = 4) -> SparseTensor:
    coords = np.unique(rng.integers(0, extent, size=(n_voxels, 3)), axis=0)
    return SparseTensor(coords, rng.normal(size=(len(coords), channels)))


# ---------------------------------------------------------------------------
# 1. Layers
# ---------------------------------------------------------------------------

def check_linear(seed: int = 0) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    layer = Linear(5, 4, rng)
    x = rng.normal(size=(6, 5))
    proj = rng.normal(size=(6, 4))

    def fn():
        layer.zero_grad()
        loss = float(np.sum(layer.forward(x) * proj))
        dx = layer.backward(proj)
        return loss, {"x": dx, "weight": layer.weight.grad.copy(), "bias": layer.bias.grad.copy()}

    return gradcheck(fn, {"x": x, "weight": layer.weight.value, "bias": layer.bias.value},
                     h=H, tolerance=TOLERANCE, name="linear")


def check_tanh(seed: int = 0) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    layer = Tanh()
    x = rng.normal(size=(7, 3))
    proj = rng.normal(size=(7, 3))

    def fn():
        loss = float(np.sum(layer.forward(x) * proj))
        return loss, {"x": layer.backward(proj)}

    return gradcheck(fn, {"x": x}, h=H, tolerance=TOLERANCE, name="tanh")


def check_batchnorm(seed: int = 0) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    layer = BatchNorm(3)
    layer.gamma.value[...] = rng.uniform(0.5, 1.5, size=3)
    x = rng.normal(size=(8, 3))
    proj = rng.normal(size=(8, 3))

    def fn():
        layer.zero_grad()
        loss = float(np.sum(layer.forward(x) * proj))
        dx = layer.backward(proj)
        return loss, {"x": dx, "gamma": layer.gamma.grad.copy(), "beta": layer.beta.grad.copy()}

    return gradcheck(fn, {"x": x, "gamma": layer.gamma.value, "beta": layer.beta.value},
                     h=H, tolerance=TOLERANCE, name="batchnorm")


def check_conditional_batchnorm(seed: int = 0) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    layer = ConditionalBatchNorm(4, 3, rng)
    x = rng.normal(size=(9, 4))
    e = rng.normal(size=(9, 3))
    proj = rng.normal(size=(9, 4))

    def fn():
        layer.zero_grad()
        loss = float(np.sum(layer.forward(x, e) * proj))
        dx, de = layer.backward(proj)
        return loss, {"x": dx, "e": de, "gamma_head": layer.gamma_head.weight.grad.copy()}

    return gradcheck(fn, {"x": x, "e": e, "gamma_head": layer.gamma_head.weight.value},
                     h=H, tolerance=TOLERANCE, name="conditional_batchnorm")


def check_softmax_cross_entropy(seed: int = 0) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(6, 5))
    labels = rng.integers(0, 5, size=6)

    def fn():
        loss, grad = softmax_cross_entropy(logits, labels)
        return loss, {"logits": grad}

    return gradcheck(fn, {"logits": logits}, h=H, tolerance=TOLERANCE, name="softmax_cross_entropy")


def check_submanifold_conv(seed: int = 0) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    t = _random_tensor(rng, 20, 3)
    layer = SubmanifoldConv(3, 2, rng)
    nbrs = precompute_neighbors(t)
    feats = np.ascontiguousarray(t.features)
    proj = rng.normal(size=(t.num_voxels, 2))

    def fn():
        layer.zero_grad()
        out = layer.forward(t.with_features(feats), nbrs)
        loss = float(np.sum(out.features * proj))
        dx = layer.backward(proj)
        return loss, {"features": dx, "weight": layer.weight.grad.copy(), "bias": layer.bias.grad.copy()}

    return gradcheck(fn, {"features": feats, "weight": layer.weight.value, "bias": layer.bias.value},
                     h=H, tolerance=TOLERANCE, name="submanifold_conv")


def check_sparse_pool(seed: int = 0, mode: PoolMode = PoolMode.AVERAGE) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    t = _random_tensor(rng, 30, 3, extent=6)
    feats = np.ascontiguousarray(t.features)
    _, assignment = sparse_pool(t, mode)
    proj = rng.normal(size=(len(assignment.counts), 3))

    def fn():
        pooled, a = sparse_pool(t.with_features(feats), mode)
        return float(np.sum(pooled.features * proj)), {"features": sparse_pool_backward(a, proj)}

    return gradcheck(fn, {"features": feats}, h=H, tolerance=TOLERANCE, name=f"sparse_pool_{PoolMode(mode).value}")


# ---------------------------------------------------------------------------
# 2. Geometry and consolidation
# ---------------------------------------------------------------------------

def check_corner_loss(seed: int = 0) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    n = 6
    center = rng.normal(size=(n, 3))
    size = rng.uniform(0.5, 2.0, size=(n, 3))
    rot6 = rng.normal(size=(n, 6))
    gt = corners_batch(
        rng.normal(size=(n, 3)), rng.uniform(0.5, 2.0, size=(n, 3)), rotations_from_params(rng.normal(size=(n, 6)))
    )
    mask = np.array([1, 1, 0, 1, 1, 1], dtype=np.float64)

    def fn():
        loss, dc, ds, dr = corner_loss_from_params(center, size, rot6, gt, mask, 1.0)
        return loss, {"center": dc, "size": ds, "rot6": dr}

    return gradcheck(fn, {"center": center, "size": size, "rot6": rot6},
                     h=H, tolerance=TOLERANCE, name="corner_loss")


def _random_prediction(rng: np.random.Generator, n: int, classes: int = 3, dim: int = 4) -> Dict[str, np.ndarray]:
    return {
        "center": rng.normal(size=(n, 3)),
        "size": rng.uniform(0.5, 2.0, size=(n, 3)),
        "rot6": rng.normal(size=(n, 6)),
        "semantic_logits": rng.normal(size=(n, classes + 1)),
        "vote_weight_logit": rng.normal(size=n),
        "shape_embedding": rng.normal(size=(n, dim)),
    }


def check_consolidation(seed: int = 0) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    arrays = _random_prediction(rng, 12)
    graph = build_vote_graph(arrays["center"], 4)
    layer = GraphConsolidation(layers=2)
    proj = _random_prediction(rng, 12)

    def fn():
        out = layer.forward(PerPointPrediction(**arrays), graph)
        loss = sum(float(np.sum(getattr(out, k) * proj[k])) for k in arrays)
        grads = layer.backward(PerPointPrediction(**proj))
        return loss, {k: getattr(grads, k) for k in arrays}

    inputs = {k: arrays[k] for k in ("center", "rot6", "vote_weight_logit", "shape_embedding")}
    return gradcheck(fn, inputs, h=H, tolerance=TOLERANCE, name="consolidation")


# ---------------------------------------------------------------------------
# 3. Networks
# ---------------------------------------------------------------------------

def check_backbone(seed: int = 0) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    net = SparseUNet(BackboneConfig(), rng)
    t, _ = voxelize_points(rng.uniform(0.0, 2.5, size=(10, 3)), 0.25)
    feats = np.ascontiguousarray(t.features)
    proj = rng.normal(size=(t.num_voxels, net.out_channels))
    first = net.encoder[0].convs[0]

    def fn():
        net.zero_grad()
        out = net.forward(t.with_features(feats))
        loss = float(np.sum(out.features * proj))
        dx = net.backward(proj)
        return loss, {"features": dx, "first_conv": first.weight.grad.copy()}

    return gradcheck(fn, {"features": feats, "first_conv": first.weight.value},
                     h=H, tolerance=TOLERANCE, name="backbone")


def check_heads(seed: int = 0, rotation_mode: RotationMode = RotationMode.FULL) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    heads = DetectionHeads(5, 3, 4, HeadsConfig(hidden=6), rotation_mode, [1.0, 2.0, 0.5], rng)
    feats = rng.normal(size=(7, 5))
    positions = rng.normal(size=(7, 3))
    proj = _random_prediction(rng, 7)

    def fn():
        heads.zero_grad()
        out = heads.forward(feats, positions)
        loss = sum(float(np.sum(getattr(out, k) * v)) for k, v in proj.items())
        return loss, {"features": heads.backward(PerPointPrediction(**proj))}

    return gradcheck(fn, {"features": feats}, h=H, tolerance=TOLERANCE, name="heads")


def _small_decoder(rng: np.random.Generator, embedding_dim: int = 4) -> ShapeDecoder:
    return ShapeDecoder(DecoderConfig(conditional_blocks=2, hidden=8, embedding_dim=embedding_dim), rng)


def check_decoder(seed: int = 0, training: bool = False) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    decoder = _small_decoder(rng).train(training)
    queries = rng.random((10, 3))
    e_rows = np.repeat(rng.normal(size=(1, 4)), 10, axis=0)
    fc = decoder.blocks[0].fc1

    def fn():
        decoder.zero_grad()
        values = decoder.forward(queries, e_rows)
        loss, d_values = prior_loss(values, np.where(np.arange(10) % 2 == 0, -1.0, 1.0))
        dq, de = decoder.backward(d_values)
        return loss, {"queries": dq, "embedding": de, "block_fc": fc.weight.grad.copy()}

    return gradcheck(fn, {"queries": queries, "embedding": e_rows, "block_fc": fc.weight.value},
                     h=H, tolerance=TOLERANCE, name="decoder_sign_loss")


def check_encoder(seed: int = 0) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    config = EncoderConfig(channels=[[3, 4], [4, 4]], grid_resolution=8, embedding_dim=3, use_batchnorm=False)
    encoder = ShapeEncoder(config, rng)
    clouds = [rng.random((15, 3)), rng.random((12, 3))]
    proj = rng.normal(size=(2, 3))
    first = encoder.blocks[0].convs[0]

    def fn():
        encoder.zero_grad()
        loss = float(np.sum(encoder.forward(clouds) * proj))
        encoder.backward(proj)
        return loss, {"first_conv": first.weight.grad.copy(), "fc": encoder.fc.weight.grad.copy()}

    return gradcheck(fn, {"first_conv": first.weight.value, "fc": encoder.fc.weight.value},
                     h=H, tolerance=TOLERANCE, name="encoder")


# ---------------------------------------------------------------------------
# 4. Full detection loss
# ---------------------------------------------------------------------------

def tiny_scene(seed: int = 0):
    """Two yawed boxes with 12 points each plus 4 stray points."""
    rng = np.random.default_rng(seed)
    gt = [
        LabeledBox(Box3D.from_yaw([0.0, 0.0, 0.5], [1.2, 0.8, 1.0], 0.3), 1),
        LabeledBox(Box3D.from_yaw([3.0, 0.5, 0.5], [1.0, 1.0, 1.0], -0.2), 2),
    ]
    points = []
    for item in gt:
        local = rng.uniform(-0.4, 0.4, size=(12, 3)) * item.box.size
        points.append(local @ item.box.rotation.T + item.box.center)
    points.append(rng.uniform([-2.0, -2.0, 0.0], [5.0, 2.0, 0.1], size=(4, 3)))
    return np.concatenate(points), gt


def check_detection_loss(seed: int = 0) -> GradcheckReport:
    config = RunConfig(
        detection=DetectionConfig(
            num_classes=2, k=4, embedding_dim=4, min_shape_points=6,
            rotation_mode=RotationMode.YAW, symmetry=None,
        ),
        decoder=DecoderConfig(conditional_blocks=2, hidden=8, embedding_dim=4),
        encoder=EncoderConfig(embedding_dim=4),
    )
    positions, gt = tiny_scene(seed)
    model = DopsDetector(config, anchor_size=[1.0, 1.0, 1.0], seed=seed).train()
    decoder = _small_decoder(np.random.default_rng(seed + 1)).eval()
    iou_fn = iou_function(config.detection.rotation_mode)

    first = model.forward(positions)
    graph = first.graph
    labels = dynamic_labels(first.final, positions, gt, iou_fn, config.detection.iou_positive_threshold)

    inputs = {
        "backbone.encoder.0": model.backbone.encoder[0].convs[0].weight.value,
        "backbone.decoder.0": model.backbone.decoder[-1].convs[-1].weight.value,
        "heads.center.fc1": model.heads.heads["center"].fc1.weight.value,
        "heads.embedding.fc2": model.heads.heads["embedding"].fc2.weight.value,
        "heads.vote.fc2": model.heads.heads["vote"].fc2.weight.value,
    }
    owners = {
        "backbone.encoder.0": model.backbone.encoder[0].convs[0].weight,
        "backbone.decoder.0": model.backbone.decoder[-1].convs[-1].weight,
        "heads.center.fc1": model.heads.heads["center"].fc1.weight,
        "heads.embedding.fc2": model.heads.heads["embedding"].fc2.weight,
        "heads.vote.fc2": model.heads.heads["vote"].fc2.weight,
    }

    def fn():
        model.zero_grad()
        output = model.forward(positions, graph=graph)
        result = detection_loss(
            output.pre, output.post, positions, gt, config.detection, iou_fn,
            decoder=decoder, labels=labels,
        )
        model.backward(output, result)
        return result.total, {k: p.grad.copy() for k, p in owners.items()}

    return gradcheck(fn, inputs, h=H, tolerance=TOLERANCE, max_coords=24, name="detection_loss")


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------

GRADCHECKS: Dict[str, Callable[[int], GradcheckReport]] = {
    "linear": check_linear,
    "tanh": check_tanh,
    "batchnorm": check_batchnorm,
    "conditional_batchnorm": check_conditional_batchnorm,
    "softmax_cross_entropy": check_softmax_cross_entropy,
    "submanifold_conv": check_submanifold_conv,
    "sparse_pool_average": lambda s: check_sparse_pool(s, PoolMode.AVERAGE),
    "sparse_pool_max": lambda s: check_sparse_pool(s, PoolMode.MAX),
    "corner_loss": check_corner_loss,
    "consolidation": check_consolidation,
    "backbone": check_backbone,
    "heads": check_heads,
    "decoder_sign_loss": check_decoder,
    "decoder_sign_loss_train": lambda s: check_decoder(s, training=True),
    "encoder": check_encoder,
    "detection_loss": check_detection_loss,
}


def run_gradchecks(names: Optional[Iterable[str]] = None, seed: int = 0) -> pd.DataFrame:
    """One row per (check, input) with the max relative error."""
    selected = list(GRADCHECKS) if names is None else list(names)
    unknown = [n for n in selected if n not in GRADCHECKS]
    if unknown:
        raise KeyError(f"Unknown gradcheck(s) {unknown!r}; known: {sorted(GRADCHECKS)}")
    rows: List[Dict[str, object]] = []
    for name in selected:
        report = GRADCHECKS[name](seed)
        for key, err in report.errors.items():
            rows.append({"check": name, "input": key, "max_rel_error": err, "passed": err < report.tolerance})
    return pd.DataFrame(rows, columns=["check", "input", "max_rel_error", "passed"])
