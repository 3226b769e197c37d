from __future__ import annotations

from typing import Dict

import numpy as np

from core.config import HeadsConfig
from core.errors import ShapeMismatchError
from core.models import PerPointPrediction, RotationMode
from core.nn import BatchNorm, Linear, Module, ReLU


IDENTITY_ROT6 = np.array([1.0, 0.0, 1.0, 0.0, 1.0, 0.0])


class MLPHead(Module):
    """Linear -> [BatchNorm] -> ReLU -> Linear, applied per point."""

    def __init__(self, in_features: int, hidden: int, out_features: int,
                 rng: np.random.Generator, use_batchnorm: bool = False):
        self.fc1 = Linear(in_features, hidden, rng)
        self.norm = BatchNorm(hidden) if use_batchnorm else None
        self.relu = ReLU()
        self.fc2 = Linear(hidden, out_features, rng, weight_scale=0.1)

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = self.fc1.forward(x)
        if self.norm is not None:
            h = self.norm.forward(h)
        return self.fc2.forward(self.relu.forward(h))

    def backward(self, grad: np.ndarray) -> np.ndarray:
        grad = self.relu.backward(self.fc2.backward(grad))
        if self.norm is not None:
            grad = self.norm.backward(grad)
        return self.fc1.backward(grad)


class DetectionHeads(Module):
    """
    Per-point attribute heads on backbone features.

    center = point + offset, size = exp(raw) * anchor, rot6 depends on the
    rotation mode: ``axis_aligned`` fixes the identity, ``yaw`` predicts
    only the z pair, ``full`` predicts all six numbers.
    """
    buffers = ("anchor_size",)

    def __init__(
        self,
        in_features: int,
        num_classes: int,
        embedding_dim: int,
        config: HeadsConfig,
        rotation_mode: RotationMode,
        anchor_size,
        rng: np.random.Generator,
    ):
        self.rotation_mode = RotationMode(rotation_mode)
        self.anchor_size = np.array(anchor_size, dtype=np.float64).reshape(3)
        widths: Dict[str, int] = {
            "center": 3,
            "size": 3,
            "semantic": num_classes + 1,
            "vote": 1,
            "embedding": embedding_dim,
        }
        if self.rotation_mode is RotationMode.YAW:
            widths["rotation"] = 2
        elif self.rotation_mode is RotationMode.FULL:
            widths["rotation"] = 6
        self.heads = {
            name: MLPHead(in_features, config.hidden, width, rng, config.use_batchnorm)
            for name, width in widths.items()
        }
        if "rotation" in self.heads:
            bias = self.heads["rotation"].fc2.bias.value
            bias[...] = IDENTITY_ROT6[-len(bias):]
        self.in_features = in_features

    def children(self):
        for name in sorted(self.heads):
            yield name, self.heads[name]

    def forward(self, features: np.ndarray, positions: np.ndarray) -> PerPointPrediction:
        if features.shape[1] != self.in_features:
            raise ShapeMismatchError(
                f"heads expect {self.in_features} features per point, got {features.shape[1]}"
            )
        raw = {name: head.forward(features) for name, head in self.heads.items()}
        n = len(features)
        size = np.exp(raw["size"]) * self.anchor_size
        self._size = size
        rot6 = np.tile(IDENTITY_ROT6, (n, 1))
        if self.rotation_mode is RotationMode.YAW:
            rot6[:, 4:6] = raw["rotation"]
        elif self.rotation_mode is RotationMode.FULL:
            rot6 = raw["rotation"]
        return PerPointPrediction(
            center=positions + raw["center"],
            size=size,
            rot6=rot6,
            semantic_logits=raw["semantic"],
            vote_weight_logit=raw["vote"][:, 0],
            shape_embedding=raw["embedding"],
        )

    def backward(self, grads: PerPointPrediction) -> np.ndarray:
        """Gradient w.r.t. the point features, given dL/d(every prediction field)."""
        raw_grads = {
            "center": grads.center,
            "size": grads.size * self._size,
            "semantic": grads.semantic_logits,
            "vote": grads.vote_weight_logit[:, None],
            "embedding": grads.shape_embedding,
        }
        if self.rotation_mode is RotationMode.YAW:
            raw_grads["rotation"] = grads.rot6[:, 4:6]
        elif self.rotation_mode is RotationMode.FULL:
            raw_grads["rotation"] = grads.rot6
        d_features = np.zeros((len(grads.center), self.in_features))
        for name in sorted(self.heads):
            d_features += self.heads[name].backward(raw_grads[name])
        return d_features


def zero_prediction_grads(pred: PerPointPrediction) -> PerPointPrediction:
    return PerPointPrediction(
        center=np.zeros_like(pred.center),
        size=np.zeros_like(pred.size),
        rot6=np.zeros_like(pred.rot6),
        semantic_logits=np.zeros_like(pred.semantic_logits),
        vote_weight_logit=np.zeros_like(pred.vote_weight_logit),
        shape_embedding=np.zeros_like(pred.shape_embedding),
    )
