from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from agents.shape_prior import ShapeDecoder, decoder_field, prior_loss
from agents.shape_queries import preprocess_observed, ray_augment
from core.config import FitConfig, OptimizerConfig
from core.errors import NumericalFailure, ShapeObservationError
from core.logs import LoggingAgent
from core.mesh import extract_mesh
from core.models import Box3D, CanonicalFrame, Mesh, SdfQueries
from core.nn import SGD, Param


@dataclass
class FitResult:
    embedding: np.ndarray
    mesh: Mesh
    frame: CanonicalFrame
    queries: SdfQueries
    losses: List[float] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")


@dataclass
class ShapeFitterAgent(LoggingAgent):
    """
    Fits a shape embedding to one observed object with the decoder frozen.

    The embedding starts at zero (or ``init``) and is the only thing
    optimized, by momentum SGD on the sign loss over ray-augmented
    queries; the fitted embedding is then meshed in the object's frame.
    """

    config: FitConfig = field(default_factory=FitConfig)
    logs: List[str] = field(default_factory=list)

    def build_queries(self, points: np.ndarray, box: Box3D, ground_z: float = 0.0):
        cfg = self.config
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(points) < cfg.min_points:
            raise ShapeObservationError(
                f"need at least {cfg.min_points} observed points, got {len(points)}"
            )
        canonical, frame = preprocess_observed(
            points, box, ground_z, cfg.symmetry, cfg.margin, cfg.ground_threshold_fraction
        )
        queries = ray_augment(canonical, cfg.delta, cfg.include_surface, cfg.use_rays)
        if not len(queries):
            raise ShapeObservationError("observation produced no fitting queries")
        return queries, frame

    def fit(
        self,
        points: np.ndarray,
        box: Box3D,
        decoder: ShapeDecoder,
        ground_z: float = 0.0,
        init: Optional[np.ndarray] = None,
    ) -> FitResult:
        cfg = self.config
        queries, frame = self.build_queries(points, box, ground_z)
        decoder.eval()
        start = np.zeros(decoder.embedding_dim) if init is None else np.array(init, dtype=np.float64)
        embedding = Param(start.reshape(-1))
        opt = SGD(
            [embedding],
            OptimizerConfig(
                base_lr=cfg.base_lr, momentum=cfg.momentum, weight_decay=0.0,
                schedule_step=max(cfg.iterations, 1), schedule_factors=[1.0],
            ),
        )

        losses: List[float] = []
        n = len(queries)
        for it in range(cfg.iterations):
            opt.zero_grad()
            values = decoder.forward(queries.positions, np.repeat(embedding.value[None], n, axis=0))
            loss, d_values = prior_loss(values, queries.targets)
            if not np.isfinite(loss):
                raise NumericalFailure(f"non-finite fitting loss at iteration {it}")
            _, d_rows = decoder.backward(d_values)
            embedding.grad += d_rows.sum(axis=0)
            opt.step()
            losses.append(loss)
        decoder.zero_grad()

        mesh = extract_mesh(decoder_field(decoder, embedding.value), cfg.resolution, frame)
        self.log(
            f"fit {len(queries)} queries, {cfg.iterations} iterations: "
            f"loss {losses[0] if losses else float('nan'):.4f} -> {losses[-1] if losses else float('nan'):.4f}, "
            f"{len(mesh.faces)} faces"
        )
        return FitResult(
            embedding=embedding.value.copy(), mesh=mesh, frame=frame, queries=queries, losses=losses
        )
