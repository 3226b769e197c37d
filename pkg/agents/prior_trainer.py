from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from agents.shape_prior import (
    ShapeDecoder,
    ShapeEncoder,
    build_prior,
    decoder_field,
    embedding_rows,
    embedding_rows_backward,
    prior_loss,
    sample_encoder_input,
    sample_prior_queries,
    to_canonical_shape_points,
)
from agents.synthdata import canonical_sdf, sample_shape_surface
from core.config import RunConfig
from core.errors import DataFormatError, EmptyInputError, NumericalFailure
from core.io import load_checkpoint, save_checkpoint
from core.logs import LoggingAgent
from core.mesh import chamfer_distance, evaluate_grid, extract_mesh, sample_surface
from core.models import PrimitiveShape
from core.nn import SGD


PRIOR_KIND = "prior"


@dataclass
class PriorTrainingResult:
    encoder: ShapeEncoder
    decoder: ShapeDecoder
    loss_log: pd.DataFrame
    logs: List[str] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return float(self.loss_log["loss"].iloc[-1]) if len(self.loss_log) else float("nan")


@dataclass
class PriorTrainerAgent(LoggingAgent):
    """
    Trains encoder and decoder jointly on analytic shapes.

    Each iteration takes every shape once: the encoder sees a fresh surface
    sample (randomly cropped by a plane with ``crop_probability``) and the
    decoder is supervised by signs at near-surface and uniform queries.
    """

    config: RunConfig = field(default_factory=RunConfig)
    logs: List[str] = field(default_factory=list)

    def _batch(self, shapes: Sequence[PrimitiveShape], rng: np.random.Generator):
        prior = self.config.prior
        inputs, positions, targets, owner = [], [], [], []
        for b, shape in enumerate(shapes):
            inputs.append(
                sample_encoder_input(
                    shape, prior.n_input_points, rng, prior.margin,
                    prior.crop_probability, prior.min_crop_fraction, prior.remove_internal,
                )
            )
            q = sample_prior_queries(shape, prior.n_near, prior.n_uniform, prior.near_sigma, rng, prior.margin)
            positions.append(q.positions)
            targets.append(q.targets)
            owner.append(np.full(len(q), b))
        targets = np.concatenate(targets)
        if prior.shuffle_labels:
            targets = rng.permutation(targets)
        return inputs, np.concatenate(positions), targets, np.concatenate(owner)

    def train(self, shapes: Sequence[PrimitiveShape], iterations: Optional[int] = None) -> PriorTrainingResult:
        if not shapes:
            raise EmptyInputError("prior training needs at least one shape")
        cfg = self.config
        iterations = cfg.prior.iterations if iterations is None else iterations
        encoder, decoder = build_prior(cfg.encoder, cfg.decoder, seed=cfg.run.seed)
        encoder.train()
        decoder.train()
        opt = SGD(
            encoder.params() + decoder.params(),
            cfg.optimizer.model_copy(update={"base_lr": cfg.prior.base_lr}),
        )
        rng = np.random.default_rng(cfg.run.seed)
        self.log(f"Training shape prior on {len(shapes)} shapes for {iterations} iterations")

        rows: List[Dict[str, float]] = []
        for it in range(iterations):
            inputs, queries, targets, owner = self._batch(shapes, rng)
            opt.zero_grad()
            embeddings = encoder.forward(inputs)
            values = decoder.forward(queries, embedding_rows(embeddings, owner))
            loss, d_values = prior_loss(values, targets)
            if not np.isfinite(loss):
                raise NumericalFailure(f"non-finite prior loss at iteration {it}")
            _, d_rows = decoder.backward(d_values)
            encoder.backward(embedding_rows_backward(d_rows, owner, len(shapes)))
            lr = opt.step()
            rows.append({"iteration": it, "loss": loss, "lr": lr})
            if cfg.prior.log_every and (it % cfg.prior.log_every == 0 or it == iterations - 1):
                self.log(f"iter {it}: loss={loss:.4f} lr={lr:g}")

        encoder.eval()
        decoder.eval()
        return PriorTrainingResult(encoder, decoder, pd.DataFrame(rows), logs=list(self.logs))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_prior(path: Path, encoder: Optional[ShapeEncoder], decoder: ShapeDecoder, config: RunConfig) -> Path:
    state = decoder.state_dict("decoder.")
    if encoder is not None:
        state.update(encoder.state_dict("encoder."))
    return save_checkpoint(path, PRIOR_KIND, state, config.model_dump_json())


def load_prior(path: Path) -> Tuple[Optional[ShapeEncoder], ShapeDecoder, RunConfig]:
    ckpt = load_checkpoint(path, PRIOR_KIND)
    config = RunConfig.model_validate(ckpt.config)
    has_encoder = any(name.startswith("encoder.") for name in ckpt.state)
    encoder, decoder = build_prior(config.encoder, config.decoder, with_encoder=has_encoder)
    decoder.load_state_dict(ckpt.state, "decoder.")
    if encoder is not None:
        encoder.load_state_dict(ckpt.state, "encoder.")
        encoder.eval()
    return encoder, decoder.eval(), config


def load_decoder(path: Optional[Path]) -> Optional[ShapeDecoder]:
    if path is None:
        return None
    if not Path(path).exists():
        raise DataFormatError(f"Prior checkpoint not found: {path}")
    return load_prior(path)[1]


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

EVAL_COLUMNS = ["shape", "kind", "chamfer", "mean_abs_sdf", "iou", "vertices", "faces"]


def occupancy_iou(predicted: np.ndarray, reference: np.ndarray) -> float:
    inside_p, inside_r = predicted < 0.0, reference < 0.0
    union = np.count_nonzero(inside_p | inside_r)
    return float(np.count_nonzero(inside_p & inside_r)) / union if union else 0.0


@dataclass
class PriorEvaluationAgent(LoggingAgent):
    """Reconstructs each shape from its own surface sample and scores the mesh."""

    resolution: int = 64
    n_samples: int = 10000
    n_input_points: int = 1024
    margin: float = 0.05
    seed: int = 0
    logs: List[str] = field(default_factory=list)

    def evaluate(
        self, encoder: ShapeEncoder, decoder: ShapeDecoder, shapes: Sequence[PrimitiveShape]
    ) -> pd.DataFrame:
        encoder.eval()
        decoder.eval()
        rng = np.random.default_rng(self.seed)
        rows = []
        for shape in shapes:
            points = sample_encoder_input(shape, self.n_input_points, rng, self.margin)
            embedding = encoder.forward([points])[0]
            field_fn = decoder_field(decoder, embedding)
            mesh = extract_mesh(field_fn, self.resolution)
            truth = to_canonical_shape_points(shape, sample_shape_surface(shape, self.n_samples, rng), self.margin)
            chamfer = chamfer_distance(sample_surface(mesh, self.n_samples, seed=self.seed), truth)
            mean_abs = (
                float(np.mean(np.abs(canonical_sdf(shape, mesh.vertices, self.margin))))
                if not mesh.is_empty else float("inf")
            )
            iou = occupancy_iou(
                evaluate_grid(field_fn, self.resolution),
                evaluate_grid(lambda q: canonical_sdf(shape, q, self.margin), self.resolution),
            )
            rows.append(
                {
                    "shape": shape.name or shape.kind.value,
                    "kind": shape.kind.value,
                    "chamfer": chamfer,
                    "mean_abs_sdf": mean_abs,
                    "iou": iou,
                    "vertices": len(mesh.vertices),
                    "faces": len(mesh.faces),
                }
            )
            self.log(f"{rows[-1]['shape']}: chamfer={chamfer:.4f} iou={iou:.3f}")
        return pd.DataFrame(rows, columns=EVAL_COLUMNS)
