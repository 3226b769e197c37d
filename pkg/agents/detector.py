from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from agents.backbone import SparseUNet, voxelize_points
from agents.consolidation import GraphConsolidation, build_vote_graph
from agents.detection_loss import DetectionLossResult, detection_loss
from agents.heads import DetectionHeads
from agents.proposals import nms, propose_boxes, to_detections
from agents.shape_prior import ShapeDecoder, decoder_field, pool_embeddings
from agents.synthdata import SceneRecord, augment_record
from core.config import RunConfig
from core.errors import EmptyInputError, NumericalFailure
from core.geometry import canonical_frame, iou_function, points_in_box
from core.io import load_checkpoint, save_checkpoint
from core.logs import LoggingAgent
from core.mesh import extract_mesh
from core.models import (
    Detection,
    Mesh,
    PerPointPrediction,
    PointCloud,
    RotationMode,
    SparseTensor,
    VoteGraph,
)
from core.nn import SGD, Module
from core.sparse import voxel_to_point, voxel_to_point_backward


DETECTOR_KIND = "detector"


def _add_grads(a: PerPointPrediction, b: PerPointPrediction) -> PerPointPrediction:
    return PerPointPrediction(
        center=a.center + b.center,
        size=a.size + b.size,
        rot6=a.rot6 + b.rot6,
        semantic_logits=a.semantic_logits + b.semantic_logits,
        vote_weight_logit=a.vote_weight_logit + b.vote_weight_logit,
        shape_embedding=a.shape_embedding + b.shape_embedding,
    )


@dataclass
class DetectorOutput:
    positions: np.ndarray
    tensor: SparseTensor
    point_to_voxel: np.ndarray
    pre: PerPointPrediction
    post: Optional[PerPointPrediction] = None
    graph: Optional[VoteGraph] = None

    @property
    def final(self) -> PerPointPrediction:
        return self.post if self.post is not None else self.pre


# ---------------------------------------------------------------------------
# 1. Model
# ---------------------------------------------------------------------------

class DopsDetector(Module):
    """
    Voxelize -> sparse U-Net -> per-point heads -> vote-graph consolidation.
    """

    def __init__(self, config: RunConfig, anchor_size: Optional[Sequence[float]] = None, seed: Optional[int] = None):
        self.config = config
        det = config.detection
        rng = np.random.default_rng(config.run.seed if seed is None else seed)
        self.backbone = SparseUNet(config.backbone, rng)
        self.heads = DetectionHeads(
            in_features=self.backbone.out_channels,
            num_classes=det.num_classes,
            embedding_dim=det.embedding_dim,
            config=config.heads,
            rotation_mode=det.rotation_mode,
            anchor_size=det.anchor_size if anchor_size is None else anchor_size,
            rng=rng,
        )
        self.consolidation = GraphConsolidation(det.graph_conv_layers) if det.use_consolidation else None

    def forward(self, positions: np.ndarray, graph: Optional[VoteGraph] = None) -> DetectorOutput:
        """``graph`` overrides the vote graph (used to hold it fixed in gradient checks)."""
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        if len(positions) == 0:
            raise EmptyInputError("detector needs at least one point")
        tensor, p2v = voxelize_points(positions, self.config.detection.voxel_size)
        features = self.backbone.forward(tensor)
        pre = self.heads.forward(voxel_to_point(features, p2v), positions)
        out = DetectorOutput(positions=positions, tensor=tensor, point_to_voxel=p2v, pre=pre)
        if self.consolidation is not None:
            if graph is None:
                k = min(self.config.detection.k, len(positions))
                graph = build_vote_graph(pre.center, k)
            out.graph = graph
            out.post = self.consolidation.forward(pre, graph)
        return out

    def backward(self, output: DetectorOutput, loss: DetectionLossResult) -> None:
        d_pre = loss.d_pre
        if output.post is not None and loss.d_post is not None:
            d_pre = _add_grads(d_pre, self.consolidation.backward(loss.d_post))
        d_points = self.heads.backward(d_pre)
        d_voxels = voxel_to_point_backward(output.tensor.num_voxels, output.point_to_voxel, d_points)
        self.backbone.backward(d_voxels)

    def detect(self, positions: np.ndarray) -> Tuple[List[Detection], DetectorOutput]:
        det = self.config.detection
        output = self.forward(positions)
        props = propose_boxes(output.final, det.alpha, det.max_proposals)
        kept = nms(props, det.nms_iou, iou_function(det.rotation_mode, det.sampled_iou_samples))
        return to_detections(kept, det.min_detection_score), output


def save_detector(path: Path, model: DopsDetector) -> Path:
    return save_checkpoint(path, DETECTOR_KIND, model.state_dict(), model.config.model_dump_json())


def load_detector(path: Path) -> DopsDetector:
    ckpt = load_checkpoint(path, DETECTOR_KIND)
    model = DopsDetector(RunConfig.model_validate(ckpt.config))
    model.load_state_dict(ckpt.state)
    return model.eval()


def dataset_anchor(records: Sequence[SceneRecord]) -> np.ndarray:
    """Mean gt box size over a dataset, unit cube when it has no boxes."""
    sizes = [item.box.size for r in records for item in r.gt]
    return np.mean(sizes, axis=0) if sizes else np.ones(3)


# ---------------------------------------------------------------------------
# 2. Training
# ---------------------------------------------------------------------------

@dataclass
class DetectorTrainingResult:
    model: DopsDetector
    loss_log: pd.DataFrame
    logs: List[str] = field(default_factory=list)


@dataclass
class DetectorTrainerAgent(LoggingAgent):
    """SGD over synthetic scenes with the full detection loss."""

    config: RunConfig = field(default_factory=RunConfig)
    logs: List[str] = field(default_factory=list)

    def train(
        self,
        records: Sequence[SceneRecord],
        decoder: Optional[ShapeDecoder] = None,
        iterations: Optional[int] = None,
    ) -> DetectorTrainingResult:
        if not records:
            raise EmptyInputError("detector training needs at least one scene")
        cfg, train_cfg = self.config, self.config.train
        iterations = train_cfg.iterations if iterations is None else iterations
        model = DopsDetector(cfg, anchor_size=dataset_anchor(records)).train()
        if decoder is not None:
            decoder.eval()
        iou_fn = iou_function(cfg.detection.rotation_mode, cfg.detection.sampled_iou_samples)
        opt = SGD(model.params(), cfg.optimizer)
        order_rng = np.random.default_rng(cfg.run.seed)
        order = order_rng.permutation(len(records))
        # axis-aligned boxes must stay axis-aligned under augmentation
        rotation_range = (
            0.0 if cfg.detection.rotation_mode is RotationMode.AXIS_ALIGNED else train_cfg.rotation_range_deg
        )
        self.log(
            f"Training detector on {len(records)} scenes for {iterations} iterations "
            f"(anchor {np.round(model.heads.anchor_size, 3).tolist()})"
        )

        rows: List[Dict[str, float]] = []
        cursor = 0
        for it in range(iterations):
            opt.zero_grad()
            batch_terms: Dict[str, float] = {}
            total, positive = 0.0, 0.0
            for _ in range(train_cfg.scenes_per_batch):
                record = records[order[cursor % len(order)]]
                cursor += 1
                if train_cfg.augment:
                    record = augment_record(
                        record, rotation_range, train_cfg.scale_range,
                        seed=cfg.run.seed * 1_000_003 + cursor,
                    )
                output = model.forward(record.cloud.positions)
                loss = detection_loss(
                    output.pre, output.post, output.positions, record.gt,
                    cfg.detection, iou_fn, decoder=decoder,
                )
                if not np.isfinite(loss.total):
                    raise NumericalFailure(f"non-finite detection loss at iteration {it} ({record.name})")
                model.backward(output, loss)
                total += loss.total
                positive += loss.extras["positive_fraction"]
                for k, v in loss.terms.items():
                    batch_terms[k] = batch_terms.get(k, 0.0) + v

            b = float(train_cfg.scenes_per_batch)
            if b > 1:
                for p in opt.params:
                    p.grad /= b
            lr = opt.step()
            row = {"iteration": it, "loss": total / b, "lr": lr, "positive_fraction": positive / b}
            row.update({k: v / b for k, v in batch_terms.items()})
            rows.append(row)
            if train_cfg.log_every and (it % train_cfg.log_every == 0 or it == iterations - 1):
                terms = ", ".join(f"{k}={v / b:.4f}" for k, v in sorted(batch_terms.items()))
                self.log(f"iter {it}: loss={total / b:.4f} ({terms}) lr={lr:g}")

        model.eval()
        return DetectorTrainingResult(model=model, loss_log=pd.DataFrame(rows), logs=list(self.logs))


# ---------------------------------------------------------------------------
# 3. Inference
# ---------------------------------------------------------------------------

@dataclass
class SceneDetections:
    name: str
    detections: List[Detection]
    meshes: List[Mesh] = field(default_factory=list)


@dataclass
class DetectionAgent(LoggingAgent):
    """
    Runs a trained detector on clouds. With a decoder, each detection also
    gets a mesh decoded from the mean embedding of the points in its box.
    """

    model: DopsDetector
    decoder: Optional[ShapeDecoder] = None
    mesh_resolution: int = 64
    margin: float = 0.05
    logs: List[str] = field(default_factory=list)

    def _mesh_for(self, det: Detection, output: DetectorOutput) -> Mesh:
        frame = canonical_frame(det.box, self.margin)
        inside = points_in_box(output.positions, det.box)
        if not inside.any():
            return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), frame)
        embedding = pool_embeddings(output.final.shape_embedding, [np.flatnonzero(inside)])[0]
        return extract_mesh(decoder_field(self.decoder, embedding), self.mesh_resolution, frame)

    def detect(self, cloud: PointCloud, name: str = "") -> SceneDetections:
        self.model.eval()
        detections, output = self.model.detect(cloud.positions)
        meshes: List[Mesh] = []
        if self.decoder is not None:
            self.decoder.eval()
            meshes = [self._mesh_for(d, output) for d in detections]
        self.log(f"{name or 'cloud'}: {len(detections)} detections from {len(cloud)} points")
        return SceneDetections(name=name, detections=detections, meshes=meshes)
