from __future__ import annotations

from typing import List, Tuple

import numpy as np

from core.errors import ContractViolation
from core.models import PerPointPrediction, VoteGraph


KNN_CHUNK_ELEMENTS = 4_000_000


def build_vote_graph(centers: np.ndarray, k: int) -> VoteGraph:
    """
    Exact K nearest neighbours among predicted centers.

    Each point is its own first neighbour; remaining ties in distance go to
    the lower point index.
    """
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    n = len(centers)
    if k < 1 or k > n:
        raise ContractViolation(f"K must be in [1, {n}], got {k!r}")
    neighbors = np.empty((n, k), dtype=np.int64)
    chunk = max(1, KNN_CHUNK_ELEMENTS // max(n, 1))
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        diff = centers[start:stop, None, :] - centers[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        d2[np.arange(stop - start), np.arange(start, stop)] = -1.0
        neighbors[start:stop] = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return VoteGraph(neighbors=neighbors)


def _pack(pred: PerPointPrediction) -> np.ndarray:
    return np.hstack([pred.center, pred.size, pred.rot6, pred.shape_embedding])


def _unpack(packed: np.ndarray, like: PerPointPrediction) -> Tuple[np.ndarray, ...]:
    d = like.shape_embedding.shape[1]
    return packed[:, 0:3], packed[:, 3:6], packed[:, 6:12], packed[:, 12:12 + d]


def vote_weights(logits: np.ndarray, graph: VoteGraph) -> np.ndarray:
    """alpha[x, k] = exp(l_{n(x,k)}) / sum_k' exp(l_{n(x,k')})."""
    nb = logits[graph.neighbors]
    nb = nb - nb.max(axis=1, keepdims=True)
    w = np.exp(nb)
    return w / w.sum(axis=1, keepdims=True)


class GraphConsolidation:
    """
    Weighted vote averaging of center, size, rotation and shape embedding
    over the vote graph, repeated ``layers`` times with the same graph and
    weights. Semantic logits and vote logits pass through unchanged.
    """

    def __init__(self, layers: int = 2):
        if layers < 0:
            raise ContractViolation(f"layers must be >= 0, got {layers!r}")
        self.layers = layers

    def forward(self, pred: PerPointPrediction, graph: VoteGraph) -> PerPointPrediction:
        alpha = vote_weights(pred.vote_weight_logit, graph)
        stages: List[np.ndarray] = [_pack(pred)]
        for _ in range(self.layers):
            stages.append(np.einsum("nk,nkc->nc", alpha, stages[-1][graph.neighbors]))
        self._cache = (graph, alpha, stages, pred)
        center, size, rot6, emb = _unpack(stages[-1], pred)
        return pred.replace(center=center, size=size, rot6=rot6, shape_embedding=emb)

    def backward(self, grads: PerPointPrediction) -> PerPointPrediction:
        graph, alpha, stages, pred = self._cache
        nbr = graph.neighbors
        d_packed = _pack(grads)
        d_alpha = np.zeros_like(alpha)
        for layer in reversed(range(self.layers)):
            a_in = stages[layer]
            d_alpha += np.einsum("nc,nkc->nk", d_packed, a_in[nbr])
            d_in = np.zeros_like(a_in)
            np.add.at(d_in, nbr, alpha[:, :, None] * d_packed[:, None, :])
            d_packed = d_in

        d_nb_logits = alpha * (d_alpha - np.sum(alpha * d_alpha, axis=1, keepdims=True))
        d_logit = grads.vote_weight_logit.copy()
        np.add.at(d_logit, nbr, d_nb_logits)

        center, size, rot6, emb = _unpack(d_packed, pred)
        return PerPointPrediction(
            center=center,
            size=size,
            rot6=rot6,
            semantic_logits=grads.semantic_logits,
            vote_weight_logit=d_logit,
            shape_embedding=emb,
        )


def graph_consolidate(pred: PerPointPrediction, graph: VoteGraph, layers: int = 2) -> PerPointPrediction:
    return GraphConsolidation(layers).forward(pred, graph)
