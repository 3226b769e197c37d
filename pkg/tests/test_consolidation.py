"""Vote graph construction and weighted consolidation."""

from __future__ import annotations

import numpy as np
import pytest

from agents.consolidation import GraphConsolidation, build_vote_graph, graph_consolidate, vote_weights
from core.errors import ContractViolation
from core.models import PerPointPrediction, VoteGraph


# ── Helpers ──────────────────────────────────────────────────────────────

def _prediction(rng: np.random.Generator, n: int, d: int = 3) -> PerPointPrediction:
    return PerPointPrediction(
        center=rng.normal(size=(n, 3)),
        size=rng.uniform(0.5, 2.0, size=(n, 3)),
        rot6=rng.normal(size=(n, 6)),
        semantic_logits=rng.normal(size=(n, 3)),
        vote_weight_logit=rng.normal(size=n),
        shape_embedding=rng.normal(size=(n, d)),
    )


# ── Graph ───────────────────────────────────────────────────────────────

class TestVoteGraph:
    def test_matches_brute_force(self, rng):
        centers = rng.normal(size=(60, 3))
        graph = build_vote_graph(centers, 5)
        for i in range(60):
            d = np.linalg.norm(centers - centers[i], axis=1)
            d[i] = -1.0
            np.testing.assert_array_equal(graph.neighbors[i], np.argsort(d, kind="stable")[:5])

    def test_self_first_even_with_duplicates(self):
        centers = np.zeros((4, 3))
        graph = build_vote_graph(centers, 3)
        np.testing.assert_array_equal(graph.neighbors[:, 0], np.arange(4))
        # remaining ties go to the lowest index
        np.testing.assert_array_equal(graph.neighbors[2], [2, 0, 1])

    def test_k_bounds(self):
        with pytest.raises(ContractViolation):
            build_vote_graph(np.zeros((3, 3)), 4)
        with pytest.raises(ContractViolation):
            build_vote_graph(np.zeros((3, 3)), 0)


# ── Consolidation ───────────────────────────────────────────────────────

class TestConsolidation:
    def test_weights_are_a_softmax(self, rng):
        graph = build_vote_graph(rng.normal(size=(20, 3)), 4)
        w = vote_weights(rng.normal(size=20) * 50.0, graph)
        np.testing.assert_allclose(w.sum(axis=1), 1.0)
        assert np.all(w >= 0.0)

    def test_equal_logits_average_neighbors(self, rng):
        pred = _prediction(rng, 12)
        pred.vote_weight_logit[...] = 0.0
        graph = build_vote_graph(pred.center, 4)
        out = graph_consolidate(pred, graph, layers=1)
        np.testing.assert_allclose(out.center, pred.center[graph.neighbors].mean(axis=1))
        np.testing.assert_allclose(out.shape_embedding, pred.shape_embedding[graph.neighbors].mean(axis=1))

    def test_zero_layers_is_identity(self, rng):
        pred = _prediction(rng, 8)
        out = graph_consolidate(pred, build_vote_graph(pred.center, 3), layers=0)
        np.testing.assert_array_equal(out.center, pred.center)

    def test_passthrough_fields(self, rng):
        pred = _prediction(rng, 8)
        out = graph_consolidate(pred, build_vote_graph(pred.center, 3))
        np.testing.assert_array_equal(out.semantic_logits, pred.semantic_logits)
        np.testing.assert_array_equal(out.vote_weight_logit, pred.vote_weight_logit)

    def test_agreeing_cluster_is_a_fixed_point(self, rng):
        pred = _prediction(rng, 6)
        pred.center[...] = [1.0, 2.0, 3.0]
        pred.size[...] = [0.5, 0.5, 0.5]
        out = graph_consolidate(pred, build_vote_graph(pred.center, 6), layers=2)
        np.testing.assert_allclose(out.center, pred.center)
        np.testing.assert_allclose(out.size, pred.size)

    def test_stays_inside_neighbour_hull(self, rng):
        pred = _prediction(rng, 40)
        pred.vote_weight_logit[...] = rng.normal(size=40) * 5.0
        graph = build_vote_graph(pred.center, 5)
        out = graph_consolidate(pred, graph, layers=1)
        for name in ("center", "size", "rot6", "shape_embedding"):
            nb = getattr(pred, name)[graph.neighbors]
            value = getattr(out, name)
            assert np.all(value >= nb.min(axis=1) - 1e-12), name
            assert np.all(value <= nb.max(axis=1) + 1e-12), name

    def test_dominant_vote_wins(self):
        n = 3
        pred = PerPointPrediction(
            center=np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]]), size=np.ones((n, 3)),
            rot6=np.zeros((n, 6)), semantic_logits=np.zeros((n, 2)),
            vote_weight_logit=np.array([60.0, 0.0, 0.0]), shape_embedding=np.zeros((n, 1)),
        )
        graph = VoteGraph(np.array([[0, 1, 2], [1, 0, 2], [2, 1, 0]]))
        out = graph_consolidate(pred, graph, layers=1)
        np.testing.assert_allclose(out.center, np.zeros((3, 3)), atol=1e-20)

    def test_negative_layers(self):
        with pytest.raises(ContractViolation):
            GraphConsolidation(-1)
