"""Spatial hashmap: exactness against a dict, grouping and probe statistics."""

from __future__ import annotations

from time import perf_counter

import numpy as np
import pytest

from core.errors import ContractViolation, DuplicateKeyError
from core.hashmap import (
    SpatialHashMap,
    build_hashmap,
    capacity_for,
    group_keys,
    hash_key,
    hash_keys,
    probe_summary,
)


# ── Helpers ──────────────────────────────────────────────────────────────

def _random_keys(rng: np.random.Generator, n: int, span: int = 2 ** 20) -> np.ndarray:
    keys = np.unique(rng.integers(-span, span, size=(n, 3)), axis=0)
    return keys[rng.permutation(len(keys))]


def _reference_values(keys: np.ndarray) -> np.ndarray:
    seen = {}
    out = []
    for k in map(tuple, keys.tolist()):
        if k not in seen:
            seen[k] = len(seen)
        out.append(seen[k])
    return np.array(out)


# ── Hashing ─────────────────────────────────────────────────────────────

class TestHashing:
    def test_scalar_and_vector_agree(self, rng):
        keys = rng.integers(-1000, 1000, size=(50, 3))
        expected = [hash_key(k, 97) for k in keys]
        np.testing.assert_array_equal(hash_keys(keys, 97), expected)

    def test_range(self, rng):
        h = hash_keys(rng.integers(-(2 ** 30), 2 ** 30, size=(1000, 3)), 1234)
        assert h.min() >= 0 and h.max() < 1234

    def test_capacity_for(self):
        assert capacity_for(42, 0.42) == 100
        with pytest.raises(ContractViolation):
            capacity_for(10, 1.0)


# ── Insert / lookup ─────────────────────────────────────────────────────

class TestInsertLookup:
    def test_first_appearance_values(self):
        table = SpatialHashMap(16)
        keys = np.array([[1, 2, 3], [4, 5, 6], [1, 2, 3], [-7, 0, 2]])
        np.testing.assert_array_equal(table.insert_or_get(keys), [0, 1, 0, 2])
        np.testing.assert_array_equal(table.insert_or_get(np.array([[-7, 0, 2], [9, 9, 9]])), [2, 3])
        assert len(table) == 4

    def test_matches_dict_with_duplicates(self, rng):
        keys = rng.integers(-20, 20, size=(3000, 3))
        table = SpatialHashMap(capacity_for(3000))
        np.testing.assert_array_equal(table.insert_or_get(keys), _reference_values(keys))

    def test_lookup_hits_and_misses(self, rng):
        keys = _random_keys(rng, 5000)
        table = build_hashmap(keys)
        np.testing.assert_array_equal(table.lookup_many(keys), np.arange(len(keys)))
        missing = keys + np.array([2 ** 21, 0, 0])
        assert np.all(table.lookup_many(missing) == -1)
        assert tuple(keys[3]) in table
        assert table.lookup(keys[3]) == 3

    def test_lookup_on_empty_table(self):
        assert SpatialHashMap(8).lookup([0, 0, 0]) == -1

    def test_probe_paths_have_no_holes(self, rng):
        keys = _random_keys(rng, 2000)
        table = build_hashmap(keys, 0.8)
        home = hash_keys(keys, table.capacity)
        slot_of = {v: s for s, v in enumerate(table.slot_values) if v >= 0}
        for i in range(len(keys)):
            s = home[i]
            while s != slot_of[i]:
                assert table.slot_values[s] >= 0
                s = (s + 1) % table.capacity

    def test_duplicate_build_raises(self):
        with pytest.raises(DuplicateKeyError):
            build_hashmap(np.array([[0, 0, 0], [1, 1, 1], [0, 0, 0]]))

    def test_full_table_raises(self):
        with pytest.raises(ContractViolation):
            SpatialHashMap(2).insert_or_get(np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]]))


# ── Grouping ────────────────────────────────────────────────────────────

class TestGroupKeys:
    def test_groups_and_counts(self):
        keys = np.array([[0, 0, 0], [1, 0, 0], [0, 0, 0], [0, 0, 0], [2, 2, 2]])
        groups = group_keys(keys)
        np.testing.assert_array_equal(groups.group, [0, 1, 0, 0, 2])
        np.testing.assert_array_equal(groups.counts, [3, 1, 1])
        np.testing.assert_array_equal(groups.keys, [[0, 0, 0], [1, 0, 0], [2, 2, 2]])

    def test_empty(self):
        groups = group_keys(np.zeros((0, 3), dtype=np.int64))
        assert groups.num_groups == 0


# ── Statistics ──────────────────────────────────────────────────────────

class TestProbeStatistics:
    def test_load_factor(self, rng):
        table = build_hashmap(_random_keys(rng, 4200), 0.42)
        load, _, _ = probe_summary(table)
        assert load == pytest.approx(0.42, abs=1e-3)

    def test_collision_rate_at_default_load(self, rng):
        table = build_hashmap(_random_keys(rng, 20000), 0.42)
        _, collisions, mean_probe = probe_summary(table)
        assert 0.12 <= collisions <= 0.25
        assert mean_probe >= collisions

    def test_no_collisions_when_alone(self):
        table = build_hashmap(np.array([[5, 5, 5]]))
        assert table.stats.collisions == 0


# ── Scaling ─────────────────────────────────────────────────────────────

class TestBuildScaling:
    @staticmethod
    def _best_build_seconds(keys: np.ndarray, repeats: int = 5) -> float:
        best = float("inf")
        for _ in range(repeats):
            t0 = perf_counter()
            build_hashmap(keys)
            best = min(best, perf_counter() - t0)
        return best

    @pytest.mark.slow
    def test_doubling_keys_roughly_doubles_build_time(self, rng):
        keys = _random_keys(rng, 400_000)
        half = keys[: len(keys) // 2]
        ratio = self._best_build_seconds(keys) / self._best_build_seconds(half)
        assert 1.6 <= ratio <= 2.6
