"""
Open-addressed spatial hashmap over integer voxel keys.

Keys are (ix, iy, iz) int64 triples (|k| < 2**31), values are row indices.
Collisions are resolved with linear probing. Insertion and lookup run in
vectorized probe rounds: every pending key inspects its current slot, and
when several keys race for one empty slot the lowest input index wins.
The resulting table is a valid linear-probing table (a key never sits past
an empty slot on its probe path) and is fully deterministic.

The same routine backs the multimap used for voxelization and pooling:
keys that repeat are bucketed into one group without sorting the keys.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from core.errors import ContractViolation, DuplicateKeyError


P1, P2, P3 = 73856093, 19349663, 83492791
DEFAULT_LOAD_FACTOR = 0.42


def hash_key(key, capacity: int) -> int:
    if capacity <= 0:
        raise ContractViolation(f"capacity must be > 0, got {capacity!r}")
    ix, iy, iz = (int(v) for v in key)
    return ((ix * P1) ^ (iy * P2) ^ (iz * P3)) % capacity


def hash_keys(keys: np.ndarray, capacity: int) -> np.ndarray:
    """Vectorized ``hash_key`` for an (N, 3) int array."""
    if capacity <= 0:
        raise ContractViolation(f"capacity must be > 0, got {capacity!r}")
    k = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
    h = (k[:, 0] * P1) ^ (k[:, 1] * P2) ^ (k[:, 2] * P3)
    return np.mod(h, capacity)


def capacity_for(n_keys: int, target_load_factor: float = DEFAULT_LOAD_FACTOR) -> int:
    if not 0.0 < target_load_factor < 1.0:
        raise ContractViolation(
            f"target_load_factor must be in (0, 1), got {target_load_factor!r}"
        )
    return int(math.ceil(n_keys / target_load_factor - 1e-9))


@dataclass
class HashMapStats:
    capacity: int = 0
    size: int = 0
    insertions: int = 0
    collisions: int = 0     # insertions that did not land in their home slot
    total_probes: int = 0   # extra slots inspected across all insertions
    max_probe: int = 0

    @property
    def load_factor(self) -> float:
        return self.size / self.capacity if self.capacity else 0.0

    @property
    def collision_rate(self) -> float:
        return self.collisions / self.insertions if self.insertions else 0.0


class SpatialHashMap:
    """Voxel key -> row index table with linear probing."""

    def __init__(self, capacity: int):
        if capacity < 0:
            raise ContractViolation(f"capacity must be >= 0, got {capacity!r}")
        self.capacity = int(capacity)
        self.slot_keys = np.zeros((self.capacity, 3), dtype=np.int64)
        self.slot_values = np.full(self.capacity, -1, dtype=np.int64)
        self.stats = HashMapStats(capacity=self.capacity)

    def __len__(self) -> int:
        return self.stats.size

    def __contains__(self, key) -> bool:
        return self.lookup(key) >= 0

    @property
    def load_factor(self) -> float:
        return self.stats.load_factor

    # -- insertion ----------------------------------------------------------

    def insert_or_get(self, keys: np.ndarray) -> np.ndarray:
        """
        Return one value per input key, inserting keys that are not present.

        New keys receive consecutive values starting at ``len(self)`` in
        order of their first appearance in ``keys``; repeated keys map to
        the same value.
        """
        keys = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
        n = len(keys)
        out = np.full(n, -1, dtype=np.int64)
        if n == 0:
            return out
        if self.capacity == 0:
            raise ContractViolation("cannot insert into a zero-capacity hashmap")

        base = self.stats.size
        home = hash_keys(keys, self.capacity)
        offset = np.zeros(n, dtype=np.int64)
        n_new = 0
        pending = np.arange(n)

        while len(pending):
            if np.any(offset[pending] >= self.capacity):
                raise ContractViolation(
                    f"hashmap is full (capacity {self.capacity}, size {base + n_new})"
                )
            slots = (home[pending] + offset[pending]) % self.capacity
            stored = self.slot_values[slots]

            occupied = stored >= 0
            same = occupied & np.all(self.slot_keys[slots] == keys[pending], axis=1)
            out[pending[same]] = stored[same]
            offset[pending[occupied & ~same]] += 1

            empty = ~occupied
            if np.any(empty):
                # lowest input index claims each contested slot; the losers stay
                # on that slot and compare against the winner next round
                claimed, first = np.unique(slots[empty], return_index=True)
                winners = pending[empty][first]
                values = base + n_new + np.arange(len(winners))
                n_new += len(winners)

                self.slot_keys[claimed] = keys[winners]
                self.slot_values[claimed] = values
                out[winners] = values

                probes = offset[winners]
                self.stats.collisions += int(np.count_nonzero(probes))
                self.stats.total_probes += int(probes.sum())
                self.stats.max_probe = max(self.stats.max_probe, int(probes.max()))

            pending = pending[out[pending] < 0]

        if n_new:
            self._relabel_first_appearance(out, base, n_new)
        self.stats.insertions += n_new
        self.stats.size += n_new
        return out

    def _relabel_first_appearance(self, out: np.ndarray, base: int, n_new: int) -> None:
        is_new = out >= base
        first_index = np.full(n_new, np.iinfo(np.int64).max, dtype=np.int64)
        np.minimum.at(first_index, out[is_new] - base, np.nonzero(is_new)[0])
        rank = np.empty(n_new, dtype=np.int64)
        rank[np.argsort(first_index, kind="stable")] = np.arange(n_new)
        out[is_new] = base + rank[out[is_new] - base]
        touched = self.slot_values >= base
        self.slot_values[touched] = base + rank[self.slot_values[touched] - base]

    # -- lookup -------------------------------------------------------------

    def lookup_many(self, keys: np.ndarray) -> np.ndarray:
        """Value per key, -1 where the key is absent."""
        keys = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
        out = np.full(len(keys), -1, dtype=np.int64)
        if len(keys) == 0 or self.capacity == 0 or self.stats.size == 0:
            return out
        home = hash_keys(keys, self.capacity)
        offset = np.zeros(len(keys), dtype=np.int64)
        pending = np.arange(len(keys))
        while len(pending):
            slots = (home[pending] + offset[pending]) % self.capacity
            stored = self.slot_values[slots]
            occupied = stored >= 0
            same = occupied & np.all(self.slot_keys[slots] == keys[pending], axis=1)
            out[pending[same]] = stored[same]
            # an empty slot ends the probe path: miss
            keep = occupied & ~same
            offset[pending[keep]] += 1
            keep &= offset[pending] < self.capacity
            pending = pending[keep]
        return out

    def lookup(self, key) -> int:
        return int(self.lookup_many(np.asarray(key, dtype=np.int64).reshape(1, 3))[0])


def build_hashmap(
    coords: np.ndarray, target_load_factor: float = DEFAULT_LOAD_FACTOR
) -> SpatialHashMap:
    """Table mapping each (unique) coordinate to its row index."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    table = SpatialHashMap(capacity_for(len(coords), target_load_factor))
    values = table.insert_or_get(coords)
    if len(coords) and table.stats.size != len(coords):
        dup = np.nonzero(values != np.arange(len(coords)))[0][0]
        raise DuplicateKeyError(f"Duplicate voxel key {tuple(coords[dup].tolist())!r}")
    return table


@dataclass
class KeyGroups:
    """Bucketization of possibly repeated keys."""
    group: np.ndarray   # (N,) group id of each input key, groups numbered by first appearance
    keys: np.ndarray    # (G, 3) key of each group
    counts: np.ndarray  # (G,) members per group
    table: SpatialHashMap

    @property
    def num_groups(self) -> int:
        return int(len(self.keys))


def group_keys(
    keys: np.ndarray, target_load_factor: float = DEFAULT_LOAD_FACTOR
) -> KeyGroups:
    """Hash multimap: bucket duplicate keys together, first-appearance order."""
    keys = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
    table = SpatialHashMap(capacity_for(len(keys), target_load_factor))
    group = table.insert_or_get(keys)
    n_groups = table.stats.size
    first = np.full(n_groups, len(keys), dtype=np.int64)
    np.minimum.at(first, group, np.arange(len(keys)))
    counts = np.bincount(group, minlength=n_groups).astype(np.int64)
    group_keys_ = keys[first] if n_groups else np.zeros((0, 3), dtype=np.int64)
    return KeyGroups(group=group, keys=group_keys_, counts=counts, table=table)


def probe_summary(table: SpatialHashMap) -> Tuple[float, float, float]:
    """(load factor, collision rate, mean extra probes per insertion)."""
    s = table.stats
    mean_probe = s.total_probes / s.insertions if s.insertions else 0.0
    return s.load_factor, s.collision_rate, mean_probe
