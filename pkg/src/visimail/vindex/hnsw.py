"""HNSW link storage and the numba / numpy dispatch around the graph kernels."""
from __future__ import annotations

import math
import threading

import numpy as np

from .. import _accel
from . import _hnsw_kernels as K

MAX_LEVEL = K.MAX_LEVEL


class HNSWGraph:
    """Adjacency for an HNSW graph over rows of an external vector matrix.

    Node ``i`` is row ``i`` of the vector matrix handed to :meth:`insert` and
    :meth:`search`. Levels come from a per-node seeded draw, so the graph is a
    pure function of (seed, insertion order, vectors).
    """

    def __init__(self, m: int = 16, ef_construction: int = 200, seed: int = 0, capacity: int = 64):
        if m < 2:
            raise ValueError("M must be >= 2")
        self.m = m
        self.m0 = 2 * m
        self.ef_construction = ef_construction
        self.seed = seed
        self.count = 0
        self.entry = -1
        self.max_level = 0
        self.n_up = 0
        capacity = max(capacity, 1)
        self.levels = np.zeros(capacity, np.int32)
        self.links0 = np.zeros((capacity, self.m0), np.int32)
        self.cnt0 = np.zeros(capacity, np.int32)
        self.up_slot = np.full(capacity, -1, np.int32)
        self.links_up = np.zeros((1, MAX_LEVEL, m), np.int32)
        self.cnt_up = np.zeros((1, MAX_LEVEL), np.int32)
        self._local = threading.local()

    def level_for(self, node: int) -> int:
        u = np.random.default_rng([self.seed, node]).random()
        return min(int(-math.log(1.0 - u) / math.log(self.m)), MAX_LEVEL)

    def _grow(self, need: int) -> None:
        cap = self.levels.shape[0]
        if need <= cap:
            return
        new = max(need, cap * 2)
        self.levels = np.resize(self.levels, new)
        self.cnt0 = np.concatenate([self.cnt0, np.zeros(new - cap, np.int32)])
        self.links0 = np.concatenate([self.links0, np.zeros((new - cap, self.m0), np.int32)])
        self.up_slot = np.concatenate([self.up_slot, np.full(new - cap, -1, np.int32)])

    def _grow_up(self) -> None:
        if self.n_up < self.links_up.shape[0]:
            return
        extra = self.links_up.shape[0]
        self.links_up = np.concatenate([self.links_up, np.zeros((extra, MAX_LEVEL, self.m), np.int32)])
        self.cnt_up = np.concatenate([self.cnt_up, np.zeros((extra, MAX_LEVEL), np.int32)])

    def _visited(self, size: int):
        loc = self._local
        arr = getattr(loc, "visited", None)
        if arr is None or arr.shape[0] < size:
            loc.visited = arr = np.zeros(max(size, 64), np.int64)
            loc.stamp = 0
        return arr

    def insert(self, vecs: np.ndarray) -> int:
        """Link the next row of ``vecs`` (row index == current count) into the graph."""
        node = self.count
        self._grow(node + 1)
        level = self.level_for(node)
        self.levels[node] = level
        if level > 0:
            self._grow_up()
            self.up_slot[node] = self.n_up
            self.n_up += 1
        visited = self._visited(vecs.shape[0])
        kernel = K.insert_nb if _accel.USE_NUMBA else K.insert_np
        entry, max_level, stamp = kernel(
            vecs, node, level, self.entry, self.max_level, self.m, self.m0, self.ef_construction,
            self.links0, self.cnt0, self.up_slot, self.links_up, self.cnt_up, visited, self._local.stamp,
        )
        self._local.stamp = stamp
        self.entry, self.max_level = int(entry), int(max_level)
        self.count = node + 1
        return node

    def search(self, vecs: np.ndarray, q: np.ndarray, ef: int) -> tuple[np.ndarray, np.ndarray]:
        """Best ``ef`` layer-0 candidates for ``q`` as (node ids, similarities), best first."""
        if self.count == 0:
            return np.empty(0, np.int64), np.empty(0, np.float64)
        visited = self._visited(vecs.shape[0])
        kernel = K.search_nb if _accel.USE_NUMBA else K.search_np
        ids, sims, stamp = kernel(
            vecs, np.ascontiguousarray(q, dtype=np.float64), int(ef), self.entry, self.max_level,
            self.links0, self.cnt0, self.up_slot, self.links_up, self.cnt_up, visited, self._local.stamp,
        )
        self._local.stamp = stamp
        return ids, sims

    # persistence helpers -------------------------------------------------

    def arrays(self) -> dict[str, np.ndarray]:
        n, u = self.count, self.n_up
        return {
            "levels": self.levels[:n],
            "cnt0": self.cnt0[:n],
            "links0": self.links0[:n],
            "up_slot": self.up_slot[:n],
            "cnt_up": self.cnt_up[:u],
            "links_up": self.links_up[:u],
        }

    @classmethod
    def from_arrays(cls, m: int, ef_construction: int, seed: int, entry: int, max_level: int,
                    arrays: dict[str, np.ndarray]) -> "HNSWGraph":
        n = arrays["levels"].shape[0]
        g = cls(m, ef_construction, seed, capacity=max(n, 1))
        g.count = n
        g.entry = entry
        g.max_level = max_level
        g.n_up = arrays["cnt_up"].shape[0]
        g.levels[:n] = arrays["levels"]
        g.cnt0[:n] = arrays["cnt0"]
        g.links0[:n] = arrays["links0"]
        g.up_slot[:n] = arrays["up_slot"]
        g.links_up = np.zeros((max(g.n_up, 1), MAX_LEVEL, m), np.int32)
        g.cnt_up = np.zeros((max(g.n_up, 1), MAX_LEVEL), np.int32)
        g.links_up[: g.n_up] = arrays["links_up"]
        g.cnt_up[: g.n_up] = arrays["cnt_up"]
        return g
