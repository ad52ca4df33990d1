from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .. import _binfmt
from .._rwlock import RWLock
from ..embed import EmbeddingVector, cosine_many
from ..errors import BackendMismatch, CorruptFile, DimMismatch, DuplicateId
from .hnsw import MAX_LEVEL, HNSWGraph

MAGIC = b"PISCOVEC"
VERSION = 1
EF_RANGE_CAP = 1024


@dataclass(frozen=True)
class HNSWParams:
    M: int = 16
    ef_construction: int = 200
    ef_search: int = 64
    seed: int = 0


@dataclass(frozen=True)
class IndexMeta:
    dim: int
    backend_id: str
    kind: str = "flat"
    metric: str = "cosine"
    hnsw_params: HNSWParams = field(default_factory=HNSWParams)
    count: int = 0


@dataclass(frozen=True)
class Hit:
    email_id: str
    score: float


def _ranked(ids: list[str], scores: np.ndarray, k: int | None) -> list[Hit]:
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
    if k is not None:
        order = order[:k]
    return [Hit(ids[i], float(scores[i])) for i in order]


class VectorIndex:
    """Cosine k-NN / range index over embedding vectors.

    ``kind="flat"`` scans every vector (exact); ``kind="hnsw"`` walks an HNSW
    graph (approximate). Vectors are stored as float32. Searches may run
    concurrently; inserts take an exclusive lock.
    """

    def __init__(self, dim: int, backend_id: str, kind: str = "flat", params: HNSWParams | None = None):
        if kind not in ("flat", "hnsw"):
            raise ValueError(f"index kind must be flat or hnsw, not {kind!r}")
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = dim
        self.backend_id = backend_id
        self.kind = kind
        self.params = params or HNSWParams()
        self._ids: list[str] = []
        self._rows: dict[str, int] = {}
        self._vecs = np.zeros((16, dim), np.float32)
        self._vecs64 = np.zeros((16, dim), np.float64)
        self._zero = np.zeros(16, bool)
        self._graph = HNSWGraph(self.params.M, self.params.ef_construction, self.params.seed) if kind == "hnsw" else None
        self._lock = RWLock()

    # -- introspection -----------------------------------------------------

    @property
    def meta(self) -> IndexMeta:
        return IndexMeta(self.dim, self.backend_id, self.kind, "cosine", self.params, len(self._ids))

    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, email_id: str) -> bool:
        return email_id in self._rows

    @property
    def ids(self) -> list[str]:
        return list(self._ids)

    def vector(self, email_id: str) -> np.ndarray:
        return self._vecs[self._rows[email_id]].copy()

    # -- mutation ----------------------------------------------------------

    def check_vector(self, vec: EmbeddingVector) -> None:
        if vec.dim != self.dim:
            raise DimMismatch(f"vector dim {vec.dim} != index dim {self.dim}")
        if vec.backend_id != self.backend_id:
            raise BackendMismatch(f"vector backend {vec.backend_id!r} != index backend {self.backend_id!r}")

    def _ensure_capacity(self, n: int) -> None:
        cap = self._vecs.shape[0]
        if n <= cap:
            return
        new = max(n, cap * 2)
        self._vecs = np.concatenate([self._vecs, np.zeros((new - cap, self.dim), np.float32)])
        self._vecs64 = np.concatenate([self._vecs64, np.zeros((new - cap, self.dim), np.float64)])
        self._zero = np.concatenate([self._zero, np.zeros(new - cap, bool)])

    def insert(self, email_id: str, vec: EmbeddingVector) -> None:
        self.check_vector(vec)
        with self._lock.write():
            if email_id in self._rows:
                raise DuplicateId(f"{email_id} already indexed")
            row = len(self._ids)
            self._ensure_capacity(row + 1)
            self._vecs[row] = vec.values
            self._vecs64[row] = self._vecs[row]
            self._zero[row] = vec.is_zero
            if self._graph is not None:
                self._graph.insert(self._vecs64)
            # publish last so readers never see a half-linked row
            self._rows[email_id] = row
            self._ids.append(email_id)

    # -- queries -----------------------------------------------------------

    def _flat_scores(self, q: np.ndarray) -> np.ndarray:
        n = len(self._ids)
        return cosine_many(self._vecs64[:n], self._zero[:n], q)

    def search_knn(self, query: EmbeddingVector, k: int) -> list[Hit]:
        """Top-k by cosine, sorted by (score desc, email_id asc)."""
        self.check_vector(query)
        if k < 1:
            raise ValueError("k must be >= 1")
        with self._lock.read():
            n = len(self._ids)
            if n == 0:
                return []
            q = query.values
            if self._graph is None or query.is_zero:
                scores = self._flat_scores(q)
                if k < n:
                    # keep everything tied with the k-th score so id tie-breaks stay exact
                    kth = np.partition(scores, n - k)[n - k]
                    rows = np.flatnonzero(scores >= kth)
                else:
                    rows = np.arange(n)
                return _ranked([self._ids[r] for r in rows], scores[rows], k)
            ids, sims = self._graph.search(self._vecs64, q, max(self.params.ef_search, k))
            return _ranked([self._ids[r] for r in ids], np.clip(sims, -1.0, 1.0), k)

    def search_range(self, query: EmbeddingVector, tau: float) -> list[Hit]:
        """All entries scoring >= tau (approximate for hnsw), best first."""
        self.check_vector(query)
        if not -1.0 <= tau <= 1.0:
            raise ValueError("tau must lie in [-1, 1]")
        with self._lock.read():
            n = len(self._ids)
            if n == 0:
                return []
            q = query.values
            if self._graph is None or query.is_zero:
                scores = self._flat_scores(q)
                rows = np.flatnonzero(scores >= tau)
                return _ranked([self._ids[r] for r in rows], scores[rows], None)
            ef = max(self.params.ef_search, 1)
            while True:
                ids, sims = self._graph.search(self._vecs64, q, ef)
                if ids.shape[0] < ef or sims[-1] < tau or ef >= EF_RANGE_CAP:
                    break
                ef = min(ef * 2, EF_RANGE_CAP)
            sims = np.clip(sims, -1.0, 1.0)
            keep = sims >= tau
            return _ranked([self._ids[r] for r in ids[keep]], sims[keep], None)

    # -- persistence -------------------------------------------------------

    def to_bytes(self) -> bytes:
        with self._lock.read():
            n = len(self._ids)
            meta = {
                "dim": self.dim, "backend_id": self.backend_id, "metric": "cosine", "kind": self.kind,
                "M": self.params.M, "ef_construction": self.params.ef_construction,
                "ef_search": self.params.ef_search, "seed": self.params.seed, "count": n,
            }
            if self._graph is not None:
                meta.update(entry=self._graph.entry, max_level=self._graph.max_level,
                            n_up=self._graph.n_up, max_levels=MAX_LEVEL)
            parts = [_binfmt.json_block(meta)]
            for email_id in self._ids:
                raw = email_id.encode("utf-8")
                parts.append(struct.pack("<I", len(raw)) + raw)
            parts.append(self._vecs[:n].astype("<f4").tobytes())
            if self._graph is not None:
                arrays = self._graph.arrays()
                for name in ("levels", "cnt0", "links0", "up_slot", "cnt_up", "links_up"):
                    parts.append(arrays[name].astype("<i4").tobytes())
            return _binfmt.pack(MAGIC, VERSION, b"".join(parts))

    def save(self, path: str | os.PathLike) -> None:
        _binfmt.atomic_write(path, self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "VectorIndex":
        _, payload = _binfmt.unpack(data, MAGIC, (VERSION,))
        rd = _binfmt.Reader(payload)
        meta = rd.json_block()
        try:
            dim, n, kind = int(meta["dim"]), int(meta["count"]), meta["kind"]
            params = HNSWParams(int(meta["M"]), int(meta["ef_construction"]), int(meta["ef_search"]), int(meta["seed"]))
            idx = cls(dim, str(meta["backend_id"]), kind, params)
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptFile(f"bad index metadata: {exc}") from exc
        ids = []
        for _ in range(n):
            try:
                ids.append(bytes(rd.take(rd.u32())).decode("utf-8"))
            except UnicodeDecodeError as exc:
                raise CorruptFile("bad id table") from exc
        if len(set(ids)) != n:
            raise CorruptFile("duplicate ids in id table")
        vecs = np.frombuffer(rd.take(4 * n * dim), dtype="<f4").reshape(n, dim)
        idx._ensure_capacity(n)
        idx._vecs[:n] = vecs
        idx._vecs64[:n] = idx._vecs[:n]
        idx._zero[:n] = ~vecs.any(axis=1)
        idx._ids = ids
        idx._rows = {e: i for i, e in enumerate(ids)}
        if kind == "hnsw":
            m = params.M
            try:
                n_up, max_levels = int(meta["n_up"]), int(meta["max_levels"])
                entry, max_level = int(meta["entry"]), int(meta["max_level"])
            except (KeyError, TypeError, ValueError) as exc:
                raise CorruptFile(f"bad graph metadata: {exc}") from exc
            if max_levels != MAX_LEVEL:
                raise CorruptFile("graph level count mismatch")

            def arr(count, shape):
                return np.frombuffer(rd.take(4 * count), dtype="<i4").reshape(shape).astype(np.int32)

            arrays = {
                "levels": arr(n, (n,)),
                "cnt0": arr(n, (n,)),
                "links0": arr(n * 2 * m, (n, 2 * m)),
                "up_slot": arr(n, (n,)),
                "cnt_up": arr(n_up * MAX_LEVEL, (n_up, MAX_LEVEL)),
                "links_up": arr(n_up * MAX_LEVEL * m, (n_up, MAX_LEVEL, m)),
            }
            _validate_graph(arrays, n, n_up, m, entry, max_level)
            idx._graph = HNSWGraph.from_arrays(m, params.ef_construction, params.seed, entry, max_level, arrays)
        rd.done()
        return idx

    @classmethod
    def load(cls, path: str | os.PathLike) -> "VectorIndex":
        return cls.from_bytes(_binfmt.read_file(path))


def _validate_graph(a: dict[str, np.ndarray], n: int, n_up: int, m: int, entry: int, max_level: int) -> None:
    """Reject graphs whose links would index outside the stored arrays."""
    ok = (
        (n == 0 and entry == -1) or (0 <= entry < n)
    ) and 0 <= max_level <= MAX_LEVEL
    ok = ok and bool(np.all((a["cnt0"] >= 0) & (a["cnt0"] <= 2 * m)))
    ok = ok and bool(np.all((a["links0"] >= 0) & (a["links0"] < max(n, 1))))
    ok = ok and bool(np.all((a["up_slot"] >= -1) & (a["up_slot"] < n_up)))
    ok = ok and bool(np.all((a["cnt_up"] >= 0) & (a["cnt_up"] <= m)))
    ok = ok and bool(np.all((a["links_up"] >= 0) & (a["links_up"] < max(n, 1))))
    ok = ok and bool(np.all((a["levels"] >= 0) & (a["levels"] <= MAX_LEVEL)))
    ok = ok and bool(np.all((a["levels"] > 0) == (a["up_slot"] >= 0)))
    if not ok:
        raise CorruptFile("graph arrays out of range")


def load_index(path: str | os.PathLike) -> VectorIndex:
    return VectorIndex.load(path)
