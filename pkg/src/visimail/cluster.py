"""Online leader clustering of embeddings, cluster labels, verdicts and analytics.

Each incoming vector is compared against cluster leaders only (the first
member of every cluster). It joins the best leader scoring >= tau, lowest
cluster id on ties, or founds a new cluster. Replaying the same sequence
reproduces the same clusters and ids.
"""
from __future__ import annotations

import csv
import io
import os
import threading
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np

from . import _binfmt
from .embed import EmbeddingVector, cosine_many
from .errors import BackendMismatch, CorruptFile, DimMismatch, DuplicateId, IoFailure, UnknownCluster

MAGIC = b"PISCOCLU"
VERSION = 1
DEFAULT_TAU = 0.92
LABELS = ("spam", "clean", "unlabeled")


class Member(NamedTuple):
    email_id: str
    received_at: float
    score_to_leader: float


@dataclass
class ClusterRecord:
    cluster_id: int
    leader: EmbeddingVector
    members: list[Member] = field(default_factory=list)
    first_seen: float = 0.0
    last_seen: float = 0.0
    label: str = "unlabeled"

    @property
    def size(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class Verdict:
    decision: str  # spam | clean | unknown
    matched_cluster: int | None
    score: float

    def to_dict(self) -> dict:
        return {"decision": self.decision, "matched_cluster": self.matched_cluster, "score": self.score}


@dataclass(frozen=True)
class SizeHistogram:
    buckets: list[tuple[int, int]]
    singleton_fraction: float
    total_clusters: int


class LifespanRow(NamedTuple):
    cluster_id: int
    first_seen: float
    last_seen: float
    lifespan_seconds: float
    member_count: int


def singleton_fraction(singletons: int, total: int) -> float:
    """Share of clusters with exactly one member; 0.0 when there are no clusters."""
    return singletons / total if total else 0.0


class ClusterStore:
    def __init__(self, tau: float = DEFAULT_TAU):
        _check_tau(tau)
        self.tau = tau
        self.clusters: dict[int, ClusterRecord] = {}
        self._assigned: dict[str, int] = {}
        self._leaders = np.zeros((0, 0), np.float64)
        self._zero = np.zeros(0, bool)
        self._order: list[int] = []  # cluster id per leader row
        self._dim: int | None = None
        self._backend: str | None = None
        self._lock = threading.RLock()

    # -- queries over leaders ---------------------------------------------

    def _check(self, vec: EmbeddingVector) -> None:
        if self._dim is None:
            return
        if vec.dim != self._dim:
            raise DimMismatch(f"vector dim {vec.dim} != cluster store dim {self._dim}")
        if vec.backend_id != self._backend:
            raise BackendMismatch(f"vector backend {vec.backend_id!r} != {self._backend!r}")

    def _best_leader(self, vec: EmbeddingVector) -> tuple[int | None, float]:
        n = len(self._order)
        if n == 0:
            return None, 0.0
        scores = cosine_many(self._leaders[:n], self._zero[:n], vec.values)
        row = int(np.argmax(scores))  # first max == lowest cluster id
        return self._order[row], float(scores[row])

    def __len__(self) -> int:
        return len(self.clusters)

    @property
    def n_assigned(self) -> int:
        return len(self._assigned)

    def cluster_of(self, email_id: str) -> int | None:
        return self._assigned.get(email_id)

    def get(self, cluster_id: int) -> ClusterRecord:
        try:
            return self.clusters[cluster_id]
        except KeyError:
            raise UnknownCluster(f"no cluster {cluster_id}") from None

    # -- mutation ----------------------------------------------------------

    def _append_leader(self, vec: EmbeddingVector) -> None:
        n = len(self._order)
        if self._dim is None:
            self._dim, self._backend = vec.dim, vec.backend_id
            self._leaders = np.zeros((16, vec.dim), np.float64)
            self._zero = np.zeros(16, bool)
        if n >= self._leaders.shape[0]:
            self._leaders = np.concatenate([self._leaders, np.zeros_like(self._leaders)])
            self._zero = np.concatenate([self._zero, np.zeros_like(self._zero)])
        self._leaders[n] = vec.values
        self._zero[n] = vec.is_zero

    def assign(self, email_id: str, vec: EmbeddingVector, received_at: float, tau: float | None = None) -> tuple[int, float]:
        tau = self.tau if tau is None else tau
        _check_tau(tau)
        with self._lock:
            if email_id in self._assigned:
                raise DuplicateId(f"{email_id} already assigned")
            self._check(vec)
            best, score = self._best_leader(vec)
            if best is not None and score >= tau:
                rec = self.clusters[best]
                rec.members.append(Member(email_id, received_at, score))
                rec.first_seen = min(rec.first_seen, received_at)
                rec.last_seen = max(rec.last_seen, received_at)
                self._assigned[email_id] = best
                return best, score
            cid = len(self.clusters) + 1
            self._append_leader(vec)
            self._order.append(cid)
            self.clusters[cid] = ClusterRecord(cid, vec, [Member(email_id, received_at, 1.0)], received_at, received_at)
            self._assigned[email_id] = cid
            return cid, 1.0

    def label_cluster(self, cluster_id: int, label: str) -> None:
        if label not in LABELS:
            raise ValueError(f"label must be one of {LABELS}")
        with self._lock:
            self.get(cluster_id).label = label

    def verdict(self, vec: EmbeddingVector, tau: float | None = None) -> Verdict:
        """Read-only match against leaders."""
        tau = self.tau if tau is None else tau
        with self._lock:
            self._check(vec)
            best, score = self._best_leader(vec)
            if best is None or score < tau:
                return Verdict("unknown", None, score)
            label = self.clusters[best].label
            return Verdict(label if label in ("spam", "clean") else "unknown", best, score)

    # -- analytics ---------------------------------------------------------

    def size_histogram(self) -> SizeHistogram:
        with self._lock:
            sizes = [c.size for c in self.clusters.values()]
        counts: dict[int, int] = {}
        for s in sizes:
            counts[s] = counts.get(s, 0) + 1
        buckets = sorted(counts.items())
        return SizeHistogram(buckets, singleton_fraction(counts.get(1, 0), len(sizes)), len(sizes))

    def lifespan_stats(self) -> list[LifespanRow]:
        with self._lock:
            return [
                LifespanRow(c.cluster_id, c.first_seen, c.last_seen, c.last_seen - c.first_seen, c.size)
                for c in sorted(self.clusters.values(), key=lambda c: c.cluster_id)
            ]

    # -- persistence -------------------------------------------------------

    def to_bytes(self) -> bytes:
        with self._lock:
            clusters = []
            for cid in self._order:
                c = self.clusters[cid]
                clusters.append({
                    "id": c.cluster_id, "label": c.label, "first_seen": c.first_seen, "last_seen": c.last_seen,
                    "members": [[m.email_id, m.received_at, m.score_to_leader] for m in c.members],
                })
            meta = {"tau": self.tau, "dim": self._dim, "backend_id": self._backend, "clusters": clusters}
            n = len(self._order)
            leaders = self._leaders[:n].astype("<f8").tobytes() if n else b""
            return _binfmt.pack(MAGIC, VERSION, _binfmt.json_block(meta) + leaders)

    def save(self, path: str | os.PathLike) -> None:
        _binfmt.atomic_write(path, self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "ClusterStore":
        _, payload = _binfmt.unpack(data, MAGIC, (VERSION,))
        rd = _binfmt.Reader(payload)
        meta = rd.json_block()
        try:
            store = cls(float(meta["tau"]))
            clusters = meta["clusters"]
            dim = meta["dim"]
            backend = meta["backend_id"]
            n = len(clusters)
            raw = rd.take(8 * n * (dim or 0))
            rd.done()
            leaders = np.frombuffer(raw, dtype="<f8").reshape(n, dim or 0) if n else None
            for row, c in enumerate(clusters):
                leader = EmbeddingVector(np.array(leaders[row], dtype=np.float64), backend)
                cid = int(c["id"])
                if cid != row + 1 or c["label"] not in LABELS:
                    raise CorruptFile("cluster table out of order")
                members = [Member(str(e), float(t), float(s)) for e, t, s in c["members"]]
                if not members:
                    raise CorruptFile(f"cluster {cid} has no members")
                store._append_leader(leader)
                store._order.append(cid)
                store.clusters[cid] = ClusterRecord(cid, leader, members, float(c["first_seen"]),
                                                    float(c["last_seen"]), c["label"])
                for m in members:
                    if m.email_id in store._assigned:
                        raise CorruptFile(f"email {m.email_id} in two clusters")
                    store._assigned[m.email_id] = cid
        except CorruptFile:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptFile(f"bad cluster metadata: {exc}") from exc
        return store

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ClusterStore":
        return cls.from_bytes(_binfmt.read_file(path))


def _check_tau(tau: float) -> None:
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must lie in (0, 1]")


# -- CSV exports ------------------------------------------------------------

HISTOGRAM_HEADER = ("cluster_size", "cluster_count")
LIFESPAN_HEADER = ("cluster_id", "first_seen", "last_seen", "lifespan_seconds", "member_count")


def _csv_text(header: Iterable[str], rows: Iterable[Iterable]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def histogram_csv(store: ClusterStore) -> str:
    return _csv_text(HISTOGRAM_HEADER, store.size_histogram().buckets)


def lifespan_csv(store: ClusterStore) -> str:
    return _csv_text(LIFESPAN_HEADER, (
        (r.cluster_id, repr(r.first_seen), repr(r.last_seen), repr(r.lifespan_seconds), r.member_count)
        for r in store.lifespan_stats()
    ))


def export_csv(store: ClusterStore, kind: str, path: str | os.PathLike) -> None:
    if kind == "histogram":
        text = histogram_csv(store)
    elif kind == "lifespan":
        text = lifespan_csv(store)
    else:
        raise ValueError(f"unknown stats kind {kind!r}")
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc

