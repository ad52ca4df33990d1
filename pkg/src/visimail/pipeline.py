"""The ingest / score pipeline over a persistent data directory.

A data directory holds three files: the vector index, the cluster state and
an append-only dead-letter log of emails that failed a stage. Ingest is
atomic per email: every check that could fail runs before the index or the
cluster store is touched, and a failed save rolls memory back to disk.
"""
from __future__ import annotations

import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator

from . import _binfmt, _proc
from .cluster import ClusterRecord, ClusterStore, Verdict, export_csv
from .config import PipelineConfig
from .embed import EmbeddingVector, embed
from .errors import ConfigError, CorruptFile, DuplicateId, IoFailure, StageError
from .imgproc import preprocess
from .mailparse import BannerPatternSet, email_id, parse_email, rewrite_email, select_render_part, strip_banners
from .render import render
from .synthcorpus import CampaignSpec, PairScore, arrival_order, generate, score_clustering
from .vindex import HNSWParams, VectorIndex

INDEX_FILE = "index.pvec"
CLUSTER_FILE = "clusters.pclu"
DEADLETTER_FILE = "deadletter.jsonl"


@dataclass(frozen=True)
class Prepared:
    email_id: str
    received_at: float
    source: str
    vector: EmbeddingVector


@dataclass(frozen=True)
class IngestResult:
    email_id: str
    cluster_id: int
    verdict: Verdict
    score_to_leader: float

    def to_dict(self) -> dict:
        return {"email_id": self.email_id, "cluster_id": self.cluster_id,
                "score_to_leader": self.score_to_leader, "verdict": self.verdict.to_dict()}


def _stage(name: str, eid: str | None, fn: Callable, *args):
    try:
        return fn(*args)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc, eid) from exc


def render_input(raw: bytes, banners: BannerPatternSet, source: str = "",
                 fallback_time: float | None = None):
    """parse -> select -> strip banners -> rewrite; returns (record, html to render)."""
    eid = email_id(raw) if raw else None
    rec = _stage("parse", eid, parse_email, raw, source, fallback_time)
    html = _stage("select", rec.id, select_render_part, rec)
    stripped, removed = _stage("strip_banners", rec.id, strip_banners, html, banners)
    if removed:
        def rewrite():
            rewritten = parse_email(rewrite_email(rec, stripped), source, rec.received_at)
            return select_render_part(rewritten)
        html = _stage("rewrite", rec.id, rewrite)
    return rec, html


class Pipeline:
    def __init__(self, cfg: PipelineConfig, data_dir: str | Path, index: VectorIndex, store: ClusterStore):
        self.cfg = cfg
        self.data_dir = Path(data_dir)
        self.index = index
        self.store = store
        self._write = threading.Lock()
        self._deadletter_lock = threading.Lock()

    # -- lifecycle ---------------------------------------------------------

    @classmethod
    def open(cls, cfg: PipelineConfig, data_dir: str | Path | None = None, check_render: bool = True) -> "Pipeline":
        cfg.validate(check_paths=True, check_render=check_render)
        _proc.set_process_cap(cfg.service.process_cap)
        root = Path(data_dir if data_dir is not None else cfg.service.data_dir)
        try:
            root.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"cannot create data dir {root}: {exc}") from exc
        index, store = cls._load_state(cfg, root)
        return cls(cfg, root, index, store)

    @staticmethod
    def _load_state(cfg: PipelineConfig, root: Path) -> tuple[VectorIndex, ClusterStore]:
        backend = cfg.embed.effective_backend_id
        ipath, cpath = root / INDEX_FILE, root / CLUSTER_FILE
        if ipath.exists() != cpath.exists():
            raise CorruptFile(f"{root} holds only one of {INDEX_FILE} / {CLUSTER_FILE}")
        if not ipath.exists():
            ic = cfg.index
            params = HNSWParams(ic.M, ic.ef_construction, ic.ef_search, ic.seed)
            return VectorIndex(ic.dim, backend, ic.kind, params), ClusterStore(cfg.cluster.tau)
        index = VectorIndex.load(ipath)
        store = ClusterStore.load(cpath)
        if index.dim != cfg.index.dim or index.backend_id != backend or index.kind != cfg.index.kind:
            raise ConfigError(
                f"stored index is {index.kind}/{index.dim}-d/{index.backend_id!r}, config asks for "
                f"{cfg.index.kind}/{cfg.index.dim}-d/{backend!r}"
            )
        if len(index) != store.n_assigned or any(store.cluster_of(e) is None for e in index.ids):
            raise CorruptFile("index and cluster state disagree on the set of emails")
        return index, store

    def _persist(self) -> None:
        index_bytes, store_bytes = self.index.to_bytes(), self.store.to_bytes()
        ipath, cpath = self.data_dir / INDEX_FILE, self.data_dir / CLUSTER_FILE
        old_index = ipath.read_bytes() if ipath.exists() else None
        try:
            _binfmt.atomic_write(ipath, index_bytes)
            try:
                _binfmt.atomic_write(cpath, store_bytes)
            except IoFailure:
                if old_index is None:
                    ipath.unlink(missing_ok=True)
                else:
                    _binfmt.atomic_write(ipath, old_index)
                raise
        except IoFailure:
            self._reload()
            raise

    def _reload(self) -> None:
        self.index, self.store = self._load_state(self.cfg, self.data_dir)

    # -- stages ------------------------------------------------------------

    def prepare(self, raw: bytes, source: str = "", fallback_time: float | None = None) -> Prepared:
        """Everything up to the embedding. Pure: touches no state."""
        rec, html = render_input(raw, self.cfg.banners, source,
                                 time.time() if fallback_time is None else fallback_time)
        shot = _stage("render", rec.id, render, html, rec.id, self.cfg.render)
        shot = _stage("preprocess", rec.id, preprocess, shot, self.cfg.imgproc)
        vec = _stage("embed", rec.id, embed, shot, self.cfg.embed)
        return Prepared(rec.id, rec.received_at, source, vec)

    def _check_insertable(self, p: Prepared) -> None:
        if p.email_id in self.index or self.store.cluster_of(p.email_id) is not None:
            raise DuplicateId(f"{p.email_id} already ingested")
        self.index.check_vector(p.vector)

    def commit(self, p: Prepared, persist: bool = True) -> IngestResult:
        """Verdict (before this email counts), then insert + assign, then save."""
        tau = self.cfg.cluster.tau
        with self._write:
            _stage("index", p.email_id, self._check_insertable, p)
            verdict = _stage("cluster", p.email_id, self.store.verdict, p.vector, tau)
            _stage("index", p.email_id, self.index.insert, p.email_id, p.vector)
            cid, score = _stage("cluster", p.email_id, self.store.assign, p.email_id, p.vector, p.received_at, tau)
            if persist:
                _stage("persist", p.email_id, self._persist)
        return IngestResult(p.email_id, cid, verdict, score)

    # -- operations --------------------------------------------------------

    def ingest_email(self, raw: bytes, source: str = "", fallback_time: float | None = None) -> IngestResult:
        try:
            return self.commit(self.prepare(raw, source, fallback_time))
        except StageError as exc:
            self._dead_letter(exc, source)
            raise

    def ingest_many(self, items: Iterable[tuple[bytes, str]], fallback_time: float | None = None,
                    ) -> Iterator[IngestResult | StageError]:
        """Ingest in arrival order; stages before insertion run on the worker pool.

        Yields one result or StageError per item. State is saved once at the end.
        """
        items = list(items)
        dirty = False
        with ThreadPoolExecutor(max_workers=self.cfg.service.workers) as pool:
            futures = [pool.submit(self._prepare_or_error, raw, source, fallback_time) for raw, source in items]
            try:
                for (_, source), fut in zip(items, futures):
                    prepared = fut.result()
                    if isinstance(prepared, StageError):
                        self._dead_letter(prepared, source)
                        yield prepared
                        continue
                    try:
                        result = self.commit(prepared, persist=False)
                    except StageError as exc:
                        self._dead_letter(exc, source)
                        yield exc
                        continue
                    dirty = True
                    yield result
            finally:
                if dirty:
                    with self._write:
                        self._persist()

    def _prepare_or_error(self, raw, source, fallback_time):
        try:
            return self.prepare(raw, source, fallback_time)
        except StageError as exc:
            return exc

    def score_email(self, raw: bytes) -> Verdict:
        """Verdict only: nothing is inserted, assigned, saved or logged."""
        p = self.prepare(raw, "", 0.0)
        return _stage("cluster", p.email_id, self.store.verdict, p.vector, self.cfg.cluster.tau)

    def label(self, cluster_id: int, label: str) -> ClusterRecord:
        with self._write:
            self.store.label_cluster(cluster_id, label)
            self._persist()
            return self.store.get(cluster_id)

    def export_stats(self, kind: str, path: str | Path) -> None:
        export_csv(self.store, kind, path)

    # -- dead letters ------------------------------------------------------

    @property
    def deadletter_path(self) -> Path:
        return self.data_dir / DEADLETTER_FILE

    def _dead_letter(self, exc: StageError, source: str) -> None:
        entry = {"stage": exc.stage, "error": exc.tag, "message": str(exc.cause),
                 "email_id": exc.email_id, "source": source, "logged_at": time.time()}
        line = json.dumps(entry, sort_keys=True) + "\n"
        with self._deadletter_lock:
            try:
                with open(self.deadletter_path, "a", encoding="utf-8") as fh:
                    fh.write(line)
            except OSError as exc2:
                raise IoFailure(f"cannot append to {self.deadletter_path}: {exc2}") from exc2


@dataclass(frozen=True)
class EvalReport:
    score: PairScore
    n_emails: int
    n_clusters: int
    seconds: float

    def to_dict(self) -> dict:
        return {"precision": self.score.precision, "recall": self.score.recall,
                "same_cluster_pairs": self.score.same_cluster_pairs, "same_kit_pairs": self.score.same_kit_pairs,
                "agreeing_pairs": self.score.agreeing_pairs, "emails": self.n_emails,
                "clusters": self.n_clusters, "seconds": round(self.seconds, 3)}


def evaluate_synthetic(spec: CampaignSpec, cfg: PipelineConfig) -> EvalReport:
    """Generate a campaign, then preprocess, embed and cluster it in arrival order."""
    start = time.perf_counter()
    items = arrival_order(generate(spec))
    store = ClusterStore(cfg.cluster.tau)
    predicted = {}
    for item in items:
        vec = embed(preprocess(item.image, cfg.imgproc), cfg.embed)
        predicted[item.email_id], _ = store.assign(item.email_id, vec, item.received_at)
    score = score_clustering({i.email_id: i.kit_id for i in items}, predicted)
    return EvalReport(score, len(items), len(store), time.perf_counter() - start)
