"""JSON-over-HTTP front end for a :class:`~visimail.pipeline.Pipeline`."""
from __future__ import annotations

import base64
import binascii

from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse, PlainTextResponse
from fastapi.concurrency import run_in_threadpool

from . import _accel
from .cluster import LABELS, ClusterRecord, histogram_csv, lifespan_csv
from .errors import DuplicateId, IoFailure, StageError, UnknownCluster
from .pipeline import Pipeline

MAX_EMAIL_BYTES = 25 * 1024 * 1024


def _summary(c: ClusterRecord) -> dict:
    return {"cluster_id": c.cluster_id, "label": c.label, "size": c.size,
            "first_seen": c.first_seen, "last_seen": c.last_seen}


async def _raw_email(request: Request) -> tuple[bytes, str]:
    """Accept multipart ``file`` uploads or JSON ``{"raw_base64": ..., "source": ...}``."""
    ctype = request.headers.get("content-type", "")
    if ctype.startswith("multipart/form-data"):
        form = await request.form()
        upload = form.get("file")
        if upload is None or isinstance(upload, str):
            raise HTTPException(400, "multipart body needs a 'file' part")
        raw = await upload.read()
        source = str(form.get("source") or upload.filename or "")
    else:
        try:
            body = await request.json()
            raw = base64.b64decode(body["raw_base64"], validate=True)
            source = str(body.get("source", ""))
        except (ValueError, KeyError, TypeError, binascii.Error):
            raise HTTPException(400, "expected JSON with a base64 'raw_base64' field") from None
    if len(raw) > MAX_EMAIL_BYTES:
        raise HTTPException(413, "email too large")
    return raw, source


def _stage_response(exc: StageError) -> JSONResponse:
    status = 409 if isinstance(exc.cause, DuplicateId) else 500 if isinstance(exc.cause, IoFailure) else 422
    return JSONResponse({"error": exc.tag, "stage": exc.stage, "email_id": exc.email_id,
                         "message": str(exc.cause)}, status_code=status)


def create_app(pipeline: Pipeline) -> FastAPI:
    app = FastAPI(title="visimail", version="0.1.0")
    app.state.pipeline = pipeline

    @app.exception_handler(StageError)
    async def stage_error(_request, exc: StageError):
        return _stage_response(exc)

    @app.exception_handler(UnknownCluster)
    async def unknown_cluster(_request, exc: UnknownCluster):
        return JSONResponse({"error": "UnknownCluster", "message": str(exc)}, status_code=404)

    @app.post("/v1/emails")
    async def ingest(request: Request):
        raw, source = await _raw_email(request)
        # the pipeline blocks; run it off the event loop
        result = await run_in_threadpool(pipeline.ingest_email, raw, source)
        return result.to_dict()

    @app.post("/v1/score")
    async def score(request: Request):
        raw, _ = await _raw_email(request)
        return (await run_in_threadpool(pipeline.score_email, raw)).to_dict()

    @app.post("/v1/clusters/{cluster_id}/label")
    def label(cluster_id: int, body: dict):
        value = body.get("label") if isinstance(body, dict) else None
        if value not in LABELS:
            raise HTTPException(400, f"label must be one of {', '.join(LABELS)}")
        return _summary(pipeline.label(cluster_id, value))

    @app.get("/v1/clusters")
    def clusters(offset: int = 0, limit: int = 100):
        if offset < 0 or not 1 <= limit <= 10_000:
            raise HTTPException(400, "offset must be >= 0 and limit within 1..10000")
        store = pipeline.store
        ids = sorted(store.clusters)[offset:offset + limit]
        return {"total": len(store), "offset": offset,
                "clusters": [_summary(store.get(i)) for i in ids]}

    @app.get("/v1/clusters/{cluster_id}")
    def cluster(cluster_id: int):
        c = pipeline.store.get(cluster_id)
        out = _summary(c)
        out["members"] = [{"email_id": m.email_id, "received_at": m.received_at,
                           "score_to_leader": m.score_to_leader} for m in c.members]
        return out

    @app.get("/v1/stats/histogram")
    def histogram(format: str = "json"):
        if format == "csv":
            return PlainTextResponse(histogram_csv(pipeline.store), media_type="text/csv")
        h = pipeline.store.size_histogram()
        return {"buckets": [{"cluster_size": s, "cluster_count": n} for s, n in h.buckets],
                "singleton_fraction": h.singleton_fraction, "total_clusters": h.total_clusters}

    @app.get("/v1/stats/lifespan")
    def lifespan(format: str = "json"):
        if format == "csv":
            return PlainTextResponse(lifespan_csv(pipeline.store), media_type="text/csv")
        return {"clusters": [r._asdict() for r in pipeline.store.lifespan_stats()]}

    @app.get("/v1/health")
    def health():
        return {"status": "ok", "emails": len(pipeline.index), "clusters": len(pipeline.store),
                "index_kind": pipeline.index.kind, "backend_id": pipeline.index.backend_id,
                "kernels": _accel.backend_name()}

    return app
