import base64

import pytest
from fastapi.testclient import TestClient

from conftest import block_pattern, html_email
from visimail import api
from visimail.api import create_app
from visimail.pipeline import Pipeline


@pytest.fixture
def client(cfg, tmp_path):
    pipe = Pipeline.open(cfg, tmp_path / "data")
    with TestClient(create_app(pipe)) as c:
        c.pipe = pipe
        yield c


def post_json(client, path, raw, source="api"):
    return client.post(path, json={"raw_base64": base64.b64encode(raw).decode(), "source": source})


def test_ingest_label_score_flow(client, mailer):
    r = client.post("/v1/emails", files={"file": ("a.eml", mailer(block_pattern(1)), "message/rfc822")})
    assert r.status_code == 200
    body = r.json()
    assert body["cluster_id"] == 1 and body["verdict"]["decision"] == "unknown"
    r = client.post("/v1/clusters/1/label", json={"label": "spam"})
    assert r.json() == {"cluster_id": 1, "label": "spam", "size": 1, "first_seen": body_first(client),
                        "last_seen": body_first(client)}
    r = post_json(client, "/v1/score", mailer(block_pattern(1, noise=3)))
    assert r.status_code == 200
    assert r.json()["decision"] == "spam" and r.json()["matched_cluster"] == 1
    assert client.get("/v1/health").json()["emails"] == 1


def body_first(client):
    return client.pipe.store.get(1).first_seen


def test_cluster_listing_and_detail(client, mailer):
    for s in (1, 2, 1):
        assert post_json(client, "/v1/emails", mailer(block_pattern(s, noise=s))).status_code == 200
    listing = client.get("/v1/clusters").json()
    assert listing["total"] == 2 and [c["size"] for c in listing["clusters"]] == [2, 1]
    assert client.get("/v1/clusters?offset=1&limit=1").json()["clusters"][0]["cluster_id"] == 2
    detail = client.get("/v1/clusters/1").json()
    assert len(detail["members"]) == 2 and detail["members"][0]["score_to_leader"] == 1.0
    assert client.get("/v1/clusters/99").status_code == 404
    assert client.get("/v1/clusters?limit=0").status_code == 400


def test_stats_endpoints(client, mailer):
    for s in (1, 1, 2):
        post_json(client, "/v1/emails", mailer(block_pattern(s, noise=s)))
    h = client.get("/v1/stats/histogram").json()
    assert h["buckets"] == [{"cluster_size": 1, "cluster_count": 1}, {"cluster_size": 2, "cluster_count": 1}]
    assert h["singleton_fraction"] == 0.5
    csv = client.get("/v1/stats/histogram?format=csv")
    assert csv.headers["content-type"].startswith("text/csv")
    assert csv.text == "cluster_size,cluster_count\n1,1\n2,1\n"
    rows = client.get("/v1/stats/lifespan").json()["clusters"]
    assert [r["member_count"] for r in rows] == [2, 1]
    assert client.get("/v1/stats/lifespan?format=csv").text.startswith("cluster_id,first_seen")


def test_error_statuses(client, mailer, monkeypatch):
    raw = mailer(block_pattern(1))
    assert post_json(client, "/v1/emails", raw).status_code == 200
    dup = post_json(client, "/v1/emails", raw)
    assert dup.status_code == 409 and dup.json()["error"] == "index/DuplicateId"
    missing = post_json(client, "/v1/emails", html_email("<p>no fixture</p>"))
    assert missing.status_code == 422 and missing.json()["error"] == "render/FixtureMissing"
    assert client.post("/v1/emails", json={"nope": 1}).status_code == 400
    assert client.post("/v1/emails", json={"raw_base64": "!!"}).status_code == 400
    assert client.post("/v1/emails", files={"other": ("x", b"y")}).status_code == 400
    assert client.post("/v1/clusters/1/label", json={"label": "ham"}).status_code == 400
    assert client.post("/v1/clusters/7/label", json={"label": "spam"}).status_code == 404
    monkeypatch.setattr(api, "MAX_EMAIL_BYTES", 10)
    assert post_json(client, "/v1/emails", raw).status_code == 413


def test_score_leaves_state_unchanged(client, mailer):
    post_json(client, "/v1/emails", mailer(block_pattern(1)))
    before = client.pipe.store.to_bytes()
    assert post_json(client, "/v1/score", mailer(block_pattern(4))).json()["decision"] == "unknown"
    assert client.pipe.store.to_bytes() == before
