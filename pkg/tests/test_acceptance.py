"""Acceptance criteria 1-8. Each test records its measured numbers; the run ends
with one PASS/FAIL line per criterion (see the ``acceptance criteria`` section).

Pinned tolerances:
  1  ids identical, |score diff| <= 1e-6, runtime < 10 s
  2  recall@10 >= 0.95, 1000 queries in < 2 s (JIT warm-up excluded)
  3  precision >= 0.98, recall >= 0.95, < 120 s
  4  byte-identical state files and CSVs
  5  exact equality, no tolerance
  6  buckets exact, singleton fraction 0.40 within 1e-12, 2.92% within 0.01 pp
  7  verdict spam with score >= tau; unrelated layout unknown
  8  identical answers; every truncation raises CorruptFile
"""
import time
from pathlib import Path

import lxml.html
import numpy as np
import pytest

from conftest import Mailer, html_email, make_config, random_unit, record, store_fixture
from visimail.cluster import ClusterStore, histogram_csv, lifespan_csv, singleton_fraction
from visimail.config import load_config
from visimail.embed import EmbeddingVector, cosine, embed_reference
from visimail.errors import CorruptFile
from visimail.imgproc import PreprocessConfig, normalize_minmax, trim_whitespace
from visimail.mailparse import BannerPatternSet, strip_banners
from visimail.pipeline import CLUSTER_FILE, INDEX_FILE, Pipeline, evaluate_synthetic
from visimail.render import Screenshot
from visimail.synthcorpus import CampaignSpec, generate
from visimail.vindex import VectorIndex

BACKEND = "acc"


def ev(v):
    return EmbeddingVector.normalized(v, BACKEND)


def oracle_topk(vecs, q, k):
    scores = vecs @ q
    order = sorted(range(len(vecs)), key=lambda i: (-scores[i], i))[:k]
    return order, scores[order]


# -- 1 ------------------------------------------------------------------------


def test_criterion_1_flat_matches_brute_force():
    t0 = time.perf_counter()
    vecs = random_unit(1000, 256, 11)
    queries = random_unit(100, 256, 12)
    idx = VectorIndex(256, BACKEND, "flat")
    for i, v in enumerate(vecs):
        idx.insert(f"{i:04d}", ev(v))
    ids_ok, worst = True, 0.0
    for q in queries:
        for k in (1, 5, 20):
            want_ids, want_scores = oracle_topk(vecs, q, k)
            hits = idx.search_knn(ev(q), k)
            ids_ok &= [h.email_id for h in hits] == [f"{i:04d}" for i in want_ids]
            worst = max(worst, float(np.max(np.abs(np.array([h.score for h in hits]) - want_scores))))
    secs = time.perf_counter() - t0
    ok = record(1, ids_ok and worst <= 1e-6 and secs < 10,
                f"ids identical={ids_ok}, max score diff {worst:.1e}, {secs:.2f}s")
    assert ok


# -- 2 ------------------------------------------------------------------------


def test_criterion_2_hnsw_recall():
    vecs = random_unit(10_000, 256, 0)
    flat = VectorIndex(256, BACKEND, "flat")
    hnsw = VectorIndex(256, BACKEND, "hnsw")  # M=16, efC=200, efS=64
    t0 = time.perf_counter()
    for i, v in enumerate(vecs):
        e = ev(v)
        flat.insert(str(i), e)
        hnsw.insert(str(i), e)
    build = time.perf_counter() - t0
    picks = np.random.default_rng(1).choice(10_000, 1000, replace=False)
    queries = [ev(vecs[i]) for i in picks]
    hnsw.search_knn(queries[0], 10)  # JIT warm-up
    t0 = time.perf_counter()
    got = [hnsw.search_knn(q, 10) for q in queries]
    secs = time.perf_counter() - t0

    def recall(qs, answers):
        return float(np.mean([len({h.email_id for h in a} & {h.email_id for h in flat.search_knn(q, 10)}) / 10
                              for q, a in zip(qs, answers)]))

    r = recall(queries, got)
    held = [ev(v) for v in random_unit(1000, 256, 2)]
    r_held = recall(held, [hnsw.search_knn(q, 10) for q in held])
    ok = record(2, r >= 0.95 and secs < 2,
                f"recall@10 {r:.4f} over 1000 indexed-vector queries, {secs:.2f}s "
                f"(build {build:.0f}s; info: held-out random queries {r_held:.4f})")
    assert ok


# -- 3 ------------------------------------------------------------------------


def test_criterion_3_synthetic_clustering():
    cfg = load_config(env={}, check_render=False)
    report = evaluate_synthetic(CampaignSpec(seed=7, n_kits=50, variants_per_kit=20), cfg)
    s = report.score
    ok = record(3, s.precision >= 0.98 and s.recall >= 0.95 and report.seconds < 120,
                f"precision {s.precision:.4f}, recall {s.recall:.4f}, {report.n_clusters} clusters, "
                f"{report.seconds:.1f}s")
    assert ok


# -- 4 ------------------------------------------------------------------------


def test_criterion_4_replay_is_byte_identical(tmp_path):
    cfg = make_config(tmp_path)
    mail = Mailer(Path(cfg.render.fixture_dir))
    shots = generate(CampaignSpec(seed=5, n_kits=6, variants_per_kit=5, canvas=(240, 320)))
    rng = np.random.default_rng(3)
    emails = [mail(s.image.pixels, date=f"{1 + int(rng.integers(0, 28))} Apr 2024 10:00:00 +0000")
              for s in shots]
    outputs = []
    for run in ("a", "b"):
        pipe = Pipeline.open(cfg, tmp_path / run)
        for raw in emails:
            pipe.ingest_email(raw)
        pipe.label(1, "spam")
        outputs.append(((tmp_path / run / CLUSTER_FILE).read_bytes(), (tmp_path / run / INDEX_FILE).read_bytes(),
                        histogram_csv(pipe.store), lifespan_csv(pipe.store)))
    same = [x == y for x, y in zip(*outputs)]
    ok = record(4, all(same), f"cluster file/index file/histogram csv/lifespan csv identical: {same}, "
                              f"{len(emails)} emails")
    assert ok


# -- 5 ------------------------------------------------------------------------


def image_fixtures():
    rng = np.random.default_rng(21)
    out = [s.image.pixels for s in generate(CampaignSpec(seed=9, n_kits=10, variants_per_kit=2, canvas=(120, 160)))]
    for _ in range(10):
        h, w = rng.integers(1, 90, 2)
        out.append(rng.integers(0, 256, (h, w, 3), dtype=np.uint8))
    for _ in range(10):
        px = np.full((100, 80, 3), 255, np.uint8)
        y, x = rng.integers(0, 60, 2)
        px[y:y + rng.integers(5, 40), x:x + rng.integers(5, 20)] = rng.integers(0, 240, 3)
        out.append(px)
    for _ in range(5):
        lo = int(rng.integers(0, 200))
        out.append(rng.integers(lo, lo + 3, (30, 30, 3), dtype=np.uint8))
    for v in (0, 17, 128, 249, 255):
        out.append(np.full((40, 50, 3), v, np.uint8))
    return out


def html_fixtures():
    rng = np.random.default_rng(22)
    pieces = ['<div class="banner">EXTERNAL SENDER</div>', "<p>CAUTION: this email came from outside</p>",
              '<table><tr><td id="disclaimer-1">legal text</td></tr></table>', "<p>Warning: keep me</p>",
              '<div class="note"><div class="banner-ext"><p>x</p></div></div>', "<p>WARNING! ext</p>",
              "<h1>Offer</h1>", '<div class="main"><p>body copy</p></div>', "<span>plain</span>"]
    docs = []
    for _ in range(50):
        body = "".join(pieces[i] for i in rng.integers(0, len(pieces), rng.integers(1, 6)))
        docs.append(f"<html><body>{body}</body></html>" if rng.random() < 0.7 else body)
    return docs


def test_criterion_5_image_and_banner_invariants():
    cfg = PreprocessConfig()
    images = image_fixtures()
    pats = BannerPatternSet.default()
    failures = []
    for i, px in enumerate(images):
        img = Screenshot(px)
        norm = normalize_minmax(img).pixels
        if px.min() == px.max():
            if norm.any():
                failures.append(f"img{i}: constant not zeroed")
        elif (norm.min(), norm.max()) != (0, 255):
            failures.append(f"img{i}: range {norm.min()}..{norm.max()}")
        once = trim_whitespace(img, cfg)
        if trim_whitespace(once, cfg) != once:
            failures.append(f"img{i}: trim not idempotent")
    removed_total = 0
    for i, html in enumerate(html_fixtures()):
        once, removed = strip_banners(html, pats)
        removed_total += removed
        if strip_banners(once, pats) != (once, 0):
            failures.append(f"html{i}: strip not idempotent")
        if "EXTERNAL" in lxml.html.fromstring(once or "<p></p>").text_content():
            failures.append(f"html{i}: banner survived")
    zero = embed_reference(Screenshot(np.full((64, 64, 3), 77, np.uint8)))
    if not (zero.is_zero and cosine(zero, zero) == 1.0):
        failures.append("constant image does not embed to zero / cosine(0,0) != 1")
    ok = record(5, not failures, f"{len(images)} image + 50 html fixtures, {removed_total} banners removed, "
                                 f"{len(failures)} violations {failures[:3]}")
    assert ok


# -- 6 ------------------------------------------------------------------------


def test_criterion_6_histogram_fixture():
    s = ClusterStore(0.99)
    basis = np.eye(5)
    for cid, n in enumerate((1, 1, 3, 4, 4)):
        for j in range(n):
            s.assign(f"c{cid}m{j}", ev(basis[cid]), float(j))
    h = s.size_histogram()
    ok = record(6, h.buckets == [(1, 2), (3, 1), (4, 2)] and abs(h.singleton_fraction - 0.40) <= 1e-12,
                f"histogram {h.buckets}, singleton fraction {h.singleton_fraction:.2f}")
    assert ok


@pytest.mark.xfail(strict=True, reason="3,390 / 20,215 is 16.77%; 2.92% is 3,390 over the ~116K emails")
def test_criterion_6_published_fraction():
    pct = 100 * singleton_fraction(3390, 20215)
    ok = record(6, abs(pct - 2.92) <= 0.01,
                f"3390/20215 = {pct:.2f}% vs published 2.92% (3390/116000 = {100 * 3390 / 116000:.2f}%)")
    assert ok


# -- 7 ------------------------------------------------------------------------


def test_criterion_7_end_to_end_conviction(tmp_path):
    cfg = make_config(tmp_path)
    fixtures = Path(cfg.render.fixture_dir)
    kit = generate(CampaignSpec(seed=7, n_kits=2, variants_per_kit=2))
    a = html_email("<html><body><h1>Your parcel is on hold</h1><p>Pay the fee today.</p></body></html>")
    b = html_email("<html><body><h1>Delivery paused</h1><p>A small fee is due now.</p></body></html>",
                   subject="re-send")
    c = html_email("<html><body><h1>Team newsletter</h1><p>Minutes attached.</p></body></html>")
    store_fixture(fixtures, a, kit[0].image.pixels)
    store_fixture(fixtures, b, kit[1].image.pixels)   # same kit, another variant
    store_fixture(fixtures, c, kit[2].image.pixels)   # a different kit
    pipe = Pipeline.open(cfg, tmp_path / "data")
    cid = pipe.ingest_email(a).cluster_id
    pipe.label(cid, "spam")
    vb, vc = pipe.score_email(b), pipe.score_email(c)
    tau = cfg.cluster.tau
    ok = record(7, vb.decision == "spam" and vb.score >= tau and vc.decision == "unknown",
                f"B {vb.decision} (score {vb.score:.4f}, tau {tau}), C {vc.decision} (score {vc.score:.4f})")
    assert ok


# -- 8 ------------------------------------------------------------------------


def test_criterion_8_persistence(tmp_path):
    vecs = random_unit(500, 64, 31)
    queries = [EmbeddingVector.normalized(q, BACKEND) for q in random_unit(20, 64, 32)]
    store = ClusterStore(0.3)
    indexes = {k: VectorIndex(64, BACKEND, k) for k in ("flat", "hnsw")}
    for i, v in enumerate(vecs):
        for idx in indexes.values():
            idx.insert(f"e{i}", ev(v))
        store.assign(f"e{i}", ev(v), float(i))
    store.label_cluster(1, "spam")

    def answers(idxs, st):
        return ([[(h.email_id, h.score) for h in idx.search_knn(q, 10)] for idx in idxs.values() for q in queries],
                [[h.email_id for h in idx.search_range(q, 0.2)] for idx in idxs.values() for q in queries],
                [st.verdict(q) for q in queries])

    before = answers(indexes, store)
    files = {}
    for kind, idx in indexes.items():
        files[kind] = tmp_path / f"{kind}.pvec"
        idx.save(files[kind])
    files["clusters"] = tmp_path / "c.pclu"
    store.save(files["clusters"])
    loaded = {k: VectorIndex.load(files[k]) for k in ("flat", "hnsw")}
    same = answers(loaded, ClusterStore.load(files["clusters"])) == before

    cuts = silent = 0
    for path in files.values():
        data = path.read_bytes()
        loader = ClusterStore.from_bytes if path.suffix == ".pclu" else VectorIndex.from_bytes
        for cut in sorted(set(np.linspace(0, len(data) - 1, 40).astype(int).tolist() + [len(data) - 1])):
            cuts += 1
            try:
                loader(data[:cut])
                silent += 1
            except CorruptFile:
                pass
    ok = record(8, same and silent == 0,
                f"20 queries x (knn, range, verdict) identical={same}; {cuts - silent}/{cuts} truncations "
                f"raised CorruptFile")
    assert ok
