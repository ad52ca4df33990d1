"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--hnsw-n 2000] [--repeat 5]

Each kernel pair is checked for identical output before it is timed. The
numba timings exclude the first (compiling) call.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from visimail import _accel, embed, imgproc
from visimail.render import Screenshot
from visimail.synthcorpus import CampaignSpec, generate
from visimail.vindex import HNSWGraph


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def bench_sharpen(img: Screenshot, repeat: int):
    cfg = imgproc.PreprocessConfig()
    w = imgproc.gaussian_weights(cfg.sharpen_sigma)
    args = (img.pixels, w, cfg.sharpen_amount, cfg.sharpen_edge_threshold)
    assert np.array_equal(imgproc.sharpen_nb(*args), imgproc.sharpen_np(*args))
    return best_of(lambda: imgproc.sharpen_nb(*args), repeat), best_of(lambda: imgproc.sharpen_np(*args), repeat)


def bench_grid(img: Screenshot, repeat: int):
    lum = embed.luminance(img.pixels)
    assert np.array_equal(embed.grid_sums_nb(lum), embed.grid_sums_np(lum))
    return best_of(lambda: embed.grid_sums_nb(lum), repeat), best_of(lambda: embed.grid_sums_np(lum), repeat)


def bench_hnsw(n: int, dim: int, n_queries: int):
    rng = np.random.default_rng(0)
    vecs = rng.standard_normal((n, dim)).astype(np.float32)
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    queries = vecs[rng.choice(n, n_queries, replace=False)].astype(np.float64)
    out = {}
    graphs = {}
    for use in (True, False):
        _accel.USE_NUMBA = use
        g = HNSWGraph(capacity=n)
        g.insert(vecs[:1])  # compile outside the timed region
        g = HNSWGraph(capacity=n)
        t = time.perf_counter()
        for i in range(n):
            g.insert(vecs[: i + 1])
        build = time.perf_counter() - t
        t = time.perf_counter()
        for q in queries:
            g.search(vecs, q, 64)
        out[use] = (build, time.perf_counter() - t)
        graphs[use] = g
    _accel.USE_NUMBA = _accel.HAVE_NUMBA
    same = all(np.array_equal(a, b) for a, b in zip(graphs[True].arrays().values(), graphs[False].arrays().values()))
    return out[True], out[False], same


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--hnsw-n", type=int, default=2000)
    ap.add_argument("--queries", type=int, default=200)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    img = generate(CampaignSpec(n_kits=1, variants_per_kit=1))[0].image
    print(f"image {img.width}x{img.height}, best of {args.repeat}")
    print(f"{'kernel':<22}{'numba s':>12}{'numpy s':>12}{'speedup':>10}")
    for name, (nb, np_) in (("sharpen", bench_sharpen(img, args.repeat)), ("grid_sums", bench_grid(img, args.repeat))):
        print(f"{name:<22}{nb:>12.5f}{np_:>12.5f}{np_ / nb:>9.1f}x")
    (nb_build, nb_q), (np_build, np_q), same = bench_hnsw(args.hnsw_n, embed.REFERENCE_DIM, args.queries)
    print(f"{'hnsw build n=' + str(args.hnsw_n):<22}{nb_build:>12.3f}{np_build:>12.3f}{np_build / nb_build:>9.1f}x")
    print(f"{'hnsw ' + str(args.queries) + ' queries':<22}{nb_q:>12.3f}{np_q:>12.3f}{np_q / nb_q:>9.1f}x")
    print(f"identical graphs: {same}")


if __name__ == "__main__":
    main()
