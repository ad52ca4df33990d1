import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from visimail.embed import (
    REFERENCE_BACKEND,
    REFERENCE_DIM,
    EmbedBackendConfig,
    EmbeddingVector,
    cosine,
    cosine_many,
    embed,
    embed_reference,
    grid_means,
    grid_sums_nb,
    grid_sums_np,
    luminance,
)
from visimail.errors import BackendFailed, BackendMismatch, ConfigError, DimMismatch
from visimail.render import Screenshot

PY = "python3"


def shot(px):
    return Screenshot(np.ascontiguousarray(px, dtype=np.uint8))


def grid_oracle(px):
    """Area-averaged cells by explicit fractional overlap, pixel by pixel."""
    lum = luminance(px).astype(np.float64)
    h, w = lum.shape
    out = np.zeros((16, 16))
    for cy in range(16):
        y0, y1 = cy * h / 16, (cy + 1) * h / 16
        for cx in range(16):
            x0, x1 = cx * w / 16, (cx + 1) * w / 16
            acc = 0.0
            for y in range(math.floor(y0), math.ceil(y1)):
                fy = min(y + 1, y1) - max(y, y0)
                for x in range(math.floor(x0), math.ceil(x1)):
                    fx = min(x + 1, x1) - max(x, x0)
                    acc += fy * fx * lum[y, x]
            out[cy, cx] = acc / ((y1 - y0) * (x1 - x0))
    return out


def test_luminance_rounding():
    px = np.array([[[255, 255, 255], [0, 0, 0], [255, 0, 0], [1, 1, 1]]], np.uint8)
    assert luminance(px).tolist() == [[255, 0, 76, 1]]


@pytest.mark.parametrize("shape", [(16, 16), (23, 41), (5, 7), (600, 1024)])
def test_grid_means_match_fractional_oracle(shape, backend):
    px = np.random.default_rng(shape[0]).integers(0, 256, shape + (3,), dtype=np.uint8)
    if shape[0] > 100:
        px = px[::8, ::8].copy()
    assert np.allclose(grid_means(shot(px)), grid_oracle(px), atol=1e-9)


def test_constant_image_gives_zero_vector(backend):
    v = embed_reference(shot(np.full((40, 30, 3), 200)))
    assert v.is_zero and v.dim == REFERENCE_DIM and v.backend_id == REFERENCE_BACKEND


def test_half_black_half_white(backend):
    px = np.zeros((32, 32, 3), np.uint8)
    px[:, 16:] = 255
    v = embed_reference(shot(px)).values.reshape(16, 16)
    assert np.allclose(v[:, :8], -1 / 16) and np.allclose(v[:, 8:], 1 / 16)
    assert np.linalg.norm(v) == pytest.approx(1.0)


def test_integer_upscale_gives_identical_vector(backend):
    px = np.random.default_rng(4).integers(0, 256, (48, 32, 3), dtype=np.uint8)
    big = px.repeat(2, axis=0).repeat(2, axis=1)
    assert embed_reference(shot(px)) == embed_reference(shot(big))


def test_intensity_shift_invariance(backend):
    px = np.random.default_rng(5).integers(0, 200, (40, 40, 3), dtype=np.uint8)
    a = embed_reference(shot(px))
    b = embed_reference(shot(px + 50))
    assert cosine(a, b) == pytest.approx(1.0, abs=1e-12)


def test_embedding_is_deterministic(backend):
    px = np.random.default_rng(6).integers(0, 256, (70, 90, 3), dtype=np.uint8)
    assert embed_reference(shot(px)) == embed_reference(shot(px.copy()))


@settings(max_examples=60, deadline=None)
@given(arrays(np.int64, st.tuples(st.integers(1, 70), st.integers(1, 70)), elements=st.integers(0, 255)))
def test_grid_kernels_agree(lum):
    assert np.array_equal(grid_sums_nb(lum), grid_sums_np(lum))


def test_backends_give_equal_vectors(monkeypatch):
    from visimail import _accel

    px = np.random.default_rng(8).integers(0, 256, (97, 113, 3), dtype=np.uint8)
    monkeypatch.setattr(_accel, "USE_NUMBA", True)
    a = embed_reference(shot(px))
    monkeypatch.setattr(_accel, "USE_NUMBA", False)
    assert embed_reference(shot(px)) == a


# -- cosine -------------------------------------------------------------------


def vec(values, backend="b"):
    return EmbeddingVector.normalized(values, backend)


def test_cosine_cases():
    assert cosine(vec([1, 0]), vec([1, 0])) == 1.0
    assert cosine(vec([1, 0]), vec([0, 1])) == 0.0
    assert cosine(vec([1, 0]), vec([-1, 0])) == -1.0
    assert cosine(vec([1, 1]), vec([1, 0])) == pytest.approx(1 / math.sqrt(2))
    zero = vec([0, 0])
    assert cosine(zero, zero) == 1.0
    assert cosine(zero, vec([1, 0])) == 0.0 and cosine(vec([0, 1]), zero) == 0.0


def test_cosine_checks_compatibility():
    with pytest.raises(DimMismatch):
        cosine(vec([1, 0]), vec([1, 0, 0]))
    with pytest.raises(BackendMismatch):
        cosine(vec([1, 0], "a"), vec([1, 0], "b"))


def test_cosine_many_matches_pairwise():
    rows = [vec(r) for r in ([1, 0, 0], [0, 0, 0], [0.6, 0.8, 0], [-1, 0, 0])]
    m = np.stack([r.values for r in rows])
    zero = np.array([r.is_zero for r in rows])
    for q in (vec([1, 2, 3]), vec([0, 0, 0])):
        assert np.allclose(cosine_many(m, zero, q.values), [cosine(r, q) for r in rows])


def test_vector_norm_invariant():
    with pytest.raises(ValueError):
        EmbeddingVector(np.array([0.5, 0.5]), "x")
    with pytest.raises(ValueError):
        EmbeddingVector(np.zeros((2, 2)), "x")
    v = vec([3, 4])
    with pytest.raises(ValueError):
        v.values[0] = 1.0


# -- external backend ---------------------------------------------------------


def ext(script, tmp_path, **kw):
    path = tmp_path / "emb.py"
    path.write_text(script)
    return EmbedBackendConfig(kind="external", command_template=f"{PY} {path} {{input_png}} {{output_vec}}",
                              backend_id="stub-v1", **kw)


def test_external_constant_output_is_normalized(tmp_path):
    cfg = ext("import sys\nopen(sys.argv[2], 'w').write('1\\n' * 512)\n", tmp_path, dim=512)
    v = embed(shot(np.zeros((4, 4, 3))), cfg)
    assert v.backend_id == "stub-v1"
    assert np.allclose(v.values, 1 / math.sqrt(512))


def test_external_wrong_length_is_dim_mismatch(tmp_path):
    cfg = ext("import sys\nopen(sys.argv[2], 'w').write('0.5\\n' * 100)\n", tmp_path, dim=512)
    with pytest.raises(DimMismatch):
        embed(shot(np.zeros((4, 4, 3))), cfg)


def test_external_sees_the_screenshot(tmp_path):
    # the stub echoes the first eight pixel values, proving the png reached it
    script = ("import sys\nfrom PIL import Image\n"
              "px = list(Image.open(sys.argv[1]).convert('L').getdata())[:8]\n"
              "open(sys.argv[2], 'w').write('\\n'.join(str(p) for p in px))\n")
    px = np.zeros((1, 8, 3), np.uint8)
    px[0, :, :] = np.arange(1, 9)[:, None] * 10
    v = embed(shot(px), ext(script, tmp_path, dim=8))
    expect = np.arange(1, 9) * 10.0
    assert np.allclose(v.values, expect / np.linalg.norm(expect))


def test_external_failure(tmp_path):
    with pytest.raises(BackendFailed) as err:
        embed(shot(np.zeros((2, 2, 3))), ext("import sys\nsys.exit(4)\n", tmp_path))
    assert err.value.returncode == 4
    with pytest.raises(BackendFailed):
        embed(shot(np.zeros((2, 2, 3))), ext("import sys\nopen(sys.argv[2], 'w').write('x\\n')\n", tmp_path))


@pytest.mark.parametrize("cfg", [EmbedBackendConfig(kind="x"), EmbedBackendConfig(dim=128),
                                 EmbedBackendConfig(kind="external", command_template="e {input_png}")])
def test_invalid_config(cfg):
    with pytest.raises(ConfigError):
        cfg.validate()
