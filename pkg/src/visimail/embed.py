"""Screenshot embeddings and cosine similarity.

``embed_reference`` is a deterministic layout fingerprint: a mean-subtracted
16x16 grid of area-averaged luminance. Real deployments plug a learned model
in through ``embed_external``.
"""
from __future__ import annotations

import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _accel, _proc
from ._accel import njit
from .errors import BackendFailed, BackendMismatch, BackendTimeout, ConfigError, DimMismatch
from .render import Screenshot, write_png

GRID = 16
REFERENCE_BACKEND = "ref-grid-v1"
REFERENCE_DIM = GRID * GRID
NORM_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class EmbeddingVector:
    values: np.ndarray
    backend_id: str

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise ValueError("embedding values must be one-dimensional")
        norm = float(np.sqrt(v @ v))
        if norm != 0.0 and abs(norm - 1.0) > NORM_TOL:
            raise ValueError(f"embedding norm {norm} is neither 0 nor 1")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def normalized(cls, values, backend_id: str) -> "EmbeddingVector":
        v = np.asarray(values, dtype=np.float64)
        norm = float(np.sqrt(v @ v))
        return cls(v / norm if norm > 0 else np.zeros_like(v), backend_id)

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    @property
    def is_zero(self) -> bool:
        return not self.values.any()

    def __eq__(self, other):
        if not isinstance(other, EmbeddingVector):
            return NotImplemented
        return self.backend_id == other.backend_id and np.array_equal(self.values, other.values)


@dataclass(frozen=True)
class EmbedBackendConfig:
    kind: str = "reference"
    dim: int = REFERENCE_DIM
    command_template: str = ""
    timeout: float = 60.0
    backend_id: str = "external"

    def validate(self) -> None:
        if self.kind not in ("reference", "external"):
            raise ConfigError(f"embed.kind must be reference or external, not {self.kind!r}")
        if self.dim < 8:
            raise ConfigError("embed.dim must be >= 8")
        if self.kind == "reference" and self.dim != REFERENCE_DIM:
            raise ConfigError(f"the reference embedder produces {REFERENCE_DIM} dimensions")
        if self.kind == "external":
            for p in ("input_png", "output_vec"):
                if "{" + p + "}" not in self.command_template:
                    raise ConfigError(f"embed.command_template lacks {{{p}}}")

    @property
    def effective_backend_id(self) -> str:
        return REFERENCE_BACKEND if self.kind == "reference" else self.backend_id


def luminance(px: np.ndarray) -> np.ndarray:
    """round(0.299R + 0.587G + 0.114B), half up, in exact integer arithmetic."""
    p = px.astype(np.int64)
    return (299 * p[..., 0] + 587 * p[..., 1] + 114 * p[..., 2] + 500) // 1000


def _overlap_weights(n: int) -> np.ndarray:
    """[GRID, n] overlaps between grid cells and pixels, in 1/GRID-pixel units."""
    cell = np.arange(GRID, dtype=np.int64)[:, None]
    pix = np.arange(n, dtype=np.int64)[None, :]
    lo = np.maximum(cell * n, pix * GRID)
    hi = np.minimum((cell + 1) * n, (pix + 1) * GRID)
    return np.maximum(hi - lo, 0)


@njit
def grid_sums_nb(lum):
    h, w = lum.shape
    rows = np.zeros((h, GRID), dtype=np.int64)
    for y in range(h):
        for x in range(w):
            v = lum[y, x]
            lo_u = x * GRID
            for cx in range(lo_u // w, min((lo_u + GRID - 1) // w, GRID - 1) + 1):
                ov = min(lo_u + GRID, (cx + 1) * w) - max(lo_u, cx * w)
                if ov > 0:
                    rows[y, cx] += v * ov
    out = np.zeros((GRID, GRID), dtype=np.int64)
    for y in range(h):
        lo_u = y * GRID
        for cy in range(lo_u // h, min((lo_u + GRID - 1) // h, GRID - 1) + 1):
            ov = min(lo_u + GRID, (cy + 1) * h) - max(lo_u, cy * h)
            if ov > 0:
                for cx in range(GRID):
                    out[cy, cx] += rows[y, cx] * ov
    return out


def grid_sums_np(lum):
    h, w = lum.shape
    wy = _overlap_weights(h).astype(np.float64)
    wx = _overlap_weights(w).astype(np.float64)
    # integer-valued float64 products stay exact below 2**53
    return (wy @ lum.astype(np.float64) @ wx.T).astype(np.int64)


def grid_means(img: Screenshot) -> np.ndarray:
    lum = luminance(img.pixels)
    kernel = grid_sums_nb if _accel.USE_NUMBA else grid_sums_np
    sums = kernel(lum)
    return sums.astype(np.float64) / float(img.width * img.height)


def embed_reference(img: Screenshot) -> EmbeddingVector:
    cells = grid_means(img).ravel()
    centred = cells - cells.mean()
    if not centred.any():
        return EmbeddingVector(np.zeros(REFERENCE_DIM), REFERENCE_BACKEND)
    return EmbeddingVector.normalized(centred, REFERENCE_BACKEND)


def parse_vector_text(text: str) -> np.ndarray:
    values = [float(line) for line in text.splitlines() if line.strip()]
    return np.asarray(values, dtype=np.float64)


def embed_external(img: Screenshot, cfg: EmbedBackendConfig) -> EmbeddingVector:
    cfg.validate()
    if cfg.kind != "external":
        raise ConfigError("embed_external needs an external backend config")
    with tempfile.TemporaryDirectory(prefix="visimail-embed-") as tmp:
        src = Path(tmp) / "shot.png"
        out = Path(tmp) / "vector.txt"
        write_png(img, src)
        argv = _proc.build_argv(cfg.command_template, {"input_png": str(src), "output_vec": str(out)})
        try:
            proc = _proc.run_capped(argv, cfg.timeout)
        except subprocess.TimeoutExpired:
            raise BackendTimeout(f"embedder exceeded {cfg.timeout}s") from None
        except OSError as exc:
            raise BackendFailed(f"could not start embedder: {exc}") from exc
        if proc.returncode != 0:
            raise BackendFailed(f"embedder exited with {proc.returncode}", proc.returncode,
                                proc.stderr.decode("utf-8", "replace"))
        try:
            values = parse_vector_text(out.read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise BackendFailed(f"unreadable embedder output: {exc}") from exc
    if values.shape[0] != cfg.dim:
        raise DimMismatch(f"embedder returned {values.shape[0]} values, expected {cfg.dim}")
    if not np.all(np.isfinite(values)):
        raise BackendFailed("embedder returned non-finite values")
    return EmbeddingVector.normalized(values, cfg.backend_id)


def embed(img: Screenshot, cfg: EmbedBackendConfig) -> EmbeddingVector:
    if cfg.kind == "reference":
        return embed_reference(img)
    return embed_external(img, cfg)


def check_compatible(u: EmbeddingVector, v: EmbeddingVector) -> None:
    if u.dim != v.dim:
        raise DimMismatch(f"dimension {u.dim} != {v.dim}")
    if u.backend_id != v.backend_id:
        raise BackendMismatch(f"backend {u.backend_id!r} != {v.backend_id!r}")


def cosine(u: EmbeddingVector, v: EmbeddingVector) -> float:
    """Dot product of unit vectors; two zero vectors score 1.0, one zero scores 0.0."""
    check_compatible(u, v)
    uz, vz = u.is_zero, v.is_zero
    if uz and vz:
        return 1.0
    if uz or vz:
        return 0.0
    return min(1.0, max(-1.0, float(u.values @ v.values)))


def cosine_many(matrix: np.ndarray, zero_rows: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Cosine of ``q`` against each row of ``matrix`` with the zero-vector conventions."""
    if not q.any():
        return np.where(zero_rows, 1.0, 0.0)
    return np.clip(matrix @ q, -1.0, 1.0)

