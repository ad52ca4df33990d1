"""HTML to Screenshot through an out-of-process renderer or a fixture store."""
from __future__ import annotations

import hashlib
import io
import os
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import _proc
from .errors import BadImage, ConfigError, FixtureMissing, RendererFailed, RendererTimeout

RENDER_PLACEHOLDERS = ("input_html", "output_png", "width")


@dataclass(frozen=True, eq=False)
class Screenshot:
    """RGB8 raster, ``pixels`` shaped (height, width, 3), row-major."""

    pixels: np.ndarray
    email_id: str = ""

    def __post_init__(self):
        px = self.pixels
        if px.dtype != np.uint8 or px.ndim != 3 or px.shape[2] != 3:
            raise BadImage(f"expected uint8 (h, w, 3) pixels, got {px.dtype} {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise BadImage("screenshot must be at least 1x1")
        if not px.flags.c_contiguous:
            object.__setattr__(self, "pixels", np.ascontiguousarray(px))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def buffer(self) -> bytes:
        return self.pixels.tobytes()

    def with_pixels(self, pixels: np.ndarray) -> "Screenshot":
        return Screenshot(pixels, self.email_id)

    def __eq__(self, other):
        if not isinstance(other, Screenshot):
            return NotImplemented
        return self.email_id == other.email_id and np.array_equal(self.pixels, other.pixels)


@dataclass(frozen=True)
class RendererConfig:
    mode: str = "fixture"
    command_template: str = ""
    viewport_width: int = 1024
    timeout: float = 30.0
    fixture_dir: str = ""

    def validate(self, check_paths: bool = True) -> None:
        if self.mode == "external":
            missing = [p for p in RENDER_PLACEHOLDERS if "{" + p + "}" not in self.command_template]
            if missing:
                raise ConfigError(f"render.command_template lacks placeholders: {', '.join(missing)}")
        elif self.mode == "fixture":
            if not self.fixture_dir:
                raise ConfigError("render.fixture_dir is required in fixture mode")
            if check_paths and not Path(self.fixture_dir).is_dir():
                raise ConfigError(f"render.fixture_dir does not exist: {self.fixture_dir}")
        else:
            raise ConfigError(f"render.mode must be external or fixture, not {self.mode!r}")
        if self.viewport_width < 1:
            raise ConfigError("render.viewport_width must be >= 1")
        if self.timeout <= 0:
            raise ConfigError("render.timeout must be > 0")


def fixture_name(html: str) -> str:
    return hashlib.sha256(html.encode("utf-8")).hexdigest() + ".png"


def decode_png(data: bytes) -> np.ndarray:
    """Decode PNG bytes to RGB8, compositing any alpha over white."""
    try:
        with Image.open(io.BytesIO(data)) as im:
            if im.format != "PNG":
                raise BadImage(f"expected PNG, got {im.format}")
            im.load()
            rgba = im.convert("RGBA")
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise BadImage(f"undecodable PNG: {exc}") from exc
    white = Image.new("RGBA", rgba.size, (255, 255, 255, 255))
    return np.asarray(Image.alpha_composite(white, rgba).convert("RGB"), dtype=np.uint8).copy()


def encode_png(shot: Screenshot) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(shot.pixels, "RGB").save(buf, format="PNG")
    return buf.getvalue()


def write_png(shot: Screenshot, path: str | os.PathLike) -> None:
    Path(path).write_bytes(encode_png(shot))


def read_png(path: str | os.PathLike, email_id: str = "") -> Screenshot:
    return Screenshot(decode_png(Path(path).read_bytes()), email_id)


def _render_fixture(html: str, email_id: str, cfg: RendererConfig) -> Screenshot:
    path = Path(cfg.fixture_dir) / fixture_name(html)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise FixtureMissing(f"no fixture {path.name} in {cfg.fixture_dir}") from None
    return Screenshot(decode_png(data), email_id)


def _render_external(html: str, email_id: str, cfg: RendererConfig) -> Screenshot:
    with tempfile.TemporaryDirectory(prefix="visimail-render-") as tmp:
        src = Path(tmp) / "email.html"
        out = Path(tmp) / "shot.png"
        src.write_text(html, encoding="utf-8")
        argv = _proc.build_argv(cfg.command_template, {
            "input_html": str(src), "output_png": str(out), "width": str(cfg.viewport_width),
        })
        try:
            proc = _proc.run_capped(argv, cfg.timeout)
        except subprocess.TimeoutExpired:
            raise RendererTimeout(f"renderer exceeded {cfg.timeout}s") from None
        except OSError as exc:
            raise RendererFailed(f"could not start renderer: {exc}") from exc
        stderr = proc.stderr.decode("utf-8", "replace")
        if proc.returncode != 0:
            raise RendererFailed(f"renderer exited with {proc.returncode}", proc.returncode, stderr)
        if not out.exists():
            raise BadImage("renderer produced no output PNG")
        return Screenshot(decode_png(out.read_bytes()), email_id)


def render(html: str, email_id: str, cfg: RendererConfig) -> Screenshot:
    cfg.validate(check_paths=False)
    if cfg.mode == "fixture":
        return _render_fixture(html, email_id, cfg)
    return _render_external(html, email_id, cfg)
