from __future__ import annotations

import base64
from pathlib import Path

import numpy as np
import pytest

from visimail import _accel
from visimail.mailparse import BannerPatternSet
from visimail.pipeline import render_input
from visimail.render import Screenshot, fixture_name, write_png

DATE = "Mon, 01 Apr 2024 10:00:00 +0000"
DATE_TS = 1711965600.0


@pytest.fixture(params=["numba", "numpy"])
def backend(request, monkeypatch):
    """Run a test once per kernel backend."""
    if request.param == "numba" and not _accel.HAVE_NUMBA:
        pytest.skip("numba not installed")
    monkeypatch.setattr(_accel, "USE_NUMBA", request.param == "numba")
    return request.param


def html_email(html: str, date: str | None = DATE, subject: str = "hi", charset: str = "utf-8",
               cte: str | None = None) -> bytes:
    headers = ["From: sender@example.com", "To: rcpt@example.org", f"Subject: {subject}"]
    if date:
        headers.append(f"Date: {date}")
    headers.append("MIME-Version: 1.0")
    headers.append(f"Content-Type: text/html; charset={charset}")
    body = html.encode(charset)
    if cte == "base64":
        headers.append("Content-Transfer-Encoding: base64")
        body = base64.encodebytes(body).replace(b"\n", b"\r\n")
    return ("\r\n".join(headers) + "\r\n\r\n").encode() + body + b"\r\n"


def alternative_email(plain: str, html: str, date: str = DATE) -> bytes:
    encoded = base64.encodebytes(html.encode("utf-8")).decode().replace("\n", "\r\n")
    return (
        "From: a@example.com\r\nTo: b@example.org\r\nSubject: alt\r\n"
        f"Date: {date}\r\nMIME-Version: 1.0\r\n"
        'Content-Type: multipart/alternative; boundary="XYZ"\r\n\r\n'
        "preamble\r\n"
        "--XYZ\r\nContent-Type: text/plain; charset=us-ascii\r\n\r\n"
        f"{plain}\r\n"
        "--XYZ\r\nContent-Type: text/html; charset=utf-8\r\nContent-Transfer-Encoding: base64\r\n\r\n"
        f"{encoded}"
        "--XYZ--\r\n"
    ).encode()


def store_fixture(fixture_dir: Path, raw: bytes, pixels: np.ndarray,
                  banners: BannerPatternSet | None = None) -> str:
    """Save ``pixels`` as the fixture the renderer will load for ``raw``."""
    _, html = render_input(raw, banners or BannerPatternSet.default(), fallback_time=0.0)
    name = fixture_name(html)
    write_png(Screenshot(pixels), fixture_dir / name)
    return name


def random_unit(n: int, dim: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def block_pattern(seed: int, noise: int = 0, size: int = 160) -> np.ndarray:
    """A coarse random block layout; the same seed with small ``noise`` stays visually close."""
    rng = np.random.default_rng(seed)
    blocks = rng.integers(0, 256, (8, 8, 3))
    px = blocks.repeat(size // 8, axis=0).repeat(size // 8, axis=1)
    if noise:
        jitter = np.random.default_rng([seed, noise]).integers(-noise, noise + 1, px.shape)
        px = px + jitter
    return np.clip(px, 0, 255).astype(np.uint8)


def make_config(tmp_path: Path, *sets: str):
    from visimail.config import load_config

    fixtures = tmp_path / "fixtures"
    fixtures.mkdir(exist_ok=True)
    return load_config(overrides=(f"render.fixture_dir={fixtures}", *sets), env={})


class Mailer:
    """Builds emails whose rendered screenshot is a chosen pixel array."""

    def __init__(self, fixture_dir: Path):
        self.fixture_dir = Path(fixture_dir)
        self.n = 0

    def __call__(self, pixels: np.ndarray, date: str | None = DATE, subject: str | None = None) -> bytes:
        self.n += 1
        raw = html_email(f"<html><body><p>message {self.n}</p></body></html>", date=date,
                         subject=subject or f"m{self.n}")
        store_fixture(self.fixture_dir, raw, pixels)
        return raw


@pytest.fixture
def cfg(tmp_path):
    return make_config(tmp_path, "index.kind=flat")


@pytest.fixture
def mailer(cfg):
    return Mailer(Path(cfg.render.fixture_dir))


# -- acceptance report ----------------------------------------------------------

ACCEPTANCE: dict[int, list[tuple[bool, str]]] = {}


def record(criterion: int, ok: bool, detail: str) -> bool:
    """Note one checked part of an acceptance criterion for the end-of-run report."""
    ACCEPTANCE.setdefault(criterion, []).append((bool(ok), detail))
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[n]
        verdict = "PASS" if all(ok for ok, _ in parts) else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {verdict}  " + "; ".join(d for _, d in parts))
