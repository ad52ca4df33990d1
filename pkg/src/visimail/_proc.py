"""Capped subprocess execution for the external renderer and embedder."""
from __future__ import annotations

import shlex
import subprocess
import threading

DEFAULT_PROCESS_CAP = 4

_cap_lock = threading.Lock()
_cap = DEFAULT_PROCESS_CAP
_slots = threading.BoundedSemaphore(DEFAULT_PROCESS_CAP)


def set_process_cap(n: int) -> None:
    global _cap, _slots
    if n < 1:
        raise ValueError("process cap must be >= 1")
    with _cap_lock:
        if n != _cap:
            _cap = n
            _slots = threading.BoundedSemaphore(n)


def process_cap() -> int:
    return _cap


def build_argv(template: str, values: dict[str, str]) -> list[str]:
    """Split the template shell-style, then substitute placeholders per argument.

    Substituting after splitting keeps paths with spaces in one argv slot and
    never hands the template to a shell.
    """
    argv = []
    for arg in shlex.split(template):
        for key, value in values.items():
            arg = arg.replace("{" + key + "}", value)
        argv.append(arg)
    return argv


def run_capped(argv: list[str], timeout: float) -> subprocess.CompletedProcess:
    """Run ``argv`` holding one process slot; raises ``subprocess.TimeoutExpired``."""
    slots = _slots
    with slots:
        return subprocess.run(argv, capture_output=True, timeout=timeout, check=False)
