"""Deterministic-mode switch and small shared helpers."""

from __future__ import annotations

import contextlib
import os

import torch

DETERMINISTIC_ENV = "CKD_DETERMINISTIC"


def env_deterministic() -> bool:
    return os.environ.get(DETERMINISTIC_ENV, "0") not in ("", "0", "false", "False")


def set_deterministic(enabled: bool = True) -> None:
    torch.use_deterministic_algorithms(enabled)
    if torch.backends.cudnn.is_available():
        torch.backends.cudnn.deterministic = enabled
        torch.backends.cudnn.benchmark = not enabled


@contextlib.contextmanager
def deterministic(enabled: bool = True):
    previous = torch.are_deterministic_algorithms_enabled()
    set_deterministic(enabled)
    try:
        yield
    finally:
        set_deterministic(previous)
