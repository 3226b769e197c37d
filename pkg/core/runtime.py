from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, List, TypeVar

import numpy as np


T = TypeVar("T")
R = TypeVar("R")

THREADS_ENV_VAR = "DOPS_THREADS"


def default_threads() -> int:
    raw = os.environ.get(THREADS_ENV_VAR, "").strip()
    if raw.isdigit() and int(raw) > 0:
        return int(raw)
    return 1


@dataclass
class RuntimeSettings:
    """
    Process-wide execution knobs.

    precision:
        "double" (test mode) creates float64 tensors, "single" float32.
    deterministic:
        forces serial execution so every reduction runs in a fixed order.
    """
    threads: int = 1
    deterministic: bool = True
    precision: str = "double"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float64 if self.precision == "double" else np.float32)


RUNTIME = RuntimeSettings(threads=default_threads())


def configure(
    threads: int | None = None,
    deterministic: bool | None = None,
    precision: str | None = None,
) -> RuntimeSettings:
    if threads is not None:
        RUNTIME.threads = max(1, int(threads))
    if deterministic is not None:
        RUNTIME.deterministic = bool(deterministic)
    if precision is not None:
        if precision not in ("double", "single"):
            raise ValueError(f"Unknown precision {precision!r}")
        RUNTIME.precision = precision
    return RUNTIME


def float_dtype() -> np.dtype:
    return RUNTIME.dtype


def parallel_map(fn: Callable[[T], R], items: Iterable[T]) -> List[R]:
    """Map ``fn`` over ``items``, results always in input order."""
    items = list(items)
    if RUNTIME.deterministic or RUNTIME.threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=RUNTIME.threads) as pool:
        return list(pool.map(fn, items))
