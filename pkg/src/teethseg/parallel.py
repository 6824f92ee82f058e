"""Worker pool bounded by ``TEETHSEG_THREADS`` (default 1).

Only per-sample work goes through here. Results come back in input order and
every reduction over them happens sequentially, so outputs do not depend on
the worker count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")

ENV_VAR = "TEETHSEG_THREADS"


def worker_count() -> int:
    raw = os.environ.get(ENV_VAR, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{ENV_VAR} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"{ENV_VAR} must be a positive integer, got {raw!r}")
    return n


def parallel_map(fn: Callable[[T], R], items: Iterable[T]) -> list[R]:
    items = list(items)
    n = min(worker_count(), len(items))
    if n <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
