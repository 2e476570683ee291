"""Chunked execution over common paths.

Chunks have a fixed size that does not depend on the thread count, and each
chunk writes a disjoint slice of preallocated output. Results are therefore
byte-identical for any number of workers.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable

CHUNK = 128
_threads: int | None = None


def set_threads(n: int | None) -> None:
    global _threads
    if n is not None and n < 1:
        raise ValueError("thread count must be positive")
    _threads = n


def get_threads() -> int:
    return _threads or os.cpu_count() or 1


def chunks(K: int, size: int = CHUNK) -> list[slice]:
    return [slice(a, min(a + size, K)) for a in range(0, K, size)]


def run_chunks(fn: Callable[[slice], None], K: int, threads: int | None = None) -> None:
    parts = chunks(K)
    n = min(threads or get_threads(), len(parts))
    if n <= 1:
        for sl in parts:
            fn(sl)
        return
    with ThreadPoolExecutor(max_workers=n) as pool:
        for fut in [pool.submit(fn, sl) for sl in parts]:
            fut.result()
