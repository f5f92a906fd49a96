"""Ordered parallel map for tile-level work."""

# std
from __future__ import annotations
from concurrent.futures import ThreadPoolExecutor
from os import environ as ENV
from typing import Callable
from typing import Iterable
from typing import List
from typing import TypeVar
import logging

log = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

DEFAULT_THREADS = int(ENV.get("CHANGEWATCH_THREADS", "1") or "1")
"""Default worker count (`--threads`)."""


def map_ordered(fn: Callable[[T], R], items: Iterable[T], threads: int = 1) -> List[R]:
    """Apply `fn` to `items`; results are in input order for any `threads`.

    >>> map_ordered(lambda x: x * 2, [1, 2, 3], threads=2)
    [2, 4, 6]
    """
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    log.debug(f"map {len(items)} items on {threads} threads")
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
