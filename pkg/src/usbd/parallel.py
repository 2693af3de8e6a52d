"""Optional thread parallelism, capped by the USBD_THREADS environment variable.

Results are always reduced in input order, so parallel and serial runs are
bit-identical. Default is serial.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

from .errors import ConfigError


def thread_count() -> int:
    raw = os.environ.get("USBD_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"USBD_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"USBD_THREADS must be >= 1, got {n}")
    return n


def map_ordered(fn, items):
    """Like map(fn, items) but possibly threaded; order is preserved."""
    items = list(items)
    n = thread_count()
    if n == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
