"""Thread-parallel helpers.

Independent per-chart, per-component and per-boundary tasks run through
``asyncio.gather`` on worker threads. Results always come back in input order so
that downstream reductions stay deterministic.
"""

import asyncio
import concurrent.futures
from collections.abc import Callable, Coroutine, Iterable
from typing import Any, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def run_sync(coro: Coroutine[Any, Any, T], timeout: float | None = None) -> T:
    """
    Run a coroutine to completion from synchronous code.

    Uses a one-worker ThreadPoolExecutor around ``asyncio.run`` so it also works
    when the caller already sits inside a running event loop.

    Args:
        coro: The coroutine to execute
        timeout: Optional limit in seconds

    Returns:
        The coroutine's result
    """
    with concurrent.futures.ThreadPoolExecutor(max_workers=1) as executor:
        future = executor.submit(asyncio.run, coro)
        return future.result(timeout=timeout)


def gather_threads(fn: Callable[[T], R], items: Iterable[T]) -> list[R]:
    """
    Apply ``fn`` to every item on worker threads and collect the results in order.

    Args:
        fn: Pure function of one argument
        items: Work items

    Returns:
        List of results aligned with ``items``
    """
    work = list(items)
    if len(work) <= 1:
        return [fn(item) for item in work]

    async def _gather() -> list[R]:
        return list(await asyncio.gather(*(asyncio.to_thread(fn, item) for item in work)))

    return run_sync(_gather())
