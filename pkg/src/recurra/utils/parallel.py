from collections.abc import Callable, Iterable
from concurrent.futures import ThreadPoolExecutor
from typing import TypeVar

_T = TypeVar("_T")
_R = TypeVar("_R")


def ordered_map(
    fn: Callable[[_T], _R],
    items: Iterable[_T],
    workers: int = 1,
) -> list[_R]:
    """Map `fn` over `items` on up to `workers` threads.

    Results are returned in input order, so the worker count never changes
    the output. With `workers <= 1` everything runs inline.
    """
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(fn, items))


def chunk_ranges(total: int, chunk_size: int) -> list[range]:
    """Split `range(total)` into consecutive ranges of at most `chunk_size`."""
    if chunk_size <= 0:
        raise ValueError(f"chunk_size must be positive, got {chunk_size}")
    return [range(start, min(start + chunk_size, total)) for start in range(0, total, chunk_size)]
