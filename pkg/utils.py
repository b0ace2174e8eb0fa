import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, Sequence, TypeVar

import psutil

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

THREADS_ENV_VAR = "S2CT_THREADS"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class S2CTError(Exception):
    """Base class for every failure the toolkit reports to the command line."""

    exit_code = 1


class UsageError(S2CTError):
    """Bad arguments, unknown config keys, or values outside their documented range."""

    exit_code = 2


class DataError(S2CTError):
    """Missing inputs, unreadable files, malformed payloads."""

    exit_code = 3


class BadMagicError(DataError):
    pass


class UnsupportedVersionError(DataError):
    pass


class TruncatedPayloadError(DataError):
    pass


class DimensionOverflowError(DataError):
    pass


class NumericError(S2CTError):
    """Non-finite losses and degenerate geometry."""

    exit_code = 4


def configure_logging(verbose: bool = False) -> None:
    """
    Configure root logging for command-line runs.

    Args:
        verbose: Emit DEBUG records (per-step losses, render timings)
    """
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format=LOG_FORMAT,
        force=True,
    )


def worker_count() -> int:
    """
    Number of worker threads for data-parallel stages.

    Honors ``S2CT_THREADS`` when set, otherwise the number of physical cores.

    Returns:
        int: Thread cap, at least 1
    """
    raw = os.environ.get(THREADS_ENV_VAR, "").strip()
    if raw:
        try:
            value = int(raw)
        except ValueError:
            raise UsageError(f"{THREADS_ENV_VAR} must be an integer, got {raw!r}")
        if value < 1:
            raise UsageError(f"{THREADS_ENV_VAR} must be >= 1, got {value}")
        return value
    return psutil.cpu_count(logical=False) or os.cpu_count() or 1


def parallel_map(fn: Callable[[T], R], items: Iterable[T], workers: Optional[int] = None) -> List[R]:
    """
    Apply ``fn`` to every item on a thread pool, preserving input order.

    Args:
        fn: Pure function of one item
        items: Inputs
        workers: Thread cap (defaults to ``worker_count()``)

    Returns:
        Results in the same order as ``items``
    """
    items = list(items)
    workers = workers or worker_count()
    if workers == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


def resident_memory_mb() -> float:
    """Resident set size of this process in MiB."""
    return psutil.Process().memory_info().rss / (1024 * 1024)


def parse_float_list(text: str, name: str) -> List[float]:
    """
    Parse a comma separated list of numbers.

    Args:
        text: e.g. ``"0, 45,90"``
        name: Setting name used in the error message

    Returns:
        List of floats in the given order
    """
    values = []
    for token in text.split(","):
        token = token.strip()
        if not token:
            continue
        try:
            values.append(float(token))
        except ValueError:
            raise UsageError(f"{name}: {token!r} is not a number")
    if not values:
        raise UsageError(f"{name}: expected at least one value")
    return values


def format_float_list(values: Sequence[float]) -> str:
    """Inverse of ``parse_float_list`` with integral values printed without decimals."""
    return ",".join(f"{v:g}" for v in values)


def case_name(case_id: int) -> str:
    """File stem for a dataset case, e.g. ``case_0007``."""
    return f"case_{case_id:04d}"

