import os
from concurrent.futures import ThreadPoolExecutor

THREADS_ENV_VAR = "PTYCHO_NLOS_THREADS"


def worker_count() -> int:
    """
    Number of workers used for FFTs and thread pools.

    Reads `PTYCHO_NLOS_THREADS` and falls back to the CPU count.

    Returns:
        int: A positive worker count.
    """
    override = os.environ.get(THREADS_ENV_VAR)
    if override:
        try:
            return max(1, int(override))
        except ValueError:
            pass
    return os.cpu_count() or 1


def executor() -> ThreadPoolExecutor:
    return ThreadPoolExecutor(max_workers=worker_count())
