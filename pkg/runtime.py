import logging
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

CODE_VERSION = "1.0.0"
THREADS_ENV = "DFORCE_THREADS"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

logger = logging.getLogger(__name__)


def setup_logging(verbose=False):
    level = logging.DEBUG if verbose else logging.INFO
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel(level)


def max_threads():
    """Worker cap from DFORCE_THREADS, falling back to the CPU count."""
    raw = os.environ.get(THREADS_ENV, "").strip()
    if raw:
        try:
            value = int(raw)
            if value >= 1:
                return value
        except ValueError:
            pass
        logger.warning("Ignoring invalid %s=%r", THREADS_ENV, raw)
    return os.cpu_count() or 1


def make_rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def spawn_rngs(rng, n):
    """Split n independent child streams off rng; the result depends only on rng's state."""
    seeds = rng.integers(0, 2**63 - 1, size=n, dtype=np.int64)
    return [np.random.default_rng(int(s)) for s in seeds]


def parallel_map(fn, items):
    """Ordered map over a thread pool capped by DFORCE_THREADS.

    Each item must carry its own rng stream, so the output does not depend on the
    number of workers.
    """
    items = list(items)
    workers = min(max_threads(), max(len(items), 1))
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
