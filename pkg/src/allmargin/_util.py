"""Shared plumbing: deterministic seeding and the optional example-level thread pool."""

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np


def rng_for(base_seed, *indices):
    """PCG64 stream keyed by (base_seed, *indices).

    SeedSequence mixes the whole tuple, so per-example streams derived from
    (seed, example index) never collide and do not depend on evaluation order.
    """
    key = [int(base_seed)] + [int(i) for i in indices]
    return np.random.default_rng(np.random.SeedSequence(key))


def thread_count(explicit=None):
    # precedence: explicit argument, then ALLMARGIN_THREADS, then serial
    if explicit is not None:
        return max(1, int(explicit))
    env = os.environ.get("ALLMARGIN_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


def map_indexed(fn, items, threads=None):
    """Map fn(index, item) over items, preserving order.

    Each item must be independent given its index (seeds derive from the
    index), so the result is identical for any thread count.
    """
    items = list(items)
    n = thread_count(threads)
    if n <= 1 or len(items) <= 1:
        return [fn(i, item) for i, item in enumerate(items)]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, range(len(items)), items))


def as_vector(x):
    a = np.ascontiguousarray(x, dtype=np.float64).reshape(-1)
    return a
