"""Chunked random streams and an order-preserving worker pool.

Every chunk of replicas owns a generator derived from ``(seed, chunk index)``
alone, so results do not depend on how chunks are spread over workers.
"""

import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np

_JOB = None


def chunk_rng(seed: int, chunk: int, stream: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stream), int(chunk)))
    return np.random.Generator(np.random.PCG64(ss))


def chunk_sizes(n_items: int, chunk: int):
    sizes = [chunk] * (n_items // chunk)
    if n_items % chunk:
        sizes.append(n_items % chunk)
    return sizes


def default_workers() -> int:
    env = os.environ.get("LOOPDET_WORKERS")
    return max(1, int(env)) if env else 1


def _call(i):
    return _JOB(i)


def parallel_map(fn, items, workers=None):
    """``[fn(i) for i in items]`` evaluated on a forked pool when workers > 1.

    The function is inherited by fork rather than pickled, so closures over
    unpicklable objects (lambdas in mass fields and connections) work.
    """
    global _JOB
    items = list(items)
    workers = default_workers() if workers is None else int(workers)
    if workers <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    _JOB = fn
    try:
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            return list(pool.map(_call, items))
    finally:
        _JOB = None
