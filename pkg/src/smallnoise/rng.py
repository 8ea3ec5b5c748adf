"""
Counter-based random streams and deterministic block-parallel maps.

Samples are partitioned into fixed blocks of ``BLOCK`` items. Block ``b`` of a
computation tagged ``stream`` draws from a Philox generator keyed by
``(seed, stream, b)``, so its numbers do not depend on how many workers run or
in which order blocks finish. Results are reassembled by block index.
"""
from concurrent.futures import ThreadPoolExecutor

import numpy as np

BLOCK = 4096

# stream tags
NOISE = 1
INITIAL = 2
SPACE = 3
GAUSS = 4


def generator(seed, stream, block):
    """Philox generator for one block of one stream."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stream), int(block)))
    return np.random.Generator(np.random.Philox(ss))


def blocks(n, size=BLOCK):
    """Split ``range(n)`` into ``(index, start, stop)`` triples of fixed size."""
    return [(b, lo, min(lo + size, n)) for b, lo in enumerate(range(0, n, size))]


def block_map(fn, n, threads=1, size=BLOCK):
    """Apply ``fn(block, start, stop)`` to every block; results in block order."""
    parts = blocks(n, size)
    if threads is None or threads <= 1 or len(parts) == 1:
        return [fn(*p) for p in parts]
    with ThreadPoolExecutor(max_workers=int(threads)) as pool:
        return list(pool.map(lambda p: fn(*p), parts))


def standard_normals(seed, stream, n, dim, threads=1):
    """``n`` standard normal vectors of length ``dim`` from block streams."""
    parts = block_map(
        lambda b, lo, hi: generator(seed, stream, b).standard_normal((hi - lo, dim)), n, threads
    )
    return np.concatenate(parts, axis=0) if parts else np.empty((0, dim))
