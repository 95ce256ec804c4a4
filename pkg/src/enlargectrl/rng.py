"""Random streams derived from one root seed.

Every stream is a Philox (counter-based) generator keyed by
``SeedSequence(root, spawn_key=(stream, chunk))``. Monte Carlo batches are cut
into fixed chunks of ``CHUNK`` paths, so results do not depend on how many
workers evaluate the chunks.
"""
import os
import zlib
from concurrent.futures import ThreadPoolExecutor

import numpy as np

CHUNK = 16384


def stream_id(label):
    """Stable 32-bit id for a stream label."""
    return zlib.crc32(label.encode("utf-8"))


def generator(seed, label, chunk=0):
    ss = np.random.SeedSequence(int(seed), spawn_key=(stream_id(label), int(chunk)))
    return np.random.Generator(np.random.Philox(ss))


def chunk_sizes(n_paths):
    full, rest = divmod(int(n_paths), CHUNK)
    return [CHUNK] * full + ([rest] if rest else [])


def max_workers():
    env = os.environ.get("ENLARGECTRL_THREADS")
    cap = int(env) if env else (os.cpu_count() or 1)
    return max(1, cap)


def map_chunks(fn, n_paths):
    """Apply ``fn(chunk_index, size)`` over all chunks; results in chunk order."""
    sizes = chunk_sizes(n_paths)
    workers = min(max_workers(), len(sizes))
    if workers <= 1:
        return [fn(i, s) for i, s in enumerate(sizes)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(len(sizes)), sizes))
