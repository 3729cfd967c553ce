"""Counter-based random streams and order-preserving parallel execution.

Every stream is a Philox generator keyed by (master seed, purpose, index), so
the numbers a trajectory block or realization sees never depend on how the
work is scheduled.  Trajectories are grouped in fixed blocks of BLOCK_SIZE;
within a block, draws advance step by step.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence

import numpy as np

BLOCK_SIZE = 1024

# purpose tags keep unrelated experiments on disjoint streams
DISPERSION = 1
EXACT_SAMPLER = 2
LYAPUNOV = 3
MIXING = 4
SYNTHESIS = 5
BRIDGE = 6


def stream(seed: int, purpose: int, index: int = 0) -> np.random.Generator:
    if seed < 0:
        raise ValueError("seed must be non-negative")
    ss = np.random.SeedSequence([int(seed), int(purpose), int(index)])
    return np.random.Generator(np.random.Philox(ss))


def bridge_split(z: np.ndarray, generator: np.random.Generator, levels: int) -> list[np.ndarray]:
    """Split one standard-normal increment into 2**levels finer ones (Brownian bridge).

    Each halving maps z to ((z + b)/sqrt 2, (z - b)/sqrt 2) with a fresh normal b,
    so the fine increments are i.i.d. standard normals whose scaled sum
    reproduces z exactly.  Runs at dt and dt / 2**levels then share one path.
    """
    parts = [np.asarray(z, dtype=float)]
    for _ in range(levels):
        nxt = []
        for p in parts:
            b = generator.standard_normal(p.shape)
            nxt += [(p + b) / np.sqrt(2.0), (p - b) / np.sqrt(2.0)]
        parts = nxt
    return parts


def blocks(n: int, size: int = BLOCK_SIZE) -> list[tuple[int, int]]:
    return [(a, min(a + size, n)) for a in range(0, n, size)]


def ordered_map(fn: Callable, items: Sequence, workers: int = 1) -> list:
    """``[fn(x) for x in items]``, optionally on a thread pool; order is preserved."""
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
