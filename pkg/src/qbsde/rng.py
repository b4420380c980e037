"""Counter-based Brownian increments.

Paths are grouped in fixed blocks of ``BLOCK`` consecutive indices.  Block
``b`` draws from a Philox stream keyed by the seed whose counter starts at
``(0, b, 0, 0)``, so each block owns a disjoint slice of the counter space.
Within a block the normals are laid out time-major: step ``i`` consumes the
same stream positions whatever the total number of steps.  Consequences:

* a path's noise depends only on ``(seed, path index, step index, k)``;
* runs that differ only in ``n_paths``, horizon (same ``dt``) or starting
  point share their common prefix exactly (common random numbers);
* the thread count never changes the result.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

BLOCK = 1024


def block_generator(seed: int, block: int) -> np.random.Generator:
    if seed < 0:
        raise ValueError("seed must be nonnegative")
    return np.random.Generator(np.random.Philox(key=int(seed), counter=[0, int(block), 0, 0]))


def brownian_increments(seed: int, n_paths: int, n_steps: int, dim: int, dt: float,
                        threads: int = 1) -> np.ndarray:
    """Return ``(n_paths, n_steps, dim)`` increments with variance ``dt``."""
    out = np.empty((n_paths, n_steps, dim))
    n_blocks = -(-n_paths // BLOCK)
    scale = np.sqrt(dt)

    def fill(b):
        lo = b * BLOCK
        hi = min(lo + BLOCK, n_paths)
        g = block_generator(seed, b)
        draws = g.standard_normal((n_steps, BLOCK, dim))
        out[lo:hi] = draws[:, : hi - lo].transpose(1, 0, 2) * scale

    if threads > 1 and n_blocks > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            list(ex.map(fill, range(n_blocks)))
    else:
        for b in range(n_blocks):
            fill(b)
    return out


def derive_seed(master: int, index: int) -> int:
    """Deterministic child seed for per-point work (e.g. residual estimates)."""
    ss = np.random.SeedSequence([int(master), int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def bridge_uniforms(seed: int, n_paths: int, n_steps: int) -> np.ndarray:
    """``(n_paths, n_steps)`` uniforms for exit-crossing tests.

    Drawn from the same key as the increments but a disjoint counter range
    (first counter word 1), laid out per block and time-major like the
    increments, so horizons sharing ``dt`` share their prefix.
    """
    out = np.empty((n_paths, n_steps))
    for b in range(-(-n_paths // BLOCK)):
        lo = b * BLOCK
        hi = min(lo + BLOCK, n_paths)
        g = np.random.Generator(np.random.Philox(key=int(seed), counter=[1, b, 0, 0]))
        out[lo:hi] = g.random((n_steps, BLOCK))[:, : hi - lo].T
    return out
