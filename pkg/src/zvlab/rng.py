"""Counter-based random streams.

Every Brownian increment in the workbench is a pure function of
(global seed, path index, step index).  Streams are built on Philox,
a counter-based generator, so any path can be regenerated in isolation
and results do not depend on scheduling or worker count.

Paths are grouped in blocks of fixed width BLOCK.  Block b is driven by
Philox(key=(seed, b)); the block's whole increment array is drawn in a
single call with a fixed shape, which pins the stream layout.  Path i
lives in lane i % BLOCK of block i // BLOCK.
"""

from __future__ import annotations

import numpy as np

# Fixed block width.  Part of the reproducibility contract: changing it
# changes every stream, so it is a constant, not a knob.
BLOCK = 8192


def block_generator(seed: int, block_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[np.uint64(seed), np.uint64(block_index)]))


def block_normals(seed: int, block_index: int, n_steps: int, d: int,
                  width: int | None = None) -> np.ndarray:
    """Standard-normal increments for one block, shape (width, n_steps, d).

    The generator fills arrays row-major from one sequential stream, so a
    draw of the first `width` lanes is bit-identical to the corresponding
    prefix of the full-BLOCK draw; lane content never depends on how many
    paths a run asks for.
    """
    gen = block_generator(seed, block_index)
    w = BLOCK if width is None else min(width, BLOCK)
    return gen.standard_normal((w, n_steps, d))


def path_normals(seed: int, path_index: int, n_steps: int, d: int) -> np.ndarray:
    """Increments of a single path, bit-identical to its lane in the block draw."""
    lane = path_index % BLOCK
    arr = block_normals(seed, path_index // BLOCK, n_steps, d, width=lane + 1)
    return arr[lane].copy()


def path_blocks(n_paths: int) -> list[tuple[int, int]]:
    """(block_index, width) covering path indices 0..n_paths-1 in order."""
    out = []
    b = 0
    left = n_paths
    while left > 0:
        w = min(BLOCK, left)
        out.append((b, w))
        b += 1
        left -= w
    return out


def uniform_points(seed: int, tag: int, n: int, low, high) -> np.ndarray:
    """Deterministic auxiliary sample (pair picking, certificate sampling).

    Tagged so different consumers of the same seed do not share a stream.
    """
    gen = np.random.Generator(np.random.Philox(key=[np.uint64(seed), np.uint64(0xA0 + tag)]))
    low = np.asarray(low, dtype=float)
    high = np.asarray(high, dtype=float)
    shape = (n,) + low.shape if low.shape else (n,)
    return low + (high - low) * gen.random(shape)
