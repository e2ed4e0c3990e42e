"""Seed-deterministic negative-example generation.

Negatives are drawn from the vocabulary unigram distribution raised to the
0.75 power. The draw recurrence is counter-based (rng.draw_u64): the k-th
negative of the q-th (input, context) pair occupies stream position
q*N + k, and rejection redraws (candidate == positive word) walk the
attempt lane of that position. Stream position is therefore a pure function
of the row-major iteration order over the minibatch, which makes dotprod
and adjust regenerate identical negatives from the same seed on every
shard. The exact recurrence is protocol text: see docs/protocol.md.
"""

from __future__ import annotations

import numpy as np

from .corpus import Vocabulary
from .rng import draw_u64, to_unit

NOISE_POWER = 0.75


class NoiseTable:
    """Cumulative distribution over word indices, P(w) ∝ count(w)^0.75."""

    def __init__(self, counts: np.ndarray):
        if len(counts) == 0:
            raise ValueError("empty vocabulary")
        if np.any(counts <= 0):
            raise ValueError("all counts must be positive")
        weights = counts.astype(np.float64) ** NOISE_POWER
        self.probabilities = weights / weights.sum()
        self.cumulative = np.cumsum(self.probabilities)
        self.cumulative[-1] = 1.0

    def __len__(self) -> int:
        return len(self.probabilities)

    def index_for(self, u: np.ndarray) -> np.ndarray:
        """Map raw uint64 draws to word indices through the CDF."""
        r = to_unit(u)
        idx = np.searchsorted(self.cumulative, r, side="right")
        return np.minimum(idx, len(self.cumulative) - 1).astype(np.uint32)


def build_noise_table(vocab: Vocabulary) -> NoiseTable:
    return NoiseTable(vocab.counts)


class SeededDraw:
    """A sequential view of the draw stream for one seed.

    Two instances with the same seed yield identical sequences; the stream
    position advances by N per call to negatives().
    """

    def __init__(self, seed: int):
        self.seed = seed
        self.position = 0

    def negatives(self, table: NoiseTable, exclude: int, n: int) -> np.ndarray:
        out = draw_negatives_at(table, self.seed, self.position, exclude, n)
        self.position += n
        return out


def draw_negatives_at(
    table: NoiseTable, seed: int, position: int, exclude: int, n: int
) -> np.ndarray:
    """n negative indices != exclude at stream positions [position, position+n).

    Collisions with the excluded word are rejected and redrawn on the
    attempt lane of the colliding position.
    """
    if len(table) < 2:
        raise ValueError("need at least 2 vocabulary words to exclude one")
    positions = np.arange(position, position + n, dtype=np.uint64)
    return _rejection_fill(table, seed, positions, np.uint32(exclude))


def draw_negatives(table: NoiseTable, draw: SeededDraw, exclude: int, n: int) -> np.ndarray:
    """Spec-facing wrapper: consume n draws from a SeededDraw."""
    return draw.negatives(table, exclude, n)


def _rejection_fill(
    table: NoiseTable, seed: int, positions: np.ndarray, exclude: np.ndarray | np.uint32
) -> np.ndarray:
    """Vectorized per-position rejection: attempt t+1 only where t collided."""
    idx = table.index_for(draw_u64(seed, positions, 0))
    colliding = np.flatnonzero(idx == exclude)
    attempt = 1
    while colliding.size:
        excl = exclude[colliding] if np.ndim(exclude) else exclude
        redraw = table.index_for(draw_u64(seed, positions[colliding], attempt))
        idx[colliding] = redraw
        colliding = colliding[redraw == excl]
        attempt += 1
    return idx


def minibatch_negatives(
    table: NoiseTable,
    seed: int,
    pair_outputs: np.ndarray,
    n: int,
) -> np.ndarray:
    """Negatives for a whole minibatch in one shot: shape (num_pairs, n).

    pair_outputs holds the positive output word of each (input, context)
    pair in row-major minibatch order; row q of the result uses stream
    positions q*n + 0..n-1, identical to n sequential draw_negatives_at
    calls. This is the shard-side hot path.
    """
    p = len(pair_outputs)
    if p == 0:
        return np.empty((0, n), dtype=np.uint32)
    positions = np.arange(p * n, dtype=np.uint64)
    exclude = np.repeat(pair_outputs.astype(np.uint32), n)
    return _rejection_fill(table, seed, positions, exclude).reshape(p, n)
