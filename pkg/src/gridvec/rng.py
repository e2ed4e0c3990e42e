"""Counter-based deterministic random primitives.

Every randomized piece of the training system (negative sampling, vector
initialization, per-minibatch seeds) draws from the fixed recurrence defined
here, so that any two processes given the same seed produce identical values
regardless of shard layout, thread count, or call interleaving.

The recurrence for negative sampling is normative wire-protocol text: an
independently written shard must implement it bit-for-bit to interoperate.
See docs/protocol.md for the committed constants and formulas.
"""

from __future__ import annotations

import numpy as np

U64 = np.uint64

# SplitMix64 stream increment (Weyl constant) and a second odd constant used
# to separate rejection-attempt lanes and seed-derivation tags.
GAMMA = 0x9E3779B97F4A7C15
GAMMA2 = 0xD1342543DE82EF95

_MASK = (1 << 64) - 1

# seed_chain tags: each randomized subsystem derives its stream from the
# run seed under its own tag, shared by the distributed and reference paths
SEED_TAG_INIT_U = 1
SEED_TAG_MINIBATCH = 2
SEED_TAG_WINDOW = 3
SEED_TAG_SUBSAMPLE = 4
SEED_TAG_OBJECTIVE = 5
SEED_TAG_RETRY = 6


def mix64(x: int | np.ndarray) -> int | np.ndarray:
    """SplitMix64 output stage: a bijective avalanche mix of 64-bit values.

    Accepts a Python int or a uint64 ndarray; returns the matching kind.
    """
    z = np.asarray(x, dtype=np.uint64)
    z = (z ^ (z >> U64(30))) * U64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> U64(27))) * U64(0x94D049BB133111EB)
    z = z ^ (z >> U64(31))
    if np.isscalar(x) or np.ndim(x) == 0:
        return int(z)
    return z


def draw_u64(seed: int, position: int | np.ndarray, attempt: int | np.ndarray = 0) -> int | np.ndarray:
    """Value of the draw stream `seed` at `position`, rejection lane `attempt`.

    draw = mix64(seed + (position + 1) * GAMMA + attempt * GAMMA2)  (mod 2^64)

    Positions index independent draws; attempts index successive candidates
    for one draw when rejection is needed. Vectorized over position/attempt.
    """
    pos = np.asarray(position, dtype=np.uint64)
    att = np.asarray(attempt, dtype=np.uint64)
    state = U64(seed & _MASK) + (pos + U64(1)) * U64(GAMMA) + att * U64(GAMMA2)
    return mix64(state)


def to_unit(u: int | np.ndarray) -> float | np.ndarray:
    """Map a uint64 to [0, 1) using its top 53 bits."""
    z = np.asarray(u, dtype=np.uint64)
    r = (z >> U64(11)).astype(np.float64) * (2.0 ** -53)
    if np.isscalar(u) or np.ndim(u) == 0:
        return float(r)
    return r


def seed_chain(seed: int, *keys: int) -> int:
    """Derive an independent 64-bit seed from a base seed and integer tags.

    Used for per-matrix init streams, per-epoch window/subsample draws, and
    per-minibatch RPC seeds. Folding each key through mix64 keeps distinct
    tag tuples on distinct streams.
    """
    h = mix64((seed + GAMMA) & _MASK)
    for k in keys:
        h = mix64((h ^ ((k + 1) * GAMMA2)) & _MASK)
    return h
