"""Column-partitioned embedding store.

Each shard holds a contiguous column slice of *every* word's input vector
u(w) and output vector v(w), stored as float32 matrices with row index equal
to the word's vocabulary index.

Initialization of component (w, j) depends only on (seed, w, j), never on
the shard layout, so any partitioning of the same seed materializes the same
full matrix. That property is what makes shard-count equivalence tests
possible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import SEED_TAG_INIT_U, draw_u64, seed_chain, to_unit

@dataclass(frozen=True)
class ShardLayout:
    """Partition of vector dimension d into S contiguous column ranges."""

    dim: int
    num_shards: int
    ranges: tuple[tuple[int, int], ...]

    def width(self, shard_id: int) -> int:
        lo, hi = self.ranges[shard_id]
        return hi - lo


def make_layout(dim: int, num_shards: int) -> ShardLayout:
    """Equi-partition columns [0, dim) into num_shards contiguous ranges.

    The first dim % num_shards shards get one extra column.
    """
    if num_shards < 1 or num_shards > dim:
        raise ValueError(f"need 1 <= num_shards <= dim, got S={num_shards} d={dim}")
    base, rem = divmod(dim, num_shards)
    ranges = []
    lo = 0
    for s in range(num_shards):
        hi = lo + base + (1 if s < rem else 0)
        ranges.append((lo, hi))
        lo = hi
    return ShardLayout(dim, num_shards, tuple(ranges))


class PartialVectorStore:
    """One shard's column slice of the input and output matrices.

    U: input-vector columns, V: output-vector columns, both float32 with
    shape (vocab_size, width). Written without locking by shard worker
    threads; races on individual float components are tolerated by design.
    """

    def __init__(self, shard_id: int, layout: ShardLayout, vocab_size: int,
                 U: np.ndarray, V: np.ndarray):
        self.shard_id = shard_id
        self.layout = layout
        self.vocab_size = vocab_size
        self.lo, self.hi = layout.ranges[shard_id]
        self.U = U
        self.V = V

    @property
    def width(self) -> int:
        return self.hi - self.lo


def _init_columns(seed: int, vocab_size: int, dim: int, lo: int, hi: int) -> np.ndarray:
    """Materialize input-matrix columns [lo, hi) from the init stream.

    Component (w, j) = ((draw at position w*dim + j) - 0.5) / dim, uniform
    on [-0.5/dim, +0.5/dim] as in the single-machine convention. Chunked
    over rows to bound temporary memory.
    """
    stream = seed_chain(seed, SEED_TAG_INIT_U)
    width = hi - lo
    out = np.empty((vocab_size, width), dtype=np.float32)
    cols = np.arange(lo, hi, dtype=np.uint64)
    chunk = max(1, (1 << 22) // max(width, 1))
    for start in range(0, vocab_size, chunk):
        stop = min(vocab_size, start + chunk)
        rows = np.arange(start, stop, dtype=np.uint64)
        positions = rows[:, None] * np.uint64(dim) + cols[None, :]
        r = to_unit(draw_u64(stream, positions))
        out[start:stop] = ((r - 0.5) / dim).astype(np.float32)
    return out


def init_full_matrix(seed: int, vocab_size: int, dim: int) -> np.ndarray:
    """The complete input matrix under the same per-component scheme."""
    return _init_columns(seed, vocab_size, dim, 0, dim)


def init_store(shard_id: int, layout: ShardLayout, vocab_size: int, seed: int) -> PartialVectorStore:
    """Fresh store for one shard: U uniform on [-0.5/d, 0.5/d], V zero."""
    if not 0 <= shard_id < layout.num_shards:
        raise ValueError(f"shard_id {shard_id} out of range for S={layout.num_shards}")
    lo, hi = layout.ranges[shard_id]
    U = _init_columns(seed, vocab_size, layout.dim, lo, hi)
    V = np.zeros((vocab_size, hi - lo), dtype=np.float32)
    return PartialVectorStore(shard_id, layout, vocab_size, U, V)


def export_partials(store: PartialVectorStore) -> list[tuple[int, np.ndarray]]:
    """(word index, partial input vector) rows for columns [lo, hi)."""
    return [(w, store.U[w].copy()) for w in range(store.vocab_size)]


def assemble(partials: list[np.ndarray], layout: ShardLayout) -> np.ndarray:
    """Column-concatenate per-shard matrices back into the full matrix."""
    if len(partials) != layout.num_shards:
        raise ValueError("one partial matrix per shard required")
    for s, part in enumerate(partials):
        if part.shape[1] != layout.width(s):
            raise ValueError(f"shard {s}: got width {part.shape[1]}, layout says {layout.width(s)}")
    return np.concatenate(partials, axis=1)


def save_vectors_text(path: str, words: list[str], matrix: np.ndarray) -> None:
    """word2vec text format: 'count dim' header, then word + components."""
    n, d = matrix.shape
    if n != len(words):
        raise ValueError("row count does not match word count")
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"{n} {d}\n")
        for w, row in zip(words, matrix):
            f.write(w + " " + " ".join(repr(float(x)) for x in row) + "\n")


def load_vectors_text(path: str) -> tuple[list[str], np.ndarray]:
    with open(path, encoding="utf-8") as f:
        header = f.readline().split()
        n, d = int(header[0]), int(header[1])
        words = []
        matrix = np.empty((n, d), dtype=np.float32)
        for i in range(n):
            parts = f.readline().rstrip("\n").split(" ")
            words.append(parts[0])
            matrix[i] = np.asarray(parts[1:], dtype=np.float32)
    if len(words) != n:
        raise ValueError(f"{path}: header claims {n} rows, found {len(words)}")
    return words, matrix
