"""Sequential single-process reference trainer.

Implements plain minibatch SGD on the skipgram negative-sampling objective
with no sharding, no RPC, and no concurrency, while following the same
numeric conventions as the distributed path: identical initialization,
identical negative draws, float32 dot products with numpy's pairwise row
reduction, coefficients through float64 sigmoid, and deferred (end-of-step)
updates accumulated per word. Under batch_size=1, a single shard, and one
client thread the distributed system must reproduce this trainer
bit-for-bit; that equivalence is the core correctness check.

Optimized for auditability, not speed.
"""

from __future__ import annotations

import numpy as np

from .client import TrainConfig, plan_schedule, sigmoid
from .corpus import IndexedCorpus, Minibatch, Vocabulary, make_minibatches, subsample
from .rng import SEED_TAG_MINIBATCH, seed_chain
from .sampler import NoiseTable, build_noise_table, minibatch_negatives
from .store import init_full_matrix


class FullVectorStore:
    """Unpartitioned input/output matrices, shapes (|V|, d), float32."""

    def __init__(self, U: np.ndarray, V: np.ndarray):
        self.U = U
        self.V = V

    @classmethod
    def initialize(cls, vocab_size: int, dim: int, seed: int) -> "FullVectorStore":
        U = init_full_matrix(seed, vocab_size, dim)
        V = np.zeros((vocab_size, dim), dtype=np.float32)
        return cls(U, V)


def oracle_step(store: FullVectorStore, minibatch: Minibatch, alpha: float,
                seed: int, negatives: int, noise: NoiseTable) -> None:
    """One SGD step: dot products, coefficients, deferred per-word updates.

    Every read uses start-of-step values; deltas land at the end, summed per
    word in the row-major pair order with each pair's positive contribution
    preceding its negatives.
    """
    U, V = store.U, store.V
    lens = np.fromiter((len(c) for c in minibatch.contexts), dtype=np.int64,
                       count=len(minibatch.contexts))
    in_rows = np.repeat(minibatch.inputs.astype(np.int64), lens)
    out_rows = np.concatenate(minibatch.contexts).astype(np.int64)
    p = len(in_rows)
    n = negatives

    negs = minibatch_negatives(noise, seed, out_rows, n)
    f_plus = (U[in_rows] * V[out_rows]).sum(axis=1)
    if n:
        f_minus = (U[np.repeat(in_rows, n)] * V[negs.reshape(-1)]).sum(axis=1)
    else:
        f_minus = np.empty(0, dtype=np.float32)

    g_plus = (alpha * (1.0 - sigmoid(f_plus))).astype(np.float32)
    g_minus = (-alpha * sigmoid(f_minus)).astype(np.float32) if n else f_minus

    coefs = np.empty((p, 1 + n), dtype=np.float32)
    coefs[:, 0] = g_plus
    if n:
        coefs[:, 1:] = g_minus.reshape(p, n)
    coefs_flat = coefs.reshape(-1)

    v_rows = np.empty((p, 1 + n), dtype=np.int64)
    v_rows[:, 0] = out_rows
    if n:
        v_rows[:, 1:] = negs
    v_rows_flat = v_rows.reshape(-1)
    u_rows_flat = np.repeat(in_rows, 1 + n)

    contrib_u = coefs_flat[:, None] * V[v_rows_flat]
    contrib_v = coefs_flat[:, None] * U[u_rows_flat]

    uniq_u, inv_u = np.unique(u_rows_flat, return_inverse=True)
    scratch_u = np.zeros((len(uniq_u), U.shape[1]), dtype=np.float32)
    np.add.at(scratch_u, inv_u, contrib_u)

    uniq_v, inv_v = np.unique(v_rows_flat, return_inverse=True)
    scratch_v = np.zeros((len(uniq_v), V.shape[1]), dtype=np.float32)
    np.add.at(scratch_v, inv_v, contrib_v)

    U[uniq_u] += scratch_u
    V[uniq_v] += scratch_v


def oracle_train(corpus: IndexedCorpus, vocab: Vocabulary, config: TrainConfig,
                 store: FullVectorStore | None = None) -> FullVectorStore:
    """Sequential epochs with the same schedule and seeds as the client."""
    if store is None:
        store = FullVectorStore.initialize(len(vocab), config.dim, config.seed)
    noise = build_noise_table(vocab)
    spec = config.window_spec()
    sched, _ = plan_schedule(corpus, vocab, config)
    for epoch in range(config.epochs):
        sub = subsample(corpus, vocab, spec, epoch=epoch)
        for mb in make_minibatches(sub, spec, config.batch_size,
                                   interleaved=config.interleaved, epoch=epoch):
            alpha = sched.current()
            seed = seed_chain(config.seed, SEED_TAG_MINIBATCH, epoch, 0, mb.batch_id)
            oracle_step(store, mb, alpha, seed, config.negatives, noise)
            sched.advance(len(mb))
    return store
