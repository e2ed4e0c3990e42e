"""Vocabulary construction, corpus indexing, subsampling, and minibatches.

Tokens are whitespace-separated; a newline ends a sentence. Out-of-vocabulary
tokens are dropped at preprocessing time and never reach training, and
dropped words do not count toward window size ("dirty" contexts).
"""

from __future__ import annotations

import struct
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .rng import SEED_TAG_SUBSAMPLE, SEED_TAG_WINDOW, seed_chain

CORPUS_MAGIC = b"W2VIDX1\0"
SENTENCE_SENTINEL = 0xFFFFFFFF


class EmptyVocabularyError(ValueError):
    """No token met the min_count cutoff."""


@dataclass
class Vocabulary:
    """Frequency-sorted word list; a word's position is its training index.

    Sorted by decreasing count, ties broken by ascending token, so the
    index ordering is deterministic for a given corpus.
    """

    words: list[str]
    counts: np.ndarray  # int64, aligned with words
    index_of: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.index_of = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    @property
    def entries(self) -> list[tuple[str, int]]:
        return [(w, int(c)) for w, c in zip(self.words, self.counts)]

    def save(self, path: str) -> None:
        """Write 'word<TAB>count' lines in descending count order."""
        with open(path, "w", encoding="utf-8") as f:
            for w, c in zip(self.words, self.counts):
                f.write(f"{w}\t{int(c)}\n")

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        words, counts = [], []
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.rstrip("\n")
                if not line:
                    continue
                word, count = line.split("\t")
                words.append(word)
                counts.append(int(count))
        if not words:
            raise EmptyVocabularyError(f"vocabulary file {path} is empty")
        return cls(words, np.asarray(counts, dtype=np.int64))


@dataclass
class IndexedCorpus:
    """Sentences as index arrays; OOV tokens already removed."""

    sentences: list[np.ndarray]  # each uint32
    total_tokens: int

    def save(self, path: str) -> None:
        """Binary format: magic, u64 token count, u32 stream with a
        0xFFFFFFFF sentinel closing each sentence. Little-endian."""
        with open(path, "wb") as f:
            f.write(CORPUS_MAGIC)
            f.write(struct.pack("<Q", self.total_tokens))
            delim = np.asarray([SENTENCE_SENTINEL], dtype="<u4")
            for sent in self.sentences:
                f.write(sent.astype("<u4").tobytes())
                f.write(delim.tobytes())

    @classmethod
    def load(cls, path: str) -> "IndexedCorpus":
        with open(path, "rb") as f:
            magic = f.read(8)
            if magic != CORPUS_MAGIC:
                raise ValueError(f"{path}: bad corpus magic {magic!r}")
            (total,) = struct.unpack("<Q", f.read(8))
            data = np.frombuffer(f.read(), dtype="<u4")
        sentences = []
        start = 0
        for end in np.flatnonzero(data == SENTENCE_SENTINEL):
            if end > start:
                sentences.append(data[start:end].astype(np.uint32))
            start = end + 1
        return cls(sentences, int(total))


@dataclass(frozen=True)
class WindowSpec:
    """Context-window and subsampling parameters.

    max_window: per-position window half-width is drawn uniformly from
        {1, ..., max_window}.
    subsample_threshold: the t of the frequent-word subsampling formula;
        0 disables subsampling.
    rng_seed: base seed for window draws and subsampling decisions.
    """

    max_window: int
    subsample_threshold: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.max_window < 1:
            raise ValueError("max_window must be >= 1")
        if self.subsample_threshold < 0:
            raise ValueError("subsample_threshold must be >= 0")


@dataclass
class Minibatch:
    """Input word indices with per-input context index lists."""

    inputs: np.ndarray           # uint32, shape (P,)
    contexts: list[np.ndarray]   # P arrays of uint32, each non-empty
    batch_id: int

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def num_pairs(self) -> int:
        return sum(len(c) for c in self.contexts)


def _sentence_split(token_stream: Iterable[str]) -> Iterator[list[str]]:
    """Group a token stream into sentences; the empty string marks a break."""
    sent: list[str] = []
    for tok in token_stream:
        if tok == "":
            if sent:
                yield sent
                sent = []
        else:
            sent.append(tok)
    if sent:
        yield sent


def tokens_from_text(text: str) -> Iterator[str]:
    """Whitespace tokens with "" sentence-break markers at newlines."""
    for line in text.split("\n"):
        yield from line.split()
        yield ""


def build_vocabulary(
    token_stream: Iterable[str],
    min_count: int,
    max_vocab: int | None = None,
) -> Vocabulary:
    """Count tokens and keep those occurring at least min_count times.

    If more than max_vocab words survive the cutoff, the most frequent
    max_vocab are kept. Ordering: count descending, then token ascending.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts = Counter(t for t in token_stream if t != "")
    kept = [(w, c) for w, c in counts.items() if c >= min_count]
    kept.sort(key=lambda wc: (-wc[1], wc[0]))
    if max_vocab is not None:
        kept = kept[:max_vocab]
    if not kept:
        raise EmptyVocabularyError(
            f"no token occurs at least {min_count} times"
        )
    return Vocabulary(
        [w for w, _ in kept],
        np.asarray([c for _, c in kept], dtype=np.int64),
    )


def preprocess(token_stream: Iterable[str], vocab: Vocabulary) -> IndexedCorpus:
    """Replace tokens by vocabulary indices, silently dropping OOV tokens.

    Sentences left empty by OOV removal are omitted.
    """
    if len(vocab) == 0:
        raise EmptyVocabularyError("cannot preprocess with an empty vocabulary")
    index_of = vocab.index_of
    sentences = []
    total = 0
    for sent in _sentence_split(token_stream):
        idx = [index_of[t] for t in sent if t in index_of]
        if idx:
            sentences.append(np.asarray(idx, dtype=np.uint32))
            total += len(idx)
    return IndexedCorpus(sentences, total)


def keep_probabilities(vocab: Vocabulary, threshold: float, total_tokens: int) -> np.ndarray:
    """Per-word keep probability for frequent-word subsampling.

    p_keep(w) = min(1, (sqrt(f/t) + 1) * t/f) with f = count(w)/total_tokens,
    the open-source word2vec formula. threshold 0 keeps everything.
    """
    if threshold == 0:
        return np.ones(len(vocab), dtype=np.float64)
    freq = vocab.counts.astype(np.float64) / max(total_tokens, 1)
    with np.errstate(divide="ignore"):
        p = (np.sqrt(freq / threshold) + 1.0) * (threshold / freq)
    return np.minimum(p, 1.0)


def subsample(
    corpus: IndexedCorpus,
    vocab: Vocabulary,
    spec: WindowSpec,
    epoch: int = 0,
) -> IndexedCorpus:
    """Randomly drop occurrences of frequent words.

    Each occurrence of w is kept independently with keep_probabilities(w).
    Decisions are seeded per epoch; sentences emptied by the drop are
    removed. With threshold 0 the corpus is returned unchanged.
    """
    if spec.subsample_threshold == 0:
        return corpus
    p_keep = keep_probabilities(vocab, spec.subsample_threshold, corpus.total_tokens)
    gen = np.random.Generator(np.random.PCG64(seed_chain(spec.rng_seed, SEED_TAG_SUBSAMPLE, epoch)))
    sentences = []
    total = 0
    for sent in corpus.sentences:
        keep = gen.random(len(sent)) < p_keep[sent]
        kept = sent[keep]
        if len(kept):
            sentences.append(kept)
            total += len(kept)
    return IndexedCorpus(sentences, total)


def _context_lists(
    sent: np.ndarray, windows: np.ndarray
) -> list[np.ndarray]:
    """Context index list for every position of one sentence.

    Position j with realized window b sees positions [j-b, j+b] minus j,
    clipped to the sentence.
    """
    n = len(sent)
    out = []
    for j in range(n):
        b = int(windows[j])
        lo = max(0, j - b)
        hi = min(n, j + b + 1)
        ctx = np.concatenate([sent[lo:j], sent[j + 1:hi]])
        out.append(ctx)
    return out


def make_minibatches(
    corpus: IndexedCorpus,
    spec: WindowSpec,
    batch_size: int,
    interleaved: bool = False,
    epoch: int = 0,
) -> Iterator[Minibatch]:
    """Yield minibatches covering every usable token position exactly once.

    Window half-widths are drawn uniformly from {1..max_window} with a
    per-epoch seeded generator. Sentences of length 1 yield no pairs and
    are skipped. With interleaved=True, consecutive inputs of a minibatch
    are taken round-robin from distinct sentences, so no two inputs share
    a sentence while at least batch_size sentences still have positions
    left.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    gen = np.random.Generator(np.random.PCG64(seed_chain(spec.rng_seed, SEED_TAG_WINDOW, epoch)))

    def positions() -> Iterator[tuple[np.ndarray, np.ndarray]]:
        # (input index, context array) pairs in corpus order per sentence
        for sent in corpus.sentences:
            if len(sent) < 2:
                # window draws are still consumed so the stream position
                # of later sentences does not depend on skipping
                gen.integers(1, spec.max_window + 1, size=len(sent))
                continue
            windows = gen.integers(1, spec.max_window + 1, size=len(sent))
            ctxs = _context_lists(sent, windows)
            yield sent, ctxs

    batch_id = 0
    if not interleaved:
        inputs: list[int] = []
        contexts: list[np.ndarray] = []
        for sent, ctxs in positions():
            for j in range(len(sent)):
                inputs.append(int(sent[j]))
                contexts.append(ctxs[j])
                if len(inputs) == batch_size:
                    yield Minibatch(np.asarray(inputs, dtype=np.uint32), contexts, batch_id)
                    batch_id += 1
                    inputs, contexts = [], []
        if inputs:
            yield Minibatch(np.asarray(inputs, dtype=np.uint32), contexts, batch_id)
    else:
        # Rotate over a pool of live sentences, taking one position per
        # sentence per turn. Pool size >= batch_size guarantees the inputs
        # of one minibatch come from distinct sentences while that many
        # sentences remain; bounding it keeps memory flat.
        stream = positions()
        pool: deque[tuple[np.ndarray, list[np.ndarray], int]] = deque()
        pool_target = max(batch_size, 256)

        def refill() -> None:
            while len(pool) < pool_target:
                nxt = next(stream, None)
                if nxt is None:
                    return
                pool.append((nxt[0], nxt[1], 0))

        refill()
        inputs, contexts = [], []
        while pool:
            sent, ctxs, j = pool.popleft()
            inputs.append(int(sent[j]))
            contexts.append(ctxs[j])
            if j + 1 < len(sent):
                pool.append((sent, ctxs, j + 1))
            else:
                refill()
            if len(inputs) == batch_size:
                yield Minibatch(np.asarray(inputs, dtype=np.uint32), contexts, batch_id)
                batch_id += 1
                inputs, contexts = [], []
        if inputs:
            yield Minibatch(np.asarray(inputs, dtype=np.uint32), contexts, batch_id)


def usable_input_count(corpus: IndexedCorpus) -> int:
    """Token positions that can serve as minibatch inputs (sentence len >= 2)."""
    return sum(len(s) for s in corpus.sentences if len(s) >= 2)


def partition_sentences(corpus: IndexedCorpus, num_parts: int) -> list[IndexedCorpus]:
    """Split sentences into num_parts contiguous chunks for client threads."""
    if num_parts < 1:
        raise ValueError("num_parts must be >= 1")
    parts: list[IndexedCorpus] = []
    n = len(corpus.sentences)
    base, rem = divmod(n, num_parts)
    start = 0
    for i in range(num_parts):
        size = base + (1 if i < rem else 0)
        chunk = corpus.sentences[start:start + size]
        parts.append(IndexedCorpus(chunk, int(sum(len(s) for s in chunk))))
        start += size
    return parts
