"""Embedding quality evaluation: neighbors, rank correlation, analogies.

All similarity measures operate on the exported input vectors. Tokens are
compared byte-exact; judgment or question entries containing words outside
the embedding vocabulary are skipped and counted, never silently dropped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .store import load_vectors_text


class EmbeddingSet:
    """Token-indexed matrix of input vectors."""

    def __init__(self, words: list[str], matrix: np.ndarray):
        if len(words) != matrix.shape[0]:
            raise ValueError("word count does not match matrix rows")
        self.words = words
        self.matrix = np.asarray(matrix, dtype=np.float32)
        self.index = {w: i for i, w in enumerate(words)}
        norms = np.linalg.norm(self.matrix.astype(np.float64), axis=1)
        self._norms = norms

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def vector(self, token: str) -> np.ndarray:
        return self.matrix[self.index[token]]

    @classmethod
    def load(cls, path: str) -> "EmbeddingSet":
        words, matrix = load_vectors_text(path)
        return cls(words, matrix)

    def normalized(self) -> np.ndarray:
        norms = self._norms.copy()
        norms[norms == 0] = 1.0
        return self.matrix.astype(np.float64) / norms[:, None]


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity undefined for a zero vector")
    return float(np.dot(a, b) / (na * nb))


def top_k(embeddings: EmbeddingSet, query: str | np.ndarray, k: int,
          threshold: float | None = None) -> list[tuple[str, float]]:
    """K most cosine-similar tokens, descending; ties broken by token.

    A token query is excluded from its own result list. With a threshold,
    only hits scoring above it are returned.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    exclude = None
    if isinstance(query, str):
        if query not in embeddings.index:
            raise KeyError(f"query token {query!r} not in vocabulary")
        exclude = embeddings.index[query]
        qvec = embeddings.matrix[exclude].astype(np.float64)
    else:
        qvec = np.asarray(query, dtype=np.float64)
    qn = np.linalg.norm(qvec)
    if qn == 0:
        raise ValueError("cosine similarity undefined for a zero vector")
    scores = embeddings.normalized() @ (qvec / qn)
    if exclude is not None:
        scores[exclude] = -np.inf
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], embeddings.words[i]))
    out = []
    for i in order:
        s = float(scores[i])
        if s == -np.inf:
            break  # the excluded query sorts last
        if threshold is not None and s <= threshold:
            break  # scores descend; nothing later can pass
        out.append((embeddings.words[i], s))
        if len(out) == k:
            break
    return out


@dataclass
class SimilarityJudgments:
    """Human-scored word pairs, e.g. the wordsim-353 collection."""

    pairs: list[tuple[str, str, float]]

    @classmethod
    def load(cls, path: str) -> "SimilarityJudgments":
        """Tab-separated word<TAB>word<TAB>score with an optional header."""
        pairs = []
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f):
                line = line.rstrip("\n")
                if not line:
                    continue
                fields = line.split("\t")
                if len(fields) != 3:
                    raise ValueError(f"{path}:{lineno + 1}: expected 3 tab-separated fields")
                try:
                    score = float(fields[2])
                except ValueError:
                    if lineno == 0:
                        continue  # header
                    raise
                pairs.append((fields[0], fields[1], score))
        return cls(pairs)


def spearman(embeddings: EmbeddingSet, judgments: SimilarityJudgments) -> tuple[float, int]:
    """Spearman rho between cosine and human scores over usable pairs.

    Pairs with either token missing are excluded; ties get average ranks.
    Returns (rho, pairs_used).
    """
    ours, theirs = [], []
    for w1, w2, score in judgments.pairs:
        if w1 in embeddings.index and w2 in embeddings.index:
            ours.append(cosine(embeddings.vector(w1), embeddings.vector(w2)))
            theirs.append(score)
    if len(ours) < 2:
        raise ValueError(f"need at least 2 usable pairs, found {len(ours)}")
    rho = stats.spearmanr(ours, theirs).statistic
    return float(rho), len(ours)


def load_analogies(path: str) -> list[tuple[str, str, str, str]]:
    """Analogy questions: 4 tokens per line; ':' lines are section headers."""
    questions = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith(":"):
                continue
            toks = line.split()
            if len(toks) != 4:
                raise ValueError(f"analogy line needs 4 tokens: {line!r}")
            questions.append(tuple(toks))
    return questions


def analogy_accuracy(embeddings: EmbeddingSet,
                     questions: list[tuple[str, str, str, str]]) -> tuple[float | None, int, int]:
    """Accuracy of b - a + c ~ d by cosine argmax over the full vocabulary.

    The argmax excludes a, b, and c. Questions with any token missing are
    skipped. Returns (accuracy or None when nothing was usable,
    questions_used, questions_skipped).
    """
    normed = embeddings.normalized()
    used = skipped = correct = 0
    for a, b, c, d in questions:
        idx = embeddings.index
        if any(t not in idx for t in (a, b, c, d)):
            skipped += 1
            continue
        target = (normed[idx[b]] - normed[idx[a]] + normed[idx[c]])
        tn = np.linalg.norm(target)
        if tn == 0:
            skipped += 1
            continue
        scores = normed @ (target / tn)
        for t in (a, b, c):
            scores[idx[t]] = -np.inf
        best = int(np.argmax(scores))
        used += 1
        if best == idx[d]:
            correct += 1
    accuracy = correct / used if used else None
    return accuracy, used, skipped


def plant_analogies(embeddings: EmbeddingSet, count: int, seed: int = 0) -> list[tuple[str, str, str, str]]:
    """Questions whose answer is the set's own offset argmax by construction.

    For random (a, b, c) the planted d is argmax cosine against
    b - a + c (excluding a, b, c), so a correct evaluator must score 100%
    on its own set. Exercises the full-vocabulary search path on real
    trained vectors.
    """
    if len(embeddings) < 4:
        raise ValueError("need at least 4 words to plant analogies")
    gen = np.random.Generator(np.random.PCG64(seed))
    normed = embeddings.normalized()
    questions = []
    while len(questions) < count:
        a, b, c = (int(x) for x in gen.choice(len(embeddings), size=3, replace=False))
        target = normed[b] - normed[a] + normed[c]
        tn = np.linalg.norm(target)
        if tn == 0:
            continue
        scores = normed @ (target / tn)
        scores[[a, b, c]] = -np.inf
        d = int(np.argmax(scores))
        words = embeddings.words
        questions.append((words[a], words[b], words[c], words[d]))
    return questions


@dataclass
class AgreementReport:
    """Distribution of |cosine_a - cosine_b| over sampled word pairs."""

    differences: np.ndarray
    pairs_used: int
    histogram: np.ndarray
    bin_edges: np.ndarray

    def fraction_below(self, threshold: float) -> float:
        if self.pairs_used == 0:
            return 0.0
        return float((self.differences < threshold).mean())

    def as_text(self) -> str:
        lines = [f"pairs compared        {self.pairs_used}",
                 f"fraction |diff|<0.06  {self.fraction_below(0.06):.3f}",
                 f"fraction |diff|<0.1   {self.fraction_below(0.1):.3f}"]
        for lo, hi, n in zip(self.bin_edges[:-1], self.bin_edges[1:], self.histogram):
            lines.append(f"  [{lo:.2f}, {hi:.2f})  {int(n)}")
        return "\n".join(lines)


def agreement_report(set_a: EmbeddingSet, set_b: EmbeddingSet,
                     pairs: list[tuple[str, str]]) -> AgreementReport:
    """Compare cosine similarities of the same word pairs across two runs."""
    diffs = []
    for w1, w2 in pairs:
        if all(w in set_a.index and w in set_b.index for w in (w1, w2)):
            ca = cosine(set_a.vector(w1), set_a.vector(w2))
            cb = cosine(set_b.vector(w1), set_b.vector(w2))
            diffs.append(abs(ca - cb))
    arr = np.asarray(diffs, dtype=np.float64)
    edges = np.linspace(0.0, 2.0, 21)
    hist, _ = np.histogram(arr, bins=edges)
    return AgreementReport(arr, len(arr), hist, edges)


def sample_pairs(words: list[str], count: int, seed: int = 0) -> list[tuple[str, str]]:
    """Random distinct word pairs for agreement comparisons."""
    gen = np.random.Generator(np.random.PCG64(seed))
    out = []
    n = len(words)
    if n < 2:
        raise ValueError("need at least 2 words")
    while len(out) < count:
        i, j = gen.integers(0, n, size=2)
        if i != j:
            out.append((words[int(i)], words[int(j)]))
    return out
