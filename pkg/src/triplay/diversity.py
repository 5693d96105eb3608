"""Batch diversity control: smoothed sentence BLEU, dual-modality distances,
threshold clustering, and the neighborhood-density repetition penalty.

Text distance is 1 minus symmetrized BLEU; visual distance is 1 minus cosine.
A batch is clustered per modality by connecting every pair at distance <= tau
(single linkage), and each item is penalized by the relative size of its text
and visual clusters.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .embedding_index import cosine_similarity
from .errors import AsymmetricMatrix

_MAX_ORDER = 4


def _ngram_counts(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def sentence_bleu(candidate: str, reference: str) -> float:
    """Sentence-level BLEU on whitespace tokens, n-gram orders 1..4 with
    uniform weights and the standard brevity penalty.

    Precisions of order >= 2 get add-one smoothing so short strings stay
    finite; unigram precision is left exact, so token-disjoint strings score
    0.0 and token-identical strings score exactly 1.0.
    """
    cand = candidate.split()
    ref = reference.split()
    if not cand:
        return 0.0
    log_sum = 0.0
    for n in range(1, _MAX_ORDER + 1):
        counts = _ngram_counts(cand, n)
        ref_counts = _ngram_counts(ref, n)
        total = max(len(cand) - n + 1, 0)
        matched = sum(min(c, ref_counts[g]) for g, c in counts.items())
        if n == 1:
            if matched == 0:
                return 0.0
            precision = matched / total
        else:
            precision = (matched + 1) / (total + 1)
        log_sum += math.log(precision)
    bleu = math.exp(log_sum / _MAX_ORDER)
    if len(cand) < len(ref):
        bleu *= math.exp(1.0 - len(ref) / len(cand))
    return min(bleu, 1.0)


def text_distance(qi: str, qj: str) -> float:
    """1 - mean of both directional BLEU scores; symmetric, 0 iff token-identical."""
    return 1.0 - 0.5 * (sentence_bleu(qi, qj) + sentence_bleu(qj, qi))


def visual_distance(ei, ej) -> float:
    """1 - cosine similarity; 0 for parallel, 1 for orthogonal, 2 for antipodal."""
    return 1.0 - cosine_similarity(ei, ej)


def text_distance_matrix(texts: list[str]) -> np.ndarray:
    n = len(texts)
    mat = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d = text_distance(texts[i], texts[j])
            mat[i, j] = d
            mat[j, i] = d
    return mat


def visual_distance_matrix(embeddings) -> np.ndarray:
    n = len(embeddings)
    mat = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d = visual_distance(embeddings[i], embeddings[j])
            mat[i, j] = d
            mat[j, i] = d
    return mat


@dataclass
class Clustering:
    """Partition of batch items; cluster ids are the smallest member index."""

    assignment: list[int]
    sizes: dict[int, int]

    def size_of(self, item: int) -> int:
        return self.sizes[self.assignment[item]]


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))
        self.size = [1] * n

    def find(self, x: int) -> int:
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]


def threshold_cluster(distances, tau: float) -> Clustering:
    """Connected components of the graph with an edge wherever distance <= tau.

    The boundary is inclusive: items exactly at tau count as neighbors.
    """
    mat = np.asarray(distances, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise AsymmetricMatrix(f"distance matrix must be square, got {mat.shape}")
    if not np.array_equal(mat, mat.T):
        raise AsymmetricMatrix("distance matrix is not symmetric")
    n = mat.shape[0]
    uf = _UnionFind(n)
    for i in range(n):
        for j in range(i + 1, n):
            if mat[i, j] <= tau:
                uf.union(i, j)
    # Canonical cluster id: the smallest index in the component.
    canonical: dict[int, int] = {}
    for i in range(n):
        root = uf.find(i)
        canonical.setdefault(root, i)
    assignment = [canonical[uf.find(i)] for i in range(n)]
    sizes = Counter(assignment)
    return Clustering(assignment=assignment, sizes=dict(sizes))


@dataclass
class DiversityBatch:
    """Paired (query text, image embedding) items scored as one batch."""

    items: list[tuple[str, np.ndarray]]

    @property
    def n(self) -> int:
        return len(self.items)


def repetition_penalty(
    batch: DiversityBatch, tau_txt: float, tau_vis: float
) -> list[float]:
    """Per-item density penalty: text-cluster share plus visual-cluster share.

    Each term lies in [1/n, 1], so the total lies in [2/n, 2].
    """
    if batch.n < 1:
        raise ValueError("batch must contain at least one item")
    texts = [t for t, _ in batch.items]
    embeds = [e for _, e in batch.items]
    txt_clusters = threshold_cluster(text_distance_matrix(texts), tau_txt)
    vis_clusters = threshold_cluster(visual_distance_matrix(embeds), tau_vis)
    n = batch.n
    return [
        txt_clusters.size_of(i) / n + vis_clusters.size_of(i) / n for i in range(n)
    ]


def text_repetition_penalty(texts: list[str], tau_txt: float) -> list[float]:
    """Text-only variant used for question batches: cluster share in [1/n, 1]."""
    if not texts:
        raise ValueError("need at least one text")
    clusters = threshold_cluster(text_distance_matrix(texts), tau_txt)
    n = len(texts)
    return [clusters.size_of(i) / n for i in range(n)]
