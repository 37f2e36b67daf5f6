"""Deterministic character n-gram hashing embedder."""

from __future__ import annotations

import hashlib
import re
import threading

import numpy as np

_SPACES = re.compile(r"\s+")


class HashingEmbedder:
    """Maps text to an L2-normalised bag of hashed character n-grams.

    Stable across processes (uses blake2b, not the salted builtin hash), so
    stored memory vectors stay comparable between runs.
    """

    def __init__(self, dim: int = 256, ngram: int = 3, cache_size: int = 4096) -> None:
        if dim < 8:
            raise ValueError("dim must be >= 8")
        if ngram < 1:
            raise ValueError("ngram must be >= 1")
        self.dim = dim
        self.ngram = ngram
        self.cache_size = cache_size
        self._cache: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def _bucket(self, gram: str) -> int:
        digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little") % self.dim

    def embed(self, text: str) -> np.ndarray:
        normalized = _SPACES.sub(" ", text.strip().lower())
        if not normalized:
            raise ValueError("cannot embed empty text")
        with self._lock:
            cached = self._cache.get(normalized)
        if cached is not None:
            return cached
        padded = f" {normalized} "
        vec = np.zeros(self.dim, dtype=np.float64)
        span = min(self.ngram, len(padded))
        for start in range(len(padded) - span + 1):
            vec[self._bucket(padded[start : start + span])] += 1.0
        norm = float(np.linalg.norm(vec))
        if norm > 0:
            vec /= norm
        vec.setflags(write=False)
        with self._lock:
            if len(self._cache) >= self.cache_size:
                self._cache.clear()
            self._cache[normalized] = vec
        return vec

    def embed_many(self, texts: list[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dim), dtype=np.float64)
        return np.vstack([self.embed(text) for text in texts])

    def similarity(self, a: str, b: str) -> float:
        return cosine(self.embed(a), self.embed(b))


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    denom = float(np.linalg.norm(a) * np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.clip(np.dot(a, b) / denom, -1.0, 1.0))


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores, best first (ties by index)."""
    n = scores.shape[0]
    if n == 0 or k <= 0:
        return np.zeros(0, dtype=np.int64)
    neg = -scores
    if k < n:
        # keep every score tied with the k-th so the index tie-break sees all of them
        kth = np.partition(neg, k - 1)[k - 1]
        idx = np.flatnonzero(neg <= kth)
    else:
        idx = np.arange(n)
    order = np.lexsort((idx, neg[idx]))[:k]
    return idx[order]
