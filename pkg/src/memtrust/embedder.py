"""Deterministic hash-based test embedder.

Maps token unigrams and bigrams into a fixed-dimension vector through a
keyed hash, so retrieval tests are reproducible without any model. Real
embedders plug in behind the same ``embed`` callable.
"""

from __future__ import annotations

import hashlib
import math

from memtrust.retrieval.bm25 import tokenize


class HashEmbedder:
    def __init__(self, dim: int = 64, key: bytes = b"memtrust-embed-v1"):
        self.dim = dim
        self.key = key

    def embed(self, text: str) -> list[float]:
        v = [0.0] * self.dim
        tokens = tokenize(text)
        grams = tokens + [f"{a} {b}" for a, b in zip(tokens, tokens[1:])]
        for gram in grams:
            h = hashlib.sha256(self.key + gram.encode("utf-8")).digest()
            idx = int.from_bytes(h[:4], "big") % self.dim
            sign = 1.0 if h[4] & 1 else -1.0
            v[idx] += sign
        norm = math.sqrt(sum(x * x for x in v))
        if norm > 0:
            v = [x / norm for x in v]
        return v
