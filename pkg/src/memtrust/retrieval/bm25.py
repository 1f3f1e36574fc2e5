"""Internal BM25 inverted index (k1=1.2, b=0.75)."""

from __future__ import annotations

import math
import re
from collections import Counter

from memtrust.retrieval.types import CandidateSet

_TOKEN = re.compile(r"\w+")


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


class InvertedIndex:
    def __init__(self, k1: float = 1.2, b: float = 0.75):
        self.k1 = k1
        self.b = b
        self.postings: dict[str, dict[str, int]] = {}  # term -> {doc_id: tf}
        self.doc_lengths: dict[str, int] = {}

    @property
    def n_docs(self) -> int:
        return len(self.doc_lengths)

    @property
    def avgdl(self) -> float:
        if not self.doc_lengths:
            return 0.0
        return sum(self.doc_lengths.values()) / len(self.doc_lengths)

    def add_document(self, doc_id: str, text: str) -> None:
        if doc_id in self.doc_lengths:
            self.remove_document(doc_id)
        tokens = tokenize(text)
        self.doc_lengths[doc_id] = len(tokens)
        for term, tf in Counter(tokens).items():
            self.postings.setdefault(term, {})[doc_id] = tf

    def remove_document(self, doc_id: str) -> None:
        self.doc_lengths.pop(doc_id, None)
        for term in list(self.postings):
            self.postings[term].pop(doc_id, None)
            if not self.postings[term]:
                del self.postings[term]

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, {}))
        return math.log(1.0 + (self.n_docs - df + 0.5) / (df + 0.5))

    def keyword_recall(self, query_terms: list[str], top_n: int) -> CandidateSet:
        out = CandidateSet()
        if not query_terms or not self.doc_lengths:
            return out
        avgdl = self.avgdl
        scores: dict[str, float] = {}
        for term in query_terms:
            docs = self.postings.get(term)
            if not docs:
                continue  # absent term contributes zero
            idf = self.idf(term)
            for doc_id, tf in docs.items():
                dl = self.doc_lengths[doc_id]
                denom = tf + self.k1 * (1 - self.b + self.b * dl / avgdl)
                scores[doc_id] = scores.get(doc_id, 0.0) + idf * tf * (self.k1 + 1) / denom
        ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))[:top_n]
        for doc_id, score in ranked:
            out.add(doc_id, "keyword", score)
        return out
