"""Layer 4 multi-path recall: keyword, vector, and graph paths fused
into one ranked context frame, with access-pattern hiding on the vector
path (greedy-with-noise traversal, k-anonymity bucket fetching)."""

from memtrust.retrieval.types import Candidate, CandidateSet, ContextFrame
from memtrust.retrieval.bm25 import InvertedIndex, tokenize
from memtrust.retrieval.vector import BucketedVectorIndex
from memtrust.retrieval.graphpath import graph_recall
from memtrust.retrieval.fuse import fuse

__all__ = [
    "Candidate",
    "CandidateSet",
    "ContextFrame",
    "InvertedIndex",
    "BucketedVectorIndex",
    "graph_recall",
    "fuse",
    "tokenize",
]
