"""Bounded-hop BFS recall over the profile graph.

Adjacency comes from degree-hiding padded storage; dummy entries are
stripped after decryption, before traversal. Episodes enter the
candidate set through the provenance of facts incident to each reached
entity, scored confidence * hop_decay^hops.
"""

from __future__ import annotations

from collections import deque
from typing import Callable, Iterable

from memtrust.retrieval.types import CandidateSet

NeighborFn = Callable[[str], list[str]]
FactFn = Callable[[str], Iterable[tuple[float, list[str]]]]  # (confidence, episode_ids)


def graph_recall(seeds: list[str], max_hops: int, neighbors: NeighborFn,
                 facts_for: FactFn, hop_decay: float = 0.5) -> CandidateSet:
    out = CandidateSet()
    best: dict[str, float] = {}
    seen: dict[str, int] = {}
    queue: deque[tuple[str, int]] = deque()
    for s in seeds:
        if s not in seen:
            seen[s] = 0
            queue.append((s, 0))
    while queue:
        entity, hops = queue.popleft()
        decay = hop_decay ** hops
        for confidence, episode_ids in facts_for(entity):
            for ep in episode_ids:
                score = confidence * decay
                if score > best.get(ep, -1.0):
                    best[ep] = score
        if hops < max_hops:
            for nbr in neighbors(entity):
                if nbr not in seen:
                    seen[nbr] = hops + 1
                    queue.append((nbr, hops + 1))
    for ep, score in best.items():
        out.add(ep, "graph", score)
    return out
