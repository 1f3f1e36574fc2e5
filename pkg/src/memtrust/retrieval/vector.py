"""Vector recall: HNSW with greedy-with-noise traversal and k-anonymity
bucket fetching.

The index keeps cosine-normalized vectors. Payload storage is
partitioned into fixed-capacity buckets; every query fetches k buckets
(one real, k-1 uniformly sampled dummies) in shuffled order, so the
observable fetch pattern is independent of which bucket actually holds
the answer. Dummy-visit noise during traversal blurs the in-memory
access trace at a tunable rate.
"""

from __future__ import annotations

import heapq
import math
import random
from dataclasses import dataclass

from memtrust.retrieval.types import CandidateSet


def _normalize(v: list[float]) -> list[float]:
    norm = math.sqrt(sum(x * x for x in v))
    if norm == 0.0:
        return list(v)
    return [x / norm for x in v]


def cosine(a: list[float], b: list[float]) -> float:
    # inputs already normalized
    return sum(x * y for x, y in zip(a, b))


@dataclass
class _Node:
    vec_id: str
    vector: list[float]
    level: int
    neighbors: list[list[int]]  # per level


class Hnsw:
    """Hierarchical navigable small world graph over cosine distance."""

    def __init__(self, m: int = 16, ef_construct: int = 200, rng: random.Random | None = None):
        self.m = m
        self.m_max0 = 2 * m
        self.ef_construct = ef_construct
        self.ml = 1.0 / math.log(m)
        self.rng = rng or random.Random(0)
        self.nodes: list[_Node] = []
        self.entry: int | None = None
        self.max_level = -1
        self.last_visit_count = 0

    def __len__(self) -> int:
        return len(self.nodes)

    def _dist(self, a: list[float], i: int) -> float:
        return 1.0 - cosine(a, self.nodes[i].vector)

    def add(self, vec_id: str, vector: list[float]) -> None:
        vector = _normalize(vector)
        level = int(-math.log(max(self.rng.random(), 1e-12)) * self.ml)
        node = _Node(vec_id, vector, level, [[] for _ in range(level + 1)])
        idx = len(self.nodes)
        self.nodes.append(node)
        if self.entry is None:
            self.entry = idx
            self.max_level = level
            return
        ep = [self.entry]
        for lc in range(self.max_level, level, -1):
            ep = [self._search_layer(vector, ep, 1, lc)[0][1]]
        for lc in range(min(level, self.max_level), -1, -1):
            cands = self._search_layer(vector, ep, self.ef_construct, lc)
            m_max = self.m_max0 if lc == 0 else self.m
            chosen = [i for _, i in cands[: self.m]]
            node.neighbors[lc] = chosen
            for c in chosen:
                nbrs = self.nodes[c].neighbors[lc]
                nbrs.append(idx)
                if len(nbrs) > m_max:
                    nbrs.sort(key=lambda j: self._dist(self.nodes[c].vector, j))
                    del nbrs[m_max:]
            ep = [i for _, i in cands]
        if level > self.max_level:
            self.max_level = level
            self.entry = idx

    def _search_layer(self, q: list[float], entry_points: list[int], ef: int,
                      layer: int, rho: float = 0.0) -> list[tuple[float, int]]:
        visited = set(entry_points)
        candidates = [(self._dist(q, i), i) for i in entry_points]
        heapq.heapify(candidates)
        results = [(-d, i) for d, i in candidates]
        heapq.heapify(results)
        self.last_visit_count += len(visited)

        def visit(j: int) -> None:
            if j in visited:
                return
            visited.add(j)
            self.last_visit_count += 1
            d = self._dist(q, j)
            if len(results) < ef or d < -results[0][0]:
                heapq.heappush(candidates, (d, j))
                heapq.heappush(results, (-d, j))
                if len(results) > ef:
                    heapq.heappop(results)

        while candidates:
            d, i = heapq.heappop(candidates)
            if len(results) >= ef and d > -results[0][0]:
                break
            nbrs = [j for j in self.nodes[i].neighbors[layer] if j is not None]
            for j in nbrs:
                visit(j)
            # greedy-with-noise: probabilistically take a decoy detour
            if rho > 0.0 and nbrs and self.rng.random() < rho:
                decoy = self.rng.choice(nbrs)
                for j in self.nodes[decoy].neighbors[layer]:
                    visit(j)
        return sorted(((-nd, i) for nd, i in results))

    def search(self, q: list[float], k: int, ef: int, rho: float = 0.0) -> list[tuple[str, float]]:
        if self.entry is None:
            return []
        q = _normalize(q)
        self.last_visit_count = 0
        ep = [self.entry]
        for lc in range(self.max_level, 0, -1):
            ep = [self._search_layer(q, ep, 1, lc, rho=rho)[0][1]]
        found = self._search_layer(q, ep, max(ef, k), 0, rho=rho)
        return [(self.nodes[i].vec_id, 1.0 - d) for d, i in found[:k]]


class BucketedVectorIndex:
    """Exact or HNSW vector search plus obliviously fetched payload buckets."""

    def __init__(self, dim: int, mode: str = "hnsw", m: int = 16,
                 ef_construct: int = 200, ef_search: int = 64,
                 bucket_capacity: int = 64, rho: float = 0.1,
                 rng: random.Random | None = None):
        if mode not in ("exact", "hnsw"):
            raise ValueError(f"unknown mode {mode!r}")
        self.dim = dim
        self.mode = mode
        self.ef_search = ef_search
        self.bucket_capacity = bucket_capacity
        self.rho = rho
        self.rng = rng or random.Random(0)
        self.hnsw = Hnsw(m=m, ef_construct=ef_construct, rng=self.rng)
        self._vectors: dict[str, list[float]] = {}
        self._bucket_of: dict[str, int] = {}
        self._buckets: list[list[str]] = []
        self._removed: set[str] = set()
        self.fetch_listeners: list = []  # callables (bucket_id, n_entries)

    def __len__(self) -> int:
        return len(self._vectors)

    def add(self, vec_id: str, vector: list[float]) -> None:
        if len(vector) != self.dim:
            raise ValueError(f"expected dim {self.dim}, got {len(vector)}")
        v = _normalize(vector)
        self._vectors[vec_id] = v
        if not self._buckets or len(self._buckets[-1]) >= self.bucket_capacity:
            self._buckets.append([])
        self._buckets[-1].append(vec_id)
        self._bucket_of[vec_id] = len(self._buckets) - 1
        self.hnsw.add(vec_id, v)

    def remove(self, vec_id: str) -> None:
        # HNSW node stays as a tombstoned waypoint; it never surfaces in
        # results and its bucket slot becomes a dummy.
        self._removed.add(vec_id)
        self._vectors.pop(vec_id, None)

    @property
    def bucket_count(self) -> int:
        return len(self._buckets)

    def _fetch_bucket(self, bucket_id: int) -> list[tuple[str, list[float] | None]]:
        """Constant-volume bucket read: always capacity entries, dummies padded."""
        real = [(vid, self._vectors.get(vid)) for vid in self._buckets[bucket_id]
                if vid not in self._removed]
        dummies = [(f"__dummy_{bucket_id}_{i}", None)
                   for i in range(self.bucket_capacity - len(real))]
        for listener in self.fetch_listeners:
            listener(bucket_id, self.bucket_capacity)
        return real + dummies

    def oblivious_fetch(self, real_bucket_id: int, k_anonymity: int):
        """Fetch the real bucket hidden among k-1 uniformly sampled others,
        in uniformly shuffled order. Filtering happens after the fetch,
        inside the trust boundary."""
        if k_anonymity < 1:
            raise ValueError("k_anonymity must be >= 1")
        n = self.bucket_count
        if n == 0:
            return []
        k = min(k_anonymity, n)
        others = [b for b in range(n) if b != real_bucket_id]
        ids = [real_bucket_id] + self.rng.sample(others, k - 1)
        self.rng.shuffle(ids)
        return [(bid, self._fetch_bucket(bid)) for bid in ids]

    def vector_recall(self, q: list[float], k: int, rho: float | None = None,
                      k_anonymity: int = 1) -> CandidateSet:
        if len(q) != self.dim:
            raise ValueError(f"expected dim {self.dim}, got {len(q)}")
        rho = self.rho if rho is None else rho
        if not (0.0 <= rho < 1.0):
            raise ValueError("rho must be in [0, 1)")
        out = CandidateSet()
        if not self._vectors:
            return out
        qn = _normalize(q)
        if self.mode == "exact":
            scored = sorted(
                ((cosine(qn, v), vid) for vid, v in self._vectors.items()),
                key=lambda sv: (-sv[0], sv[1]),
            )[:k]
            hits = [(vid, s) for s, vid in scored]
        else:
            raw = self.hnsw.search(qn, k + len(self._removed), max(self.ef_search, k), rho=rho)
            hits = [(vid, s) for vid, s in raw if vid not in self._removed][:k]
        if hits:
            real_bucket = self._bucket_of.get(hits[0][0], 0)
            self.oblivious_fetch(real_bucket, k_anonymity)
        for vid, score in hits:
            out.add(vid, "vector", score)
        return out

    def brute_force_top_k(self, q: list[float], k: int) -> list[str]:
        """Independent exact oracle over plain cosine similarity."""
        qn = _normalize(q)
        scored = sorted(
            ((cosine(qn, v), vid) for vid, v in self._vectors.items()),
            key=lambda sv: (-sv[0], sv[1]),
        )
        return [vid for _, vid in scored[:k]]
