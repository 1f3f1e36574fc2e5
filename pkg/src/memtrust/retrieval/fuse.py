"""Fusion ranking: per-source min-max normalization, weighted sum, plus
an exponential recency bonus with a configurable half-life."""

from __future__ import annotations

from memtrust.retrieval.types import CandidateSet, ContextFrame


def fuse(candidates: CandidateSet, weights: dict[str, float],
         recency_half_life_s: float = 7 * 86400.0,
         timestamps: dict[str, float] | None = None,
         now: float = 0.0, query_id: str = "") -> ContextFrame:
    for w in weights.values():
        if w < 0:
            raise ValueError("fusion weights must be non-negative")
    by_source: dict[str, dict[str, float]] = {}
    for c in candidates.entries:
        by_source.setdefault(c.source, {})[c.doc_id] = c.raw_score

    normalized: dict[str, dict[str, float]] = {}
    for source, scores in by_source.items():
        lo, hi = min(scores.values()), max(scores.values())
        span = hi - lo
        normalized[source] = {
            d: 1.0 if span == 0.0 else (s - lo) / span for d, s in scores.items()
        }

    doc_sources: dict[str, list[str]] = {}
    fused: dict[str, float] = {}
    for source, scores in normalized.items():
        w = weights.get(source, 0.0)
        for doc_id, norm in scores.items():
            fused[doc_id] = fused.get(doc_id, 0.0) + w * norm
            doc_sources.setdefault(doc_id, []).append(source)

    w_recency = weights.get("recency", 0.0)
    if w_recency > 0 and timestamps:
        for doc_id in fused:
            ts = timestamps.get(doc_id)
            if ts is not None:
                age = max(0.0, now - ts)
                fused[doc_id] += w_recency * 2.0 ** (-age / recency_half_life_s)

    ranked = sorted(fused.items(), key=lambda kv: (-kv[1], kv[0]))
    return ContextFrame(
        query_id=query_id,
        ranked=[(d, s, sorted(doc_sources[d])) for d, s in ranked],
    )
