from __future__ import annotations

from dataclasses import dataclass, field


@dataclass(frozen=True)
class Candidate:
    doc_id: str
    source: str  # keyword | vector | graph
    raw_score: float


@dataclass
class CandidateSet:
    entries: list[Candidate] = field(default_factory=list)

    def add(self, doc_id: str, source: str, raw_score: float) -> None:
        self.entries.append(Candidate(doc_id, source, raw_score))

    def extend(self, other: "CandidateSet") -> None:
        self.entries.extend(other.entries)

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class ContextFrame:
    query_id: str
    ranked: list[tuple[str, float, list[str]]]  # (doc_id, fused_score, sources)

    def doc_ids(self) -> list[str]:
        return [doc_id for doc_id, _, _ in self.ranked]

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "ranked": [
                {"doc_id": d, "score": s, "sources": src}
                for d, s, src in self.ranked
            ],
        }
