"""Layer 3 dual-layer cognition.

Episodic stream plus profile graph. Episodes carry a memory strength S
(seconds) and decay by the Ebbinghaus retention curve R = exp(-t/S);
successful recalls reinforce S multiplicatively. Episodes whose
retention falls below a threshold demote to the cold tier. The decay
sweep is oblivious: regardless of how many items decayed, every block
in the store is rewritten (live units under the new epoch key, dead
units under a discarded garbage key), so the host-visible write trace
depends only on store size.
"""

from __future__ import annotations

import json
import logging
import math
import os
import re
import threading
import time
import uuid
from dataclasses import dataclass, field
from typing import Callable, Iterable, Protocol

from memtrust.canonical import canonical_json
from memtrust.errors import NotFoundError, ShreddedError
from memtrust.keyvault import KeyVault
from memtrust.store import GraphStore, SealedStore
from memtrust.tee import SealedBlob, TeeSimulator

logger = logging.getLogger(__name__)

Clock = Callable[[], float]


def retention(t: float, strength_s: float) -> float:
    """Ebbinghaus retention R = exp(-t/S) for elapsed time t and strength S."""
    if strength_s <= 0:
        raise ValueError(f"strength must be positive, got {strength_s}")
    if t < 0:
        raise ValueError(f"elapsed time must be non-negative, got {t}")
    return math.exp(-t / strength_s)


@dataclass
class Episode:
    episode_id: str
    timestamp: float
    source_app: str
    intent: str
    text: str  # sanitized
    embedding: list[float]
    strength_s: float
    last_event_time: float
    tier: str = "active"  # active | cold
    label: str = "default"  # policy resource label

    @property
    def unit_id(self) -> str:
        return f"ep:{self.episode_id}"


@dataclass
class ProfileFact:
    subject: str
    predicate: str
    object: str
    confidence: float
    provenance: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "subject": self.subject, "predicate": self.predicate,
            "object": self.object, "confidence": self.confidence,
            "provenance": self.provenance,
        }


class Summarizer(Protocol):
    def extract(self, text: str) -> list[tuple[str, str, str]]: ...


class PatternSummarizer:
    """Deterministic stub: pulls (subject, predicate, object) triples out
    of `X prefers Y` and `X works_on Y` phrasings."""

    PATTERNS = [
        (re.compile(r"\b(\w+) prefers (\w+)"), "prefers"),
        (re.compile(r"\b(\w+) works[_ ]on (\w+)"), "works_on"),
    ]

    def extract(self, text: str) -> list[tuple[str, str, str]]:
        triples = []
        for pattern, predicate in self.PATTERNS:
            for m in pattern.finditer(text.lower()):
                triples.append((m.group(1), predicate, m.group(2)))
        return triples


class ProfileGraph:
    """Facts keyed by (subject, predicate) with confidence in [0, 1],
    mirrored into degree-hiding adjacency storage."""

    NEW_CONFIDENCE = 0.6
    REASSERT_STEP = 0.1
    CONTRADICT_STEP = 0.2
    REPLACE_AT = 0.2

    def __init__(self, graph_store: GraphStore | None = None):
        self.graph_store = graph_store
        self.facts: dict[tuple[str, str], ProfileFact] = {}

    def merge(self, subject: str, predicate: str, obj: str,
              episode_id: str) -> ProfileFact:
        key = (subject, predicate)
        fact = self.facts.get(key)
        if fact is None:
            fact = ProfileFact(subject, predicate, obj, self.NEW_CONFIDENCE,
                               [episode_id])
            self.facts[key] = fact
        elif fact.object == obj:
            fact.confidence = min(1.0, fact.confidence + self.REASSERT_STEP)
            if episode_id not in fact.provenance:
                fact.provenance.append(episode_id)
        else:
            fact.confidence -= self.CONTRADICT_STEP
            if fact.confidence <= self.REPLACE_AT:
                fact = ProfileFact(subject, predicate, obj, self.NEW_CONFIDENCE,
                                   [episode_id])
                self.facts[key] = fact
        self._sync_adjacency(subject)
        return fact

    def _sync_adjacency(self, subject: str) -> None:
        if self.graph_store is None:
            return
        self.graph_store.store_adjacency(subject, self.neighbors_of(subject))

    def neighbors_of(self, entity: str) -> list[str]:
        return sorted({
            f.object for (s, _), f in self.facts.items() if s == entity
        })

    def neighbors(self, entity: str) -> list[str]:
        if self.graph_store is not None:
            return self.graph_store.load_adjacency(entity)
        return self.neighbors_of(entity)

    def facts_for(self, entity: str) -> Iterable[tuple[float, list[str]]]:
        for (s, _), f in self.facts.items():
            if s == entity:
                yield f.confidence, list(f.provenance)

    def drop_provenance(self, episode_id: str) -> None:
        for key in list(self.facts):
            f = self.facts[key]
            if episode_id in f.provenance:
                f.provenance.remove(episode_id)
                if not f.provenance:
                    del self.facts[key]
                    self._sync_adjacency(key[0])


@dataclass
class SweepReport:
    epoch: int
    scanned: int
    demoted: int
    rewritten: int

    def log_line(self) -> str:
        return (f"sweep epoch={self.epoch} scanned={self.scanned} "
                f"demoted={self.demoted} rewritten={self.rewritten}")


class MemoryEngine:
    def __init__(self, store: SealedStore, vault: KeyVault, tee: TeeSimulator,
                 graph: ProfileGraph | None = None,
                 clock: Clock = time.time,
                 reinforce_alpha: float = 0.5,
                 decay_threshold: float = 0.05,
                 initial_strength_s: float = 86_400.0):
        self.store = store
        self.vault = vault
        self.tee = tee
        self.graph = graph or ProfileGraph()
        self.clock = clock
        self.alpha = reinforce_alpha
        self.theta = decay_threshold
        self.s0 = initial_strength_s
        self.episodes: dict[str, Episode] = {}
        self._catalog_path = store.root_dir.parent / "catalog.sealed"
        self._catalog_lock = threading.Lock()
        self._load_catalog()

    # -- catalog persistence -------------------------------------------

    def _load_catalog(self) -> None:
        if not self._catalog_path.exists():
            return
        doc = json.loads(self.tee.unseal(
            SealedBlob.from_bytes(self._catalog_path.read_bytes())))
        for e in doc["episodes"]:
            ep = Episode(**e)
            self.episodes[ep.episode_id] = ep
        for f in doc.get("facts", []):
            fact = ProfileFact(**f)
            self.graph.facts[(fact.subject, fact.predicate)] = fact

    def _save_catalog(self) -> None:
        doc = {
            "episodes": [vars(e) for e in self.episodes.values()],
            "facts": [f.to_dict() for f in self.graph.facts.values()],
        }
        blob = self.tee.seal(canonical_json(doc))
        with self._catalog_lock:
            tmp = self._catalog_path.with_suffix(f".{os.getpid()}.{threading.get_ident()}.tmp")
            tmp.write_bytes(blob.to_bytes())
            tmp.replace(self._catalog_path)

    # -- episodic layer ------------------------------------------------

    def add_episode(self, text: str, source_app: str = "", intent: str = "",
                    embedding: list[float] | None = None,
                    episode_id: str | None = None,
                    label: str = "default",
                    store_body: bool = True) -> Episode:
        now = self.clock()
        ep = Episode(
            episode_id=episode_id or uuid.uuid4().hex,
            timestamp=now,
            source_app=source_app,
            intent=intent,
            text=text,
            embedding=embedding or [],
            strength_s=self.s0,
            last_event_time=now,
            label=label,
        )
        self.episodes[ep.episode_id] = ep
        if store_body:
            self.store.put_object(ep.unit_id, text.encode("utf-8"))
        self._save_catalog()
        return ep

    def get_episode(self, episode_id: str) -> Episode:
        ep = self.episodes.get(episode_id)
        if ep is None:
            raise NotFoundError(f"no episode {episode_id!r}")
        if self.vault.is_shredded(ep.unit_id):
            raise ShreddedError(f"episode {episode_id!r} has been shredded")
        return ep

    def current_retention(self, episode_id: str) -> float:
        ep = self.get_episode(episode_id)
        return retention(self.clock() - ep.last_event_time, ep.strength_s)

    def reinforce(self, episode_id: str) -> float:
        ep = self.get_episode(episode_id)
        if ep.tier == "cold":
            return self.recall_promote(episode_id).strength_s
        ep.strength_s *= 1.0 + self.alpha
        ep.last_event_time = self.clock()
        self._save_catalog()
        return ep.strength_s

    def recall_promote(self, episode_id: str) -> Episode:
        ep = self.get_episode(episode_id)
        if ep.tier == "cold":
            # decrypt proves the cold copy is intact before promotion
            self.store.get_object(ep.unit_id)
            self.store.set_tier(ep.unit_id, cold=False)
            ep.tier = "active"
        ep.strength_s *= 1.0 + self.alpha
        ep.last_event_time = self.clock()
        self._save_catalog()
        return ep

    def forget_episode(self, episode_id: str) -> None:
        ep = self.episodes.pop(episode_id, None)
        if ep is not None:
            self.graph.drop_provenance(episode_id)
            self._save_catalog()

    # -- learning layer ------------------------------------------------

    def consolidate(self, window: tuple[float, float],
                    summarizer: Summarizer | None = None) -> list[ProfileFact]:
        summarizer = summarizer or PatternSummarizer()
        t0, t1 = window
        touched: list[ProfileFact] = []
        for ep in sorted(self.episodes.values(), key=lambda e: e.timestamp):
            if not (t0 <= ep.timestamp <= t1):
                continue
            for subject, predicate, obj in summarizer.extract(ep.text):
                touched.append(self.graph.merge(subject, predicate, obj,
                                                ep.episode_id))
        if touched:
            self._save_catalog()
        return touched

    # -- adaptive forgetting -------------------------------------------

    def decay_sweep(self, now: float | None = None) -> SweepReport:
        now = self.clock() if now is None else now
        epoch = self.vault.rotate_epoch()
        demoted = 0
        for ep in self.episodes.values():
            if ep.tier != "active":
                continue
            if retention(now - ep.last_event_time, ep.strength_s) < self.theta:
                ep.tier = "cold"
                self.store.set_tier(ep.unit_id, cold=True)
                demoted += 1
        rewritten = 0
        with self.store.batch():
            for unit_id in self.store.object_units():
                if self.vault.is_shredded(unit_id):
                    self.store.reencrypt_unit(unit_id, key=self.vault.garbage_key())
                else:
                    self.store.reencrypt_unit(unit_id)
                rewritten += 1
        self._save_catalog()
        report = SweepReport(epoch=epoch, scanned=len(self.episodes),
                             demoted=demoted, rewritten=rewritten)
        logger.info(report.log_line())
        return report
