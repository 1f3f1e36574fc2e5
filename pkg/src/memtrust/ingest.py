"""Layer 2 ingestion.

Three concerns: the attestation-embedded session handshake (the report
is minted over the caller's nonce and the channel key comes out of an
ephemeral X25519 agreement), rule-based PII sanitization with
session-stable placeholders, and a fixed-rate update queue that pads
every tick to a constant number of storage writes with dummy traffic.
"""

from __future__ import annotations

import os
import random
import re
import threading
import uuid
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

from cryptography.hazmat.primitives.asymmetric import x25519
from cryptography.hazmat.primitives.hashes import SHA256
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from memtrust.errors import BackpressureError, ProtocolError
from memtrust.store import SealedStore
from memtrust.tee import AttestationReport, TeeSimulator

# -- PII rules ---------------------------------------------------------

EMAIL_RE = r"[A-Za-z0-9._%+-]+@[A-Za-z0-9.-]+\.[A-Za-z]{2,}"
PHONE_RE = r"\+?\d{1,3}[-. (]?\d{3}[-. )]?\d{3}[-. ]?\d{4}"
CARD_RE = r"(?<!\d)(?:\d[ -]?){13,19}(?!\d)"

DEFAULT_RULES: list[tuple[str, str]] = [
    ("EMAIL", EMAIL_RE),
    ("PHONE", PHONE_RE),
    ("CARD", CARD_RE),
]


def luhn_valid(digits: str) -> bool:
    ds = [int(c) for c in digits if c.isdigit()]
    if len(ds) < 13:
        return False
    total = 0
    for i, d in enumerate(reversed(ds)):
        if i % 2 == 1:
            d *= 2
            if d > 9:
                d -= 9
        total += d
    return total % 10 == 0


@dataclass
class RuleSet:
    patterns: list[tuple[str, re.Pattern]] = field(default_factory=list)
    names: list[str] = field(default_factory=list)

    @classmethod
    def default(cls, names: list[str] | None = None) -> "RuleSet":
        rs = cls(patterns=[(c, re.compile(p)) for c, p in DEFAULT_RULES])
        rs.names = list(names or [])
        return rs

    @classmethod
    def load(cls, path: str | Path) -> "RuleSet":
        """One rule per line `CATEGORY<TAB>regex`, plus `@namelist <path>`."""
        rs = cls()
        base = Path(path).parent
        for raw in Path(path).read_text().splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("@namelist"):
                name_path = base / line.split(None, 1)[1]
                rs.names.extend(
                    n.strip() for n in name_path.read_text().splitlines() if n.strip()
                )
                continue
            category, _, pattern = line.partition("\t")
            if not pattern:
                raise ValueError(f"bad rule line: {raw!r}")
            rs.patterns.append((category.strip(), re.compile(pattern)))
        return rs

    def find_matches(self, text: str) -> list[tuple[int, int, str]]:
        """(start, end, category) for every rule hit, overlaps unresolved."""
        matches: list[tuple[int, int, str]] = []
        for category, pattern in self.patterns:
            for m in pattern.finditer(text):
                if category == "CARD" and not luhn_valid(m.group()):
                    continue
                matches.append((m.start(), m.end(), category))
        for name in self.names:
            for m in re.finditer(re.escape(name), text):
                matches.append((m.start(), m.end(), "PERSON"))
        return matches


@dataclass
class SanitizedEvent:
    original_len: int
    text: str
    spans: list[tuple[int, int, str, str]]  # (start, end, category, placeholder)


class EntityMap:
    """Session-scoped bijection between original strings and placeholders.

    The same entity always maps to the same `[CATEGORY_n]` token within
    one session; numbering is sequential per category in order of first
    appearance.
    """

    def __init__(self):
        self.forward: dict[str, str] = {}  # original -> placeholder
        self.backward: dict[str, str] = {}
        self._counters: dict[str, int] = {}

    def placeholder_for(self, original: str, category: str) -> str:
        if original in self.forward:
            return self.forward[original]
        n = self._counters.get(category, 0) + 1
        self._counters[category] = n
        token = f"[{category}_{n}]"
        self.forward[original] = token
        self.backward[token] = original
        return token


def _resolve_overlaps(matches: list[tuple[int, int, str]]) -> list[tuple[int, int, str]]:
    # longest-match-first, then left-to-right
    chosen: list[tuple[int, int, str]] = []
    for m in sorted(matches, key=lambda m: (-(m[1] - m[0]), m[0])):
        if all(m[1] <= c[0] or m[0] >= c[1] for c in chosen):
            chosen.append(m)
    return sorted(chosen)


PLACEHOLDER_RE = re.compile(r"\[([A-Z]+)_(\d+)\]")


def mask_once(text: str, rules: RuleSet, entities: EntityMap) -> str:
    out: list[str] = []
    cursor = 0
    for start, end, category in _resolve_overlaps(rules.find_matches(text)):
        out.append(text[cursor:start])
        out.append(entities.placeholder_for(text[start:end], category))
        cursor = end
    out.append(text[cursor:])
    return "".join(out)


def mask_to_fixpoint(text: str, rules: RuleSet, entities: EntityMap,
                     max_rounds: int = 10) -> str:
    """Repeat masking until no rule matches survive.

    A single greedy pass can leave remnants when one match spans the
    boundary of two adjacent sensitive values; iterating closes that.
    """
    for _ in range(max_rounds):
        masked = mask_once(text, rules, entities)
        if masked == text:
            return masked
        text = masked
    return text


def sanitize(text: str, rules: RuleSet, entities: EntityMap | None = None) -> SanitizedEvent:
    entities = entities if entities is not None else EntityMap()
    original_len = len(text)
    masked = mask_to_fixpoint(text, rules, entities)
    spans = [
        (m.start(), m.end(), m.group(1), m.group())
        for m in PLACEHOLDER_RE.finditer(masked)
        if m.group() in entities.backward
    ]
    return SanitizedEvent(original_len=original_len, text=masked, spans=spans)


# -- handshake ---------------------------------------------------------

@dataclass
class SessionContext:
    session_id: str
    client_nonce: bytes
    channel_key: bytes
    established_at: int
    report: AttestationReport
    entities: EntityMap = field(default_factory=EntityMap)


def derive_channel_key(shared_secret: bytes, client_nonce: bytes) -> bytes:
    return HKDF(
        algorithm=SHA256(), length=32, salt=client_nonce, info=b"ump channel"
    ).derive(shared_secret)


def server_handshake(tee: TeeSimulator, client_hello: dict) -> tuple[SessionContext, dict]:
    """Process a client hello, returning the session and the server hello
    (before ticket attachment, which governance owns)."""
    try:
        client_nonce = bytes.fromhex(client_hello["nonce"])
        client_pub = bytes.fromhex(client_hello["client_ephemeral_pubkey"])
        if len(client_nonce) != 32 or len(client_pub) != 32:
            raise ValueError("bad field length")
    except (KeyError, ValueError, TypeError) as exc:
        raise ProtocolError(f"malformed client hello: {exc}") from exc
    eph = x25519.X25519PrivateKey.generate()
    shared = eph.exchange(x25519.X25519PublicKey.from_public_bytes(client_pub))
    channel_key = derive_channel_key(shared, client_nonce)
    report = tee.generate_report(nonce=client_nonce)
    session = SessionContext(
        session_id=uuid.uuid4().hex,
        client_nonce=client_nonce,
        channel_key=channel_key,
        established_at=report.issued_at,
        report=report,
    )
    server_hello = {
        "report": report.to_dict(),
        "server_ephemeral_pubkey": eph.public_key().public_bytes_raw().hex(),
        "session_id": session.session_id,
    }
    return session, server_hello


# -- oblivious update queue --------------------------------------------

@dataclass
class UpdateBatch:
    tick_index: int
    entries: list[dict]  # each {"real": bool, "unit_id": ..., ...}


class UpdateQueue:
    """Fixed-rate pipeline: every tick performs exactly batch_size
    storage writes, padding with dummy events whose lengths mimic the
    empirical distribution of recent real traffic."""

    def __init__(self, store: SealedStore, batch_size: int = 4,
                 high_water: int = 1024, rng: random.Random | None = None):
        self.store = store
        self.batch_size = batch_size
        self.high_water = high_water
        self.rng = rng or random.Random()
        self._queue: deque[tuple[str, bytes, threading.Event | None]] = deque()
        self._recent_lengths: deque[int] = deque(maxlen=256)
        self._lock = threading.Lock()
        self.tick_index = 0

    def enqueue_update(self, unit_id: str, payload: bytes,
                       done: threading.Event | None = None) -> None:
        with self._lock:
            if len(self._queue) >= self.high_water:
                raise BackpressureError(
                    f"update queue above high-water mark ({self.high_water})"
                )
            self._queue.append((unit_id, payload, done))
            self._recent_lengths.append(len(payload))

    def _dummy_length(self) -> int:
        if self._recent_lengths:
            return self.rng.choice(list(self._recent_lengths))
        return self.rng.randint(200, 2000)

    def tick(self) -> UpdateBatch:
        with self._lock:
            real = []
            while self._queue and len(real) < self.batch_size:
                real.append(self._queue.popleft())
            entries = [
                {"real": True, "unit_id": uid, "payload": payload, "done": done}
                for uid, payload, done in real
            ]
            while len(entries) < self.batch_size:
                entries.append({
                    "real": False,
                    "unit_id": f"chaff:{uuid.uuid4().hex}",
                    "payload": os.urandom(self._dummy_length()),
                    "done": None,
                })
            self.rng.shuffle(entries)
            with self.store.batch():
                for e in entries:
                    # the real/dummy tag lives inside the ciphertext only
                    tagged = (b"\x01" if e["real"] else b"\x00") + e["payload"]
                    self.store.put_object(e["unit_id"], tagged)
            for e in entries:
                if e["done"] is not None:
                    e["done"].set()
            batch = UpdateBatch(tick_index=self.tick_index, entries=entries)
            self.tick_index += 1
            return batch

    def pending(self) -> int:
        with self._lock:
            return len(self._queue)
