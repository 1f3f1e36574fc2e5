"""Layer 5 governance.

Policy evaluation over a prioritized rule list whose canonical bytes
are folded into the service measurement; a hash-chained append-only
audit log whose heads are periodically anchored (signed) into an
external transparency-log file; and session tickets bound to both the
measurement and the handshake channel key.
"""

from __future__ import annotations

import fnmatch
import hashlib
import os
import struct
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from memtrust.canonical import canonical_json
from memtrust.errors import DurableWriteError, PolicyError
from memtrust.ingest import SessionContext
from memtrust.tee import Measurement, TeeSimulator, verify_signature

GENESIS_HASH = b"\x00" * 32

# -- policy ------------------------------------------------------------

ACTIONS = ("remember", "recall", "forget", "migrate")


@dataclass(frozen=True)
class Policy:
    rule_id: str
    subject: str  # agent id or glob
    resource: str  # label glob
    action: str
    effect: str  # allow | deny
    priority: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "Policy":
        if d["effect"] not in ("allow", "deny"):
            raise PolicyError(f"bad effect {d['effect']!r}")
        if d["action"] not in ACTIONS + ("*",):
            raise PolicyError(f"bad action {d['action']!r}")
        return cls(
            rule_id=str(d.get("rule_id", "")),
            subject=str(d["subject"]),
            resource=str(d["resource"]),
            action=str(d["action"]),
            effect=str(d["effect"]),
            priority=int(d.get("priority", 0)),
        )


def policy_bundle_bytes(rules: list[Policy]) -> bytes:
    """Canonical bytes of a bundle; this is what measurement covers."""
    return canonical_json([
        {
            "rule_id": r.rule_id, "subject": r.subject, "resource": r.resource,
            "action": r.action, "effect": r.effect, "priority": r.priority,
        }
        for r in rules
    ])


def load_policy_bundle(raw: bytes) -> list[Policy]:
    import json

    return [Policy.from_dict(d) for d in json.loads(raw.decode("utf-8"))]


def evaluate(bundle: list[Policy], actor: str, action: str,
             resource: str) -> tuple[str, str | None]:
    """Highest-priority matching rule wins; no match means deny."""
    best: Policy | None = None
    for rule in bundle:
        if rule.action not in (action, "*"):
            continue
        if not fnmatch.fnmatchcase(actor, rule.subject):
            continue
        if not fnmatch.fnmatchcase(resource, rule.resource):
            continue
        if best is None or rule.priority > best.priority:
            best = rule
    if best is None:
        return "deny", None
    return best.effect, best.rule_id


# -- audit chain -------------------------------------------------------

@dataclass(frozen=True)
class AuditEntry:
    index: int
    prev_hash: bytes
    timestamp: float
    actor: str
    action: str
    resource: str
    decision: str
    entry_hash: bytes = b""

    def canonical_body(self) -> bytes:
        return canonical_json({
            "index": self.index,
            "prev_hash": self.prev_hash.hex(),
            "timestamp": self.timestamp,
            "actor": self.actor,
            "action": self.action,
            "resource": self.resource,
            "decision": self.decision,
        })

    def compute_hash(self) -> bytes:
        return hashlib.sha256(self.prev_hash + self.canonical_body()).digest()


@dataclass(frozen=True)
class AnchorRecord:
    head_index: int
    head_hash: bytes
    anchored_at: str  # iso8601
    signature: bytes

    def signed_payload(self) -> bytes:
        return f"anchor {self.head_index} {self.head_hash.hex()} {self.anchored_at}".encode()

    def to_line(self) -> str:
        return (f"anchor {self.head_index} {self.head_hash.hex()} "
                f"{self.anchored_at} {self.signature.hex()}")

    @classmethod
    def from_line(cls, line: str) -> "AnchorRecord":
        parts = line.split()
        if len(parts) != 5 or parts[0] != "anchor":
            raise ValueError(f"bad anchor line: {line!r}")
        return cls(int(parts[1]), bytes.fromhex(parts[2]), parts[3],
                   bytes.fromhex(parts[4]))


@dataclass
class ChainReport:
    ok: bool
    entries: int
    errors: list[str] = field(default_factory=list)


def _iso_now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


class AuditLog:
    """Append-only, length-prefixed canonical-JSON entries, hash chained.

    Appends are durable (flush+fsync) before the guarded operation's
    response is released: log-before-act.
    """

    def __init__(self, log_path: str | Path, anchor_path: str | Path,
                 tee: TeeSimulator, anchor_every_entries: int = 64,
                 anchor_every_s: float = 60.0):
        self.log_path = Path(log_path)
        self.anchor_path = Path(anchor_path)
        self.tee = tee
        self.anchor_every_entries = anchor_every_entries
        self.anchor_every_s = anchor_every_s
        self._lock = threading.Lock()
        self._entries: list[AuditEntry] = []
        self._last_anchor_time = time.monotonic()
        self.log_path.parent.mkdir(parents=True, exist_ok=True)
        if self.log_path.exists():
            self._entries = read_log_entries(self.log_path)

    @property
    def head_hash(self) -> bytes:
        return self._entries[-1].entry_hash if self._entries else GENESIS_HASH

    @property
    def head_index(self) -> int:
        return self._entries[-1].index if self._entries else -1

    def append(self, actor: str, action: str, resource: str,
               decision: str) -> AuditEntry:
        with self._lock:
            entry = AuditEntry(
                index=len(self._entries),
                prev_hash=self.head_hash,
                timestamp=time.time(),
                actor=actor,
                action=action,
                resource=resource,
                decision=decision,
            )
            entry = AuditEntry(**{**vars(entry), "entry_hash": entry.compute_hash()})
            body = entry.canonical_body()
            try:
                with open(self.log_path, "ab") as f:
                    f.write(struct.pack(">I", len(body)) + body)
                    f.flush()
                    os.fsync(f.fileno())
            except OSError as exc:
                raise DurableWriteError(f"audit append failed: {exc}") from exc
            self._entries.append(entry)
        if (len(self._entries) % self.anchor_every_entries == 0
                or time.monotonic() - self._last_anchor_time >= self.anchor_every_s):
            self.anchor_head()
        return entry

    def anchor_head(self) -> AnchorRecord:
        with self._lock:
            if not self._entries:
                raise ValueError("cannot anchor an empty log")
            record = AnchorRecord(
                head_index=self.head_index,
                head_hash=self.head_hash,
                anchored_at=_iso_now(),
                signature=b"",
            )
            record = AnchorRecord(record.head_index, record.head_hash,
                                  record.anchored_at,
                                  self.tee.sign(record.signed_payload()))
            with open(self.anchor_path, "a") as f:
                f.write(record.to_line() + "\n")
                f.flush()
                os.fsync(f.fileno())
            self._last_anchor_time = time.monotonic()
            return record

    def chain_hashes(self) -> list[bytes]:
        return [e.entry_hash for e in self._entries]


def read_log_entries(log_path: str | Path) -> list[AuditEntry]:
    import json

    raw = Path(log_path).read_bytes()
    entries: list[AuditEntry] = []
    off = 0
    while off < len(raw):
        (n,) = struct.unpack(">I", raw[off : off + 4])
        body = raw[off + 4 : off + 4 + n]
        doc = json.loads(body.decode("utf-8"))
        entry = AuditEntry(
            index=doc["index"],
            prev_hash=bytes.fromhex(doc["prev_hash"]),
            timestamp=doc["timestamp"],
            actor=doc["actor"],
            action=doc["action"],
            resource=doc["resource"],
            decision=doc["decision"],
        )
        # the hash covers the stored bytes; an equivalent but re-encoded
        # body (e.g. uppercase hex) must not verify
        if entry.canonical_body() != body:
            raise ValueError(f"entry at offset {off} is not canonically encoded")
        entries.append(AuditEntry(**{**vars(entry),
                                     "entry_hash": entry.compute_hash()}))
        off += 4 + n
    return entries


def verify_chain(log_path: str | Path, anchor_path: str | Path,
                 identity_pubkey: bytes) -> ChainReport:
    """Recompute the chain from disk and check every anchored head."""
    report = ChainReport(ok=True, entries=0)
    try:
        entries = read_log_entries(log_path)
    except Exception as exc:
        return ChainReport(ok=False, entries=0, errors=[f"unreadable log: {exc}"])
    report.entries = len(entries)
    prev = GENESIS_HASH
    hashes: dict[int, bytes] = {}
    for i, e in enumerate(entries):
        if e.index != i:
            report.errors.append(f"entry {i}: index gap (recorded {e.index})")
            report.ok = False
            break
        if e.prev_hash != prev:
            report.errors.append(f"entry {i}: broken hash link")
            report.ok = False
            break
        prev = e.entry_hash
        hashes[i] = e.entry_hash
    anchor_file = Path(anchor_path)
    anchors: list[AnchorRecord] = []
    if anchor_file.exists():
        for line in anchor_file.read_text().splitlines():
            if not line.strip() or not line.startswith("anchor "):
                continue
            try:
                anchors.append(AnchorRecord.from_line(line))
            except ValueError as exc:
                report.errors.append(f"bad-anchor: {exc}")
                report.ok = False
    for a in anchors:
        if not verify_signature(identity_pubkey, a.signed_payload(), a.signature):
            report.errors.append(f"bad-anchor: signature invalid at index {a.head_index}")
            report.ok = False
            continue
        if a.head_index >= len(entries):
            report.errors.append(
                f"truncation-after-anchor: anchored head {a.head_index} "
                f"but log ends at {len(entries) - 1}"
            )
            report.ok = False
        elif hashes.get(a.head_index) != a.head_hash:
            report.errors.append(
                f"fork: anchored hash mismatch at index {a.head_index}"
            )
            report.ok = False
    return report


# -- session tickets ---------------------------------------------------

@dataclass(frozen=True)
class SessionTicket:
    session_id: str
    client: str
    measurement: str  # hex digest
    channel_binding: str  # hex sha256(channel_key)
    issued_at: float
    expires_at: float
    signature: bytes

    def signed_payload(self) -> bytes:
        return canonical_json({
            "session_id": self.session_id,
            "client": self.client,
            "measurement": self.measurement,
            "channel_binding": self.channel_binding,
            "issued_at": self.issued_at,
            "expires_at": self.expires_at,
        })

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id, "client": self.client,
            "measurement": self.measurement,
            "channel_binding": self.channel_binding,
            "issued_at": self.issued_at, "expires_at": self.expires_at,
            "signature": self.signature.hex(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SessionTicket":
        return cls(
            session_id=str(d["session_id"]), client=str(d["client"]),
            measurement=str(d["measurement"]),
            channel_binding=str(d["channel_binding"]),
            issued_at=float(d["issued_at"]), expires_at=float(d["expires_at"]),
            signature=bytes.fromhex(d["signature"]),
        )


def channel_binding(channel_key: bytes) -> str:
    return hashlib.sha256(channel_key).hexdigest()


def issue_ticket(tee: TeeSimulator, session: SessionContext, client: str = "",
                 lifetime_s: float = 900.0, now: float | None = None) -> SessionTicket:
    now = time.time() if now is None else now
    t = SessionTicket(
        session_id=session.session_id,
        client=client,
        measurement=tee.measurement.hex,
        channel_binding=channel_binding(session.channel_key),
        issued_at=now,
        expires_at=now + lifetime_s,
        signature=b"",
    )
    return SessionTicket(**{**vars(t), "signature": tee.sign(t.signed_payload())})


def validate_ticket(ticket: SessionTicket, session: SessionContext,
                    current_measurement: Measurement, identity_pubkey: bytes,
                    now: float | None = None) -> tuple[bool, str]:
    now = time.time() if now is None else now
    if not verify_signature(identity_pubkey, ticket.signed_payload(),
                            ticket.signature):
        return False, "bad-signature"
    if now > ticket.expires_at:
        return False, "expired"
    if ticket.channel_binding != channel_binding(session.channel_key):
        return False, "channel-mismatch"
    if ticket.measurement != current_measurement.hex:
        return False, "measurement-mismatch"
    return True, "ok"
