"""Universal Memory Protocol service.

Wire format: 4-byte big-endian length prefix followed by a canonical
JSON body `{op, id, payload, ticket?}`. Responses carry the same `id`
with either `payload` or `error`. Every connection starts with a
`handshake` (or `migrate_hello` for peer transfers); all other ops
require a valid session ticket.

ServiceCore holds the whole layered stack and is directly usable
in-process; UmpServer puts a threaded TCP front on it.
"""

from __future__ import annotations

import hashlib
import logging
import os
import socket
import socketserver
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.asymmetric import x25519
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.hashes import SHA256
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from memtrust import governance
from memtrust.canonical import encode_frame, read_frame
from memtrust.config import Config
from memtrust.embedder import HashEmbedder
from memtrust.engine import MemoryEngine, ProfileGraph
from memtrust.errors import (
    BackpressureError,
    MemtrustError,
    NotFoundError,
    PolicyError,
    ProtocolError,
    ShreddedError,
)
from memtrust.governance import (
    AuditLog,
    Policy,
    SessionTicket,
    issue_ticket,
    load_policy_bundle,
    policy_bundle_bytes,
    validate_ticket,
)
from memtrust.ingest import (
    RuleSet,
    SessionContext,
    UpdateQueue,
    sanitize,
    server_handshake,
)
from memtrust.keyvault import KeyVault
from memtrust.retrieval import (
    BucketedVectorIndex,
    CandidateSet,
    InvertedIndex,
    fuse,
    graph_recall,
    tokenize,
)
from memtrust.store import GraphStore, SealedStore
from memtrust.tee import (
    AttestationReport,
    MonotonicCounter,
    TeeSimulator,
    measure,
    verify_report,
)

logger = logging.getLogger(__name__)

DEFAULT_POLICY = [
    Policy(rule_id="allow-all", subject="*", resource="*", action="*",
           effect="allow", priority=0),
]


def package_code_bundle() -> bytes:
    """Canonical bytes of this package's source files, sorted by name.

    Stands in for the enclave's code image: rebuilding with changed code
    changes the measurement.
    """
    root = Path(__file__).parent
    h = []
    for path in sorted(root.rglob("*.py")):
        h.append(path.relative_to(root).as_posix().encode())
        h.append(path.read_bytes())
    return b"\x1f".join(h)


@dataclass
class MigrationReport:
    verified: list[str] = field(default_factory=list)
    failed: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"verified": self.verified, "failed": self.failed}


class ServiceCore:
    """The five layers wired together behind the UMP operations."""

    def __init__(self, config: Config | None = None, clock=time.time):
        self.config = config or Config()
        self.clock = clock
        self.data_dir = Path(self.config["data_dir"])
        self.data_dir.mkdir(parents=True, exist_ok=True)

        policy_path = self.config.get("policy_path")
        if policy_path:
            self.policy_raw = Path(policy_path).read_bytes()
        else:
            self.policy_raw = policy_bundle_bytes(DEFAULT_POLICY)
        self.policy = load_policy_bundle(self.policy_raw)

        self.code_bundle = package_code_bundle()
        self.measurement = measure(self.code_bundle, self.policy_raw)
        self.tee = TeeSimulator(self.data_dir / "platform.key", self.measurement)
        self.counter = MonotonicCounter(self.data_dir / "nv" / "counter.bin")
        self.vault = KeyVault(self.data_dir / "vault", self.tee)
        self.store = SealedStore(self.data_dir, self.tee, self.vault, self.counter)
        self.graph_store = GraphStore(self.data_dir, self.vault,
                                      slots=int(self.config["store.block_slots"]))
        self.graph = ProfileGraph(self.graph_store)
        self.engine = MemoryEngine(
            self.store, self.vault, self.tee, graph=self.graph, clock=clock,
            reinforce_alpha=float(self.config["engine.reinforce_alpha"]),
            decay_threshold=float(self.config["engine.decay_threshold"]),
            initial_strength_s=float(self.config["engine.initial_strength_s"]),
        )
        self.audit = AuditLog(
            self.data_dir / "audit.log", self.data_dir / "anchors.log", self.tee,
            anchor_every_entries=int(self.config["governance.anchor_every_entries"]),
            anchor_every_s=float(self.config["governance.anchor_every_s"]),
        )
        self.queue = UpdateQueue(
            self.store,
            batch_size=int(self.config["ingest.batch_size"]),
            high_water=int(self.config["ingest.high_water"]),
        )
        rules_path = self.config.get("rules_path")
        self.rules = RuleSet.load(rules_path) if rules_path else RuleSet.default()
        self.embedder = HashEmbedder(dim=64)
        self.vectors = BucketedVectorIndex(
            64,
            m=int(self.config["retrieval.hnsw_m"]),
            ef_construct=int(self.config["retrieval.hnsw_ef_construct"]),
            ef_search=int(self.config["retrieval.hnsw_ef_search"]),
            bucket_capacity=int(self.config["retrieval.bucket_capacity"]),
            rho=float(self.config["retrieval.noise_rho"]),
        )
        self.bm25 = InvertedIndex()
        self.sessions: dict[str, SessionContext] = {}
        self._lock = threading.Lock()
        self.pins = self._load_pins()
        self._rebuild_indexes()

    # -- boot helpers --------------------------------------------------

    def _load_pins(self) -> set[str]:
        pins_path = self.config.get("pins_path")
        if pins_path and Path(pins_path).exists():
            pins = set()
            for line in Path(pins_path).read_text().splitlines():
                if line.strip():
                    pins.add(line.split()[0])
            return pins
        return {self.measurement.hex}

    def _rebuild_indexes(self) -> None:
        for ep in self.engine.episodes.values():
            self.bm25.add_document(ep.episode_id, ep.text)
            if ep.embedding:
                self.vectors.add(ep.episode_id, ep.embedding)

    def check_policy_binding(self) -> None:
        """The running bundle must be the one folded into the measurement."""
        if measure(self.code_bundle, self.policy_raw) != self.tee.measurement:
            raise PolicyError(
                "attestation-violation: policy bundle hash does not match "
                "the measured bundle"
            )

    def write_release_pin(self, path: str | Path) -> None:
        """Append this build's measurement to a transparency-log file."""
        line = f"{self.measurement.hex} {time.strftime('%Y-%m-%dT%H:%M:%SZ', time.gmtime())}\n"
        with open(path, "a") as f:
            f.write(line)

    # -- sessions ------------------------------------------------------

    def op_handshake(self, payload: dict) -> dict:
        self.check_policy_binding()
        session, server_hello = server_handshake(self.tee, payload)
        client = str(payload.get("client", ""))
        ticket = issue_ticket(
            self.tee, session, client=client,
            lifetime_s=float(self.config["governance.ticket_lifetime_s"]),
            now=self.clock(),
        )
        with self._lock:
            self.sessions[session.session_id] = session
        server_hello["ticket"] = ticket.to_dict()
        return server_hello

    def _require_session(self, ticket_dict: dict | None,
                         conn_session_id: str | None = None
                         ) -> tuple[SessionContext, SessionTicket]:
        if not ticket_dict:
            raise ProtocolError("missing ticket")
        try:
            ticket = SessionTicket.from_dict(ticket_dict)
        except (KeyError, ValueError, TypeError) as exc:
            raise ProtocolError(f"malformed ticket: {exc}") from exc
        # the ticket must bind to the channel it arrives on, not merely to
        # whichever session it names — otherwise tickets would be replayable
        session = self.sessions.get(conn_session_id or ticket.session_id)
        if session is None:
            raise ProtocolError("unknown session")
        ok, reason = validate_ticket(ticket, session, self.measurement,
                                     self.tee.platform_pubkey, now=self.clock())
        if not ok:
            raise ProtocolError(f"invalid ticket: {reason}")
        return session, ticket

    def _authorize(self, actor: str, action: str, resource: str) -> None:
        self.check_policy_binding()
        effect, rule_id = governance.evaluate(self.policy, actor, action, resource)
        # log-before-act: the decision is durable before the operation runs
        self.audit.append(actor, action, resource, effect)
        if effect != "allow":
            raise PolicyError(f"denied by policy rule {rule_id or '(default deny)'}")

    # -- UMP operations ------------------------------------------------

    def op_remember(self, payload: dict, ticket_dict: dict | None,
                    wait_durable: bool = True,
                    conn_session_id: str | None = None) -> dict:
        session, ticket = self._require_session(ticket_dict, conn_session_id)
        text = str(payload["text"])
        labels = payload.get("labels") or ["default"]
        label = str(labels[0])
        self._authorize(ticket.client or "anonymous", "remember", label)
        event = sanitize(text, self.rules, session.entities)
        embedding = self.embedder.embed(event.text)
        ep = self.engine.add_episode(
            event.text,
            source_app=str(payload.get("source_app", "")),
            intent=str(payload.get("intent", "")),
            embedding=embedding,
            label=label,
            store_body=False,
        )
        done = threading.Event()
        self.queue.enqueue_update(ep.unit_id, event.text.encode("utf-8"), done=done)
        if wait_durable:
            if not self._wait_durable(done):
                raise BackpressureError("ingest pipeline stalled")
        self.bm25.add_document(ep.episode_id, ep.text)
        self.vectors.add(ep.episode_id, embedding)
        return {"episode_id": ep.episode_id, "unit_id": ep.unit_id}

    def _wait_durable(self, done: threading.Event, timeout: float = 10.0) -> bool:
        # with no background ticker running, drive the queue ourselves
        deadline = time.monotonic() + timeout
        while not done.is_set():
            if self._ticker is None:
                self.queue.tick()
            elif not done.wait(0.05):
                pass
            if time.monotonic() > deadline:
                return False
        return True

    _ticker: threading.Thread | None = None

    def op_recall(self, payload: dict, ticket_dict: dict | None,
                  conn_session_id: str | None = None) -> dict:
        session, ticket = self._require_session(ticket_dict, conn_session_id)
        actor = ticket.client or "anonymous"
        query = str(payload.get("query_text", ""))
        top_n = int(payload.get("top_n", 10))
        entities = [str(e) for e in payload.get("entities", [])]
        self._authorize(actor, "recall", "query")
        candidates = CandidateSet()
        candidates.extend(self.bm25.keyword_recall(tokenize(query), top_n))
        if len(self.vectors) and query:
            candidates.extend(self.vectors.vector_recall(
                self.embedder.embed(query), top_n,
                k_anonymity=int(self.config["retrieval.k_anonymity"]),
            ))
        if entities:
            candidates.extend(graph_recall(
                entities, 2, self.graph.neighbors, self.graph.facts_for))
        weights = {
            "keyword": float(self.config["retrieval.weights.keyword"]),
            "vector": float(self.config["retrieval.weights.vector"]),
            "graph": float(self.config["retrieval.weights.graph"]),
            "recency": float(self.config["retrieval.weights.recency"]),
        }
        timestamps = {
            eid: ep.timestamp for eid, ep in self.engine.episodes.items()
        }
        frame = fuse(candidates, weights,
                     recency_half_life_s=float(
                         self.config["retrieval.recency_half_life_s"]),
                     timestamps=timestamps, now=self.clock(),
                     query_id=payload.get("query_id", ""))
        visible = []
        for doc_id, score, sources in frame.ranked:
            ep = self.engine.episodes.get(doc_id)
            if ep is None or self.vault.is_shredded(ep.unit_id):
                continue
            effect, _ = governance.evaluate(self.policy, actor, "recall", ep.label)
            if effect != "allow":
                continue
            visible.append({"doc_id": doc_id, "score": score, "sources": sources,
                            "text": ep.text})
            if len(visible) >= top_n:
                break
        for hit in visible:
            self.engine.reinforce(hit["doc_id"])
        return {"query_id": frame.query_id, "ranked": visible}

    def op_forget(self, payload: dict, ticket_dict: dict | None,
                  conn_session_id: str | None = None) -> dict:
        session, ticket = self._require_session(ticket_dict, conn_session_id)
        actor = ticket.client or "anonymous"
        unit_id = str(payload["unit_id"])
        episode_id = unit_id.split(":", 1)[1] if unit_id.startswith("ep:") else unit_id
        ep = self.engine.episodes.get(episode_id)
        if ep is None and not self.store.has_object(unit_id):
            raise NotFoundError(f"unknown unit {unit_id!r}")
        label = ep.label if ep else "default"
        self._authorize(actor, "forget", label)
        shred_entry = self.audit.append(actor, "shred", unit_id, "allow")
        proof = self.vault.shred(unit_id, shred_entry.entry_hash)
        if ep is not None:
            self.bm25.remove_document(episode_id)
            self.vectors.remove(episode_id)
            self.engine.forget_episode(episode_id)
        self.audit.anchor_head()
        return {"proof": proof.to_dict()}

    # -- migration (source side) ---------------------------------------

    def migrate_to(self, address: tuple[str, int], unit_ids: list[str],
                   corrupt_hook=None) -> MigrationReport:
        """Push units to a peer after mutual attestation.

        corrupt_hook(unit_id, ciphertext) -> ciphertext is a
        fault-injection point for tests.
        """
        report = MigrationReport()
        src_nonce = os.urandom(32)
        eph = x25519.X25519PrivateKey.generate()
        with socket.create_connection(address, timeout=10) as sock:
            stream = sock.makefile("rwb")

            def call(op: str, payload: dict) -> dict:
                stream.write(encode_frame({"op": op, "id": op, "payload": payload}))
                stream.flush()
                resp = read_frame(stream)
                if not resp.get("ok"):
                    raise ProtocolError(f"peer error on {op}: {resp.get('error')}")
                return resp["payload"]

            hello = call("migrate_hello", {
                "nonce": src_nonce.hex(),
                "source_eph_pub": eph.public_key().public_bytes_raw().hex(),
            })
            peer_report = AttestationReport.from_dict(hello["report"])
            if peer_report.measurement.hex not in self.pins or not verify_report(
                    peer_report, peer_report.measurement, src_nonce,
                    bytes.fromhex(hello["platform_pubkey"])):
                raise PolicyError("peer attestation failed; aborting before data")
            dest_nonce = bytes.fromhex(hello["nonce"])
            my_report = self.tee.generate_report(nonce=dest_nonce)
            call("migrate_auth", {
                "report": my_report.to_dict(),
                "platform_pubkey": self.tee.platform_pubkey.hex(),
            })
            shared = eph.exchange(x25519.X25519PublicKey.from_public_bytes(
                bytes.fromhex(hello["dest_eph_pub"])))
            key = HKDF(algorithm=SHA256(), length=32,
                       salt=src_nonce + dest_nonce,
                       info=b"ump migrate").derive(shared)

            for unit_id in unit_ids:
                plaintext = self.store.get_object(unit_id)
                digest = hashlib.sha256(plaintext).hexdigest()
                ok = False
                for attempt in range(2):  # one retry on transit corruption
                    nonce = os.urandom(12)
                    ct = AESGCM(key).encrypt(nonce, plaintext, None)
                    if corrupt_hook is not None:
                        ct = corrupt_hook(unit_id, ct)
                    try:
                        ack = call("migrate_unit", {
                            "unit_id": unit_id, "nonce": nonce.hex(),
                            "ciphertext": ct.hex(), "digest": digest,
                        })
                        ok = bool(ack.get("verified"))
                    except ProtocolError:
                        ok = False
                    if ok:
                        break
                if ok:
                    self.audit.append("migration", "migrate", unit_id, "allow")
                    report.verified.append(unit_id)
                else:
                    report.failed.append(unit_id)
        return report

    # -- migration (destination side) ----------------------------------

    def migrate_hello(self, payload: dict, state: dict) -> dict:
        self.check_policy_binding()
        src_nonce = bytes.fromhex(payload["nonce"])
        dest_nonce = os.urandom(32)
        eph = x25519.X25519PrivateKey.generate()
        state["dest_nonce"] = dest_nonce
        state["src_nonce"] = src_nonce
        state["eph"] = eph
        state["src_pub"] = bytes.fromhex(payload["source_eph_pub"])
        return {
            "report": self.tee.generate_report(nonce=src_nonce).to_dict(),
            "platform_pubkey": self.tee.platform_pubkey.hex(),
            "nonce": dest_nonce.hex(),
            "dest_eph_pub": eph.public_key().public_bytes_raw().hex(),
        }

    def migrate_auth(self, payload: dict, state: dict) -> dict:
        peer_report = AttestationReport.from_dict(payload["report"])
        peer_pub = bytes.fromhex(payload["platform_pubkey"])
        if peer_report.measurement.hex not in self.pins or not verify_report(
                peer_report, peer_report.measurement, state["dest_nonce"], peer_pub):
            raise PolicyError("source attestation failed")
        shared = state["eph"].exchange(
            x25519.X25519PublicKey.from_public_bytes(state["src_pub"]))
        state["key"] = HKDF(
            algorithm=SHA256(), length=32,
            salt=state["src_nonce"] + state["dest_nonce"],
            info=b"ump migrate").derive(shared)
        state["attested"] = True
        return {"attested": True}

    def migrate_unit(self, payload: dict, state: dict) -> dict:
        if not state.get("attested"):
            raise ProtocolError("migrate_unit before mutual attestation")
        unit_id = str(payload["unit_id"])
        try:
            plaintext = AESGCM(state["key"]).decrypt(
                bytes.fromhex(payload["nonce"]),
                bytes.fromhex(payload["ciphertext"]), None)
        except InvalidTag:
            return {"verified": False, "reason": "decrypt-failed"}
        if hashlib.sha256(plaintext).hexdigest() != payload["digest"]:
            return {"verified": False, "reason": "digest-mismatch"}
        self.store.put_object(unit_id, plaintext)
        self.audit.append("migration", "migrate", unit_id, "allow")
        return {"verified": True}

    # -- lifecycle ------------------------------------------------------

    def drain_and_anchor(self) -> None:
        while self.queue.pending():
            self.queue.tick()
        if self.audit.head_index >= 0:
            self.audit.anchor_head()


class UmpServer:
    """Threaded TCP front-end: one session per connection."""

    def __init__(self, core: ServiceCore, host: str | None = None,
                 port: int | None = None):
        self.core = core
        host = host if host is not None else core.config["listen_host"]
        port = port if port is not None else int(core.config["listen_port"])
        self.frame_log: list[dict] = []  # every received frame's op + id
        server = self

        class Handler(socketserver.StreamRequestHandler):
            def handle(self):
                migration_state: dict = {}
                while True:
                    try:
                        msg = read_frame(self.rfile)
                    except (EOFError, ValueError, UnicodeDecodeError):
                        break
                    resp = server._dispatch(msg, migration_state)
                    try:
                        self.wfile.write(encode_frame(resp))
                        self.wfile.flush()
                    except OSError:
                        break
                    if resp.get("id") is None and not resp.get("ok"):
                        break  # undecodable frame: drop the connection

        class TcpServer(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        self._tcp = TcpServer((host, port), Handler)
        self.address = self._tcp.server_address
        self._thread = threading.Thread(target=self._tcp.serve_forever, daemon=True)
        self._tick_stop = threading.Event()
        self._tick_thread = threading.Thread(target=self._tick_loop, daemon=True)

    def _tick_loop(self):
        interval = float(self.core.config["ingest.tick_ms"]) / 1000.0
        while not self._tick_stop.wait(interval):
            self.core.queue.tick()

    def _dispatch(self, msg, migration_state: dict) -> dict:
        if not isinstance(msg, dict) or "op" not in msg:
            return {"id": None, "ok": False,
                    "error": {"code": "protocol", "message": "malformed frame"}}
        op = msg.get("op")
        rid = msg.get("id")
        payload = msg.get("payload") or {}
        ticket = msg.get("ticket")
        self.frame_log.append({"op": op, "id": rid})
        core = self.core
        try:
            if op == "handshake":
                hello = core.op_handshake(payload)
                migration_state["session_id"] = hello["session_id"]
                return {"id": rid, "ok": True, "payload": hello}
            conn_sid = migration_state.get("session_id")
            if op == "remember":
                return {"id": rid, "ok": True,
                        "payload": core.op_remember(payload, ticket,
                                                    conn_session_id=conn_sid)}
            if op == "recall":
                return {"id": rid, "ok": True,
                        "payload": core.op_recall(payload, ticket,
                                                  conn_session_id=conn_sid)}
            if op == "forget":
                return {"id": rid, "ok": True,
                        "payload": core.op_forget(payload, ticket,
                                                  conn_session_id=conn_sid)}
            if op == "migrate_hello":
                return {"id": rid, "ok": True,
                        "payload": core.migrate_hello(payload, migration_state)}
            if op == "migrate_auth":
                return {"id": rid, "ok": True,
                        "payload": core.migrate_auth(payload, migration_state)}
            if op == "migrate_unit":
                return {"id": rid, "ok": True,
                        "payload": core.migrate_unit(payload, migration_state)}
            return {"id": rid, "ok": False,
                    "error": {"code": "protocol", "message": f"unknown op {op!r}"}}
        except ProtocolError as exc:
            return {"id": rid, "ok": False,
                    "error": {"code": "protocol", "message": str(exc)}}
        except PolicyError as exc:
            return {"id": rid, "ok": False,
                    "error": {"code": "denied", "message": str(exc)}}
        except NotFoundError as exc:
            return {"id": rid, "ok": False,
                    "error": {"code": "not-found", "message": str(exc)}}
        except BackpressureError as exc:
            return {"id": rid, "ok": False,
                    "error": {"code": "retry-after", "message": str(exc)}}
        except ShreddedError as exc:
            return {"id": rid, "ok": False,
                    "error": {"code": "shredded", "message": str(exc)}}
        except MemtrustError as exc:
            logger.exception("operation failed")
            return {"id": rid, "ok": False,
                    "error": {"code": "internal", "message": str(exc)}}

    def start(self):
        self.core._ticker = self._tick_thread
        self._thread.start()
        self._tick_thread.start()
        return self

    def stop(self):
        self._tick_stop.set()
        self._tcp.shutdown()
        self._tcp.server_close()
        self.core._ticker = None
        self.core.drain_and_anchor()
