import json
import os
import socket
import struct
import threading

import pytest
from cryptography.hazmat.primitives.asymmetric import x25519

from memtrust.canonical import encode_frame, read_frame
from memtrust.config import Config
from memtrust.governance import (
    Policy,
    policy_bundle_bytes,
    read_log_entries,
    verify_chain,
)
from memtrust.keyvault import DeletionProof, verify_deletion_proof
from memtrust.service import ServiceCore, UmpServer
from memtrust.tee import AttestationReport, verify_report


def make_core(tmp_path, name="node", policy_rules=None, rules_path=None):
    data = tmp_path / name
    values = {"data_dir": str(data), "ingest.tick_ms": 20}
    if policy_rules is not None:
        policy_file = tmp_path / f"{name}-policy.json"
        policy_file.write_bytes(policy_bundle_bytes(policy_rules))
        values["policy_path"] = str(policy_file)
    if rules_path is not None:
        values["rules_path"] = str(rules_path)
    return ServiceCore(Config(values))


@pytest.fixture
def core(tmp_path):
    return make_core(tmp_path)


class WireClient:
    """Minimal raw-socket client used only by these tests."""

    def __init__(self, address, client="tester"):
        self.sock = socket.create_connection(address, timeout=10)
        self.stream = self.sock.makefile("rwb")
        self.client = client
        self.ticket = None
        self.server_hello = None

    def call(self, op, payload, with_ticket=True):
        frame = {"op": op, "id": os.urandom(4).hex(), "payload": payload}
        if with_ticket and self.ticket is not None:
            frame["ticket"] = self.ticket
        self.stream.write(encode_frame(frame))
        self.stream.flush()
        return read_frame(self.stream)

    def handshake(self):
        eph = x25519.X25519PrivateKey.generate()
        nonce = os.urandom(32)
        resp = self.call("handshake", {
            "nonce": nonce.hex(),
            "client_ephemeral_pubkey": eph.public_key().public_bytes_raw().hex(),
            "client": self.client,
        }, with_ticket=False)
        assert resp["ok"], resp
        self.server_hello = resp["payload"]
        self.ticket = resp["payload"]["ticket"]
        self.nonce = nonce
        return resp["payload"]

    def close(self):
        self.sock.close()


@pytest.fixture
def server(core):
    srv = UmpServer(core, port=0).start()
    yield srv
    srv.stop()


class TestHandshake:
    def test_report_bound_to_client_nonce(self, core, server):
        c = WireClient(server.address)
        hello = c.handshake()
        report = AttestationReport.from_dict(hello["report"])
        assert verify_report(report, core.measurement, c.nonce,
                             core.tee.platform_pubkey)
        c.close()

    def test_ticket_carries_measurement(self, core, server):
        c = WireClient(server.address)
        hello = c.handshake()
        assert hello["ticket"]["measurement"] == core.measurement.hex
        c.close()

    def test_malformed_hello_rejected(self, server):
        c = WireClient(server.address)
        resp = c.call("handshake", {"nonce": "zz"}, with_ticket=False)
        assert not resp["ok"] and resp["error"]["code"] == "protocol"
        c.close()


class TestOperations:
    def test_remember_recall_round_trip(self, server):
        c = WireClient(server.address)
        c.handshake()
        r = c.call("remember", {"text": "the capybara project ships tuesday"})
        assert r["ok"], r
        got = c.call("recall", {"query_text": "capybara project"})
        assert got["ok"]
        texts = [h["text"] for h in got["payload"]["ranked"]]
        assert any("capybara" in t for t in texts)
        c.close()

    def test_sanitization_applied_before_storage(self, core, server):
        c = WireClient(server.address)
        c.handshake()
        r = c.call("remember", {"text": "mail me at alice@example.com please"})
        unit_id = r["payload"]["unit_id"]
        stored = core.store.get_object(unit_id)
        assert b"alice@example.com" not in stored
        assert b"[EMAIL_1]" in stored
        c.close()

    def test_forget_returns_verifiable_proof(self, core, server):
        c = WireClient(server.address)
        c.handshake()
        r = c.call("remember", {"text": "a secret to erase"})
        unit_id = r["payload"]["unit_id"]
        resp = c.call("forget", {"unit_id": unit_id})
        assert resp["ok"], resp
        proof = DeletionProof.from_dict(resp["payload"]["proof"])
        assert proof.unit_id == unit_id
        assert verify_deletion_proof(proof, core.tee.platform_pubkey,
                                     core.audit.chain_hashes())
        c.close()

    def test_forgotten_unit_absent_from_recall(self, server):
        c = WireClient(server.address)
        c.handshake()
        r = c.call("remember", {"text": "ephemeral zanzibar fact"})
        c.call("forget", {"unit_id": r["payload"]["unit_id"]})
        got = c.call("recall", {"query_text": "zanzibar"})
        assert got["payload"]["ranked"] == []
        c.close()

    def test_forget_unknown_unit(self, server):
        c = WireClient(server.address)
        c.handshake()
        resp = c.call("forget", {"unit_id": "ep:nonexistent"})
        assert not resp["ok"] and resp["error"]["code"] == "not-found"
        c.close()

    def test_op_without_ticket_rejected(self, server):
        c = WireClient(server.address)
        resp = c.call("remember", {"text": "hi"}, with_ticket=False)
        assert not resp["ok"] and resp["error"]["code"] == "protocol"
        c.close()

    def test_ticket_not_transferable_between_sessions(self, server):
        a = WireClient(server.address)
        a.handshake()
        b = WireClient(server.address)
        b.handshake()
        b.ticket = a.ticket  # replay another session's ticket
        resp = b.call("remember", {"text": "stolen"})
        assert not resp["ok"] and "channel-mismatch" in resp["error"]["message"]
        a.close()
        b.close()

    def test_unknown_op(self, server):
        c = WireClient(server.address)
        resp = c.call("frobnicate", {}, with_ticket=False)
        assert not resp["ok"] and resp["error"]["code"] == "protocol"
        c.close()

    def test_malformed_frame_closes_connection(self, server):
        sock = socket.create_connection(server.address, timeout=10)
        stream = sock.makefile("rwb")
        body = b"this is not json"
        stream.write(struct.pack(">I", len(body)) + body)
        stream.flush()
        assert stream.read(1) == b""  # server hung up
        sock.close()

    def test_concurrent_clients(self, server):
        errors = []

        def worker(i):
            try:
                c = WireClient(server.address, client=f"agent{i}")
                c.handshake()
                for j in range(5):
                    r = c.call("remember", {"text": f"worker {i} note {j}"})
                    assert r["ok"], r
                got = c.call("recall", {"query_text": f"worker {i}"})
                assert got["ok"]
                c.close()
            except Exception as exc:  # noqa: BLE001
                errors.append(exc)

        threads = [threading.Thread(target=worker, args=(i,)) for i in range(6)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert errors == []


class TestGovernanceIntegration:
    def test_policy_deny_is_audited(self, tmp_path):
        rules = [
            Policy("allow-recall", "*", "*", "recall", "allow", 1),
            Policy("deny-writes", "*", "*", "remember", "deny", 1),
        ]
        core = make_core(tmp_path, policy_rules=rules)
        srv = UmpServer(core, port=0).start()
        try:
            c = WireClient(srv.address)
            c.handshake()
            resp = c.call("remember", {"text": "should be blocked"})
            assert not resp["ok"] and resp["error"]["code"] == "denied"
            c.close()
        finally:
            srv.stop()
        entries = read_log_entries(core.audit.log_path)
        assert any(e.action == "remember" and e.decision == "deny"
                   for e in entries)

    def test_audit_chain_verifies_after_session(self, core, server):
        c = WireClient(server.address)
        c.handshake()
        for i in range(5):
            c.call("remember", {"text": f"note {i}"})
        r = c.call("remember", {"text": "to forget"})
        c.call("forget", {"unit_id": r["payload"]["unit_id"]})
        c.close()
        report = verify_chain(core.audit.log_path, core.audit.anchor_path,
                              core.tee.platform_pubkey)
        assert report.ok and report.entries >= 7

    def test_policy_filters_recall_results(self, tmp_path):
        rules = [
            Policy("writes", "*", "*", "remember", "allow", 1),
            Policy("reads", "*", "*", "recall", "allow", 1),
            Policy("wall", "*", "restricted", "recall", "deny", 2),
        ]
        core = make_core(tmp_path, policy_rules=rules)
        srv = UmpServer(core, port=0).start()
        try:
            c = WireClient(srv.address)
            c.handshake()
            c.call("remember", {"text": "shared zebra fact",
                                "labels": ["default"]})
            c.call("remember", {"text": "hidden zebra fact",
                                "labels": ["restricted"]})
            got = c.call("recall", {"query_text": "zebra fact"})
            texts = [h["text"] for h in got["payload"]["ranked"]]
            assert any("shared" in t for t in texts)
            assert not any("hidden" in t for t in texts)
            c.close()
        finally:
            srv.stop()


class TestMigration:
    def test_three_units_transfer_and_verify(self, tmp_path):
        src = make_core(tmp_path, "src")
        dst = make_core(tmp_path, "dst")
        assert src.measurement == dst.measurement  # same code + policy
        c_src = WireClient  # noqa: F841 (naming clarity)
        units = []
        for i in range(3):
            ep = src.engine.add_episode(f"migratable fact {i}")
            src.store.put_object(ep.unit_id, ep.text.encode())
            units.append(ep.unit_id)
        srv = UmpServer(dst, port=0).start()
        try:
            report = src.migrate_to(srv.address, units)
        finally:
            srv.stop()
        assert report.verified == units and report.failed == []
        for uid in units:
            assert dst.store.get_object(uid) == src.store.get_object(uid)

    def test_wrong_measurement_aborts_before_data(self, tmp_path):
        src = make_core(tmp_path, "src")
        rules = [Policy("r", "*", "*", "*", "allow", 1)]
        dst = make_core(tmp_path, "dst", policy_rules=rules)
        assert src.measurement != dst.measurement
        ep = src.engine.add_episode("must not leak")
        src.store.put_object(ep.unit_id, ep.text.encode())
        srv = UmpServer(dst, port=0).start()
        try:
            from memtrust.errors import PolicyError

            with pytest.raises(PolicyError):
                src.migrate_to(srv.address, [ep.unit_id])
        finally:
            srv.stop()
        # no unit data frame ever reached the peer
        assert all(f["op"] != "migrate_unit" for f in srv.frame_log)
        assert not dst.store.has_object(ep.unit_id)

    def test_corruption_isolated_to_affected_unit(self, tmp_path):
        src = make_core(tmp_path, "src")
        dst = make_core(tmp_path, "dst")
        units = []
        for i in range(3):
            ep = src.engine.add_episode(f"payload {i}")
            src.store.put_object(ep.unit_id, ep.text.encode())
            units.append(ep.unit_id)
        bad = units[1]

        def corrupt(unit_id, ct):
            if unit_id == bad:
                return ct[:-1] + bytes([ct[-1] ^ 0xFF])
            return ct

        srv = UmpServer(dst, port=0).start()
        try:
            report = src.migrate_to(srv.address, units, corrupt_hook=corrupt)
        finally:
            srv.stop()
        assert report.failed == [bad]
        assert sorted(report.verified) == sorted([units[0], units[2]])
        assert not dst.store.has_object(bad)
        for uid in (units[0], units[2]):
            assert dst.store.get_object(uid) == src.store.get_object(uid)

    def test_transient_corruption_recovered_by_retry(self, tmp_path):
        src = make_core(tmp_path, "src")
        dst = make_core(tmp_path, "dst")
        ep = src.engine.add_episode("flaky link payload")
        src.store.put_object(ep.unit_id, ep.text.encode())
        hits = {"n": 0}

        def corrupt_once(unit_id, ct):
            hits["n"] += 1
            if hits["n"] == 1:
                return ct[:-1] + bytes([ct[-1] ^ 0xFF])
            return ct

        srv = UmpServer(dst, port=0).start()
        try:
            report = src.migrate_to(srv.address, [ep.unit_id],
                                    corrupt_hook=corrupt_once)
        finally:
            srv.stop()
        assert report.verified == [ep.unit_id] and report.failed == []

    def test_migrate_unit_before_auth_rejected(self, tmp_path):
        dst = make_core(tmp_path, "dst")
        srv = UmpServer(dst, port=0).start()
        try:
            c = WireClient(srv.address)
            resp = c.call("migrate_unit", {
                "unit_id": "ep:x", "nonce": "00" * 12,
                "ciphertext": "00" * 16, "digest": "00" * 32,
            }, with_ticket=False)
            assert not resp["ok"] and resp["error"]["code"] == "protocol"
            c.close()
        finally:
            srv.stop()


class TestLifecycle:
    def test_shutdown_drains_queue_and_anchors(self, tmp_path):
        core = make_core(tmp_path)
        srv = UmpServer(core, port=0).start()
        c = WireClient(srv.address)
        c.handshake()
        c.call("remember", {"text": "durable before shutdown"})
        c.close()
        srv.stop()
        assert core.queue.pending() == 0
        anchors = core.audit.anchor_path.read_text().strip().splitlines()
        assert anchors  # head anchored at shutdown

    def test_state_survives_restart(self, tmp_path):
        core = make_core(tmp_path)
        srv = UmpServer(core, port=0).start()
        c = WireClient(srv.address)
        c.handshake()
        r = c.call("remember", {"text": "persistent albatross detail"})
        unit_id = r["payload"]["unit_id"]
        c.close()
        srv.stop()
        core2 = make_core(tmp_path)
        assert core2.store.get_object(unit_id)
        srv2 = UmpServer(core2, port=0).start()
        try:
            c2 = WireClient(srv2.address)
            c2.handshake()
            got = c2.call("recall", {"query_text": "albatross"})
            texts = [h["text"] for h in got["payload"]["ranked"]]
            assert any("albatross" in t for t in texts)
            c2.close()
        finally:
            srv2.stop()

    def test_in_process_core_without_server(self, core):
        # ServiceCore is usable embedded, driving the queue synchronously
        hello = core.op_handshake({
            "nonce": os.urandom(32).hex(),
            "client_ephemeral_pubkey":
                x25519.X25519PrivateKey.generate().public_key()
                .public_bytes_raw().hex(),
            "client": "embedded",
        })
        ticket = hello["ticket"]
        out = core.op_remember({"text": "embedded usage"}, ticket)
        assert core.store.has_object(out["unit_id"])
