import hashlib
import os
import random
import struct
import subprocess
import sys

import pytest

from memtrust.errors import IntegrityError, SealViolation
from memtrust.tee import (
    Measurement,
    MonotonicCounter,
    TeeSimulator,
    measure,
    verify_report,
)


class TestMeasure:
    def test_empty_inputs_hash_separator_only(self):
        assert measure(b"", b"").digest == hashlib.sha256(b"\x00").digest()

    def test_deterministic(self):
        assert measure(b"code", b"policy") == measure(b"code", b"policy")

    def test_matches_reference_sha256(self):
        # independent oracle: sha256 over 0x616263 00 78797a
        expected = hashlib.sha256(bytes.fromhex("616263007879" + "7a")).digest()
        assert measure(b"abc", b"xyz").digest == expected

    def test_separator_prevents_ambiguity(self):
        assert measure(b"ab", b"c") != measure(b"a", b"bc")

    def test_avalanche_over_sampled_bit_flips(self):
        rng = random.Random(7)
        code, policy = os.urandom(64), os.urandom(64)
        base = measure(code, policy).digest
        for _ in range(120):
            which = rng.randrange(2)
            buf = bytearray(code if which == 0 else policy)
            bit = rng.randrange(len(buf) * 8)
            buf[bit // 8] ^= 1 << (bit % 8)
            if which == 0:
                flipped = measure(bytes(buf), policy)
            else:
                flipped = measure(code, bytes(buf))
            assert flipped.digest != base


class TestAttestation:
    def test_report_round_trip(self, tee, measurement):
        nonce = os.urandom(32)
        report = tee.generate_report(nonce=nonce)
        assert verify_report(report, measurement, nonce, tee.platform_pubkey)

    def test_flipped_signature_bit_rejected(self, tee, measurement):
        nonce = os.urandom(32)
        r = tee.generate_report(nonce=nonce)
        bad_sig = bytearray(r.signature)
        bad_sig[0] ^= 1
        forged = type(r)(r.measurement, r.nonce, r.issued_at, r.platform_key_id,
                         bytes(bad_sig))
        assert not verify_report(forged, measurement, nonce, tee.platform_pubkey)

    def test_stale_nonce_rejected(self, tee, measurement):
        r = tee.generate_report(nonce=os.urandom(32))
        assert not verify_report(r, measurement, os.urandom(32), tee.platform_pubkey)

    def test_wrong_measurement_rejected(self, tee):
        nonce = os.urandom(32)
        r = tee.generate_report(nonce=nonce)
        other = measure(b"other", b"bundle")
        assert not verify_report(r, other, nonce, tee.platform_pubkey)

    def test_distinct_nonces_distinct_signatures(self, tee):
        r1 = tee.generate_report(nonce=b"\x01" * 32)
        r2 = tee.generate_report(nonce=b"\x02" * 32)
        assert r1.signature != r2.signature

    def test_report_dict_round_trip(self, tee, measurement):
        from memtrust.tee import AttestationReport

        nonce = os.urandom(32)
        r = tee.generate_report(nonce=nonce)
        r2 = AttestationReport.from_dict(r.to_dict())
        assert verify_report(r2, measurement, nonce, tee.platform_pubkey)


class TestSealing:
    def test_round_trip(self, tee):
        data = os.urandom(1000)
        assert tee.unseal(tee.seal(data)) == data

    def test_unseal_under_changed_policy_is_violation(self, tmp_path, tee):
        blob = tee.seal(b"secret")
        other = TeeSimulator(tmp_path / "platform.key",
                             measure(b"test code bundle", b"changed policy"))
        with pytest.raises(SealViolation):
            other.unseal(blob)

    def test_tampered_ciphertext_is_integrity_error(self, tee):
        blob = tee.seal(b"secret")
        ct = bytearray(blob.ciphertext)
        ct[0] ^= 1
        tampered = type(blob)(bytes(ct), blob.nonce, blob.bound_measurement)
        with pytest.raises(IntegrityError):
            tee.unseal(tampered)

    def test_blob_serialization_round_trip(self, tee):
        from memtrust.tee import SealedBlob

        blob = tee.seal(b"hello")
        assert tee.unseal(SealedBlob.from_bytes(blob.to_bytes())) == b"hello"


class TestMonotonicCounter:
    def test_fresh_store_reads_zero(self, tmp_path):
        assert MonotonicCounter(tmp_path / "c.bin").read() == 0

    def test_two_increments(self, tmp_path):
        c = MonotonicCounter(tmp_path / "c.bin")
        c.increment()
        c.increment()
        assert c.read() == 2

    def test_survives_reopen(self, tmp_path):
        c = MonotonicCounter(tmp_path / "c.bin")
        for _ in range(5):
            c.increment()
        assert MonotonicCounter(tmp_path / "c.bin").read() == 5

    def test_kill_and_restart_never_goes_backwards(self, tmp_path):
        # Crash-restart harness: a subprocess increments then is killed
        # without clean shutdown; a reopened counter must be >= the last
        # value the subprocess reported.
        path = tmp_path / "c.bin"
        MonotonicCounter(path).increment()
        script = (
            "import sys, os\n"
            "from memtrust.tee import MonotonicCounter\n"
            f"c = MonotonicCounter({str(path)!r})\n"
            "print(c.increment(), flush=True)\n"
            "os._exit(9)\n"
        )
        out = subprocess.run([sys.executable, "-c", script],
                             capture_output=True, text=True)
        reported = int(out.stdout.strip())
        assert MonotonicCounter(path).read() >= reported

    def test_file_format_is_8_byte_big_endian(self, tmp_path):
        c = MonotonicCounter(tmp_path / "c.bin")
        c.increment()
        assert (tmp_path / "c.bin").read_bytes() == struct.pack(">Q", 1)
