"""Software simulation of a trusted execution environment.

Provides the four primitives the rest of the service builds on:
measurement of the code+policy bundle, attestation reports signed by a
simulated platform key, data sealing bound to a measurement, and a
crash-durable monotonic counter for rollback protection.
"""

from __future__ import annotations

import hashlib
import os
import struct
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives.asymmetric import ed25519
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.hashes import SHA256
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from memtrust.errors import (
    DurableWriteError,
    IntegrityError,
    KeyUnavailableError,
    SealViolation,
)

MEASUREMENT_SEPARATOR = b"\x00"


@dataclass(frozen=True)
class Measurement:
    digest: bytes  # 32 bytes

    def __post_init__(self):
        if len(self.digest) != 32:
            raise ValueError("measurement digest must be 32 bytes")

    @property
    def hex(self) -> str:
        return self.digest.hex()


def measure(code_bundle: bytes, policy_bundle: bytes) -> Measurement:
    """Digest of the canonical code bundle and policy bundle.

    A single 0x00 separator prevents concatenation ambiguity between the
    two inputs.
    """
    h = hashlib.sha256()
    h.update(code_bundle)
    h.update(MEASUREMENT_SEPARATOR)
    h.update(policy_bundle)
    return Measurement(h.digest())


@dataclass(frozen=True)
class AttestationReport:
    measurement: Measurement
    nonce: bytes  # 32 bytes, caller-supplied freshness
    issued_at: int
    platform_key_id: str
    signature: bytes

    def signed_payload(self) -> bytes:
        return (
            self.measurement.digest + self.nonce + struct.pack(">Q", self.issued_at)
        )

    def to_dict(self) -> dict:
        return {
            "measurement": self.measurement.hex,
            "nonce": self.nonce.hex(),
            "issued_at": self.issued_at,
            "platform_key_id": self.platform_key_id,
            "signature": self.signature.hex(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttestationReport":
        return cls(
            measurement=Measurement(bytes.fromhex(d["measurement"])),
            nonce=bytes.fromhex(d["nonce"]),
            issued_at=int(d["issued_at"]),
            platform_key_id=str(d["platform_key_id"]),
            signature=bytes.fromhex(d["signature"]),
        )


@dataclass(frozen=True)
class SealedBlob:
    ciphertext: bytes
    nonce: bytes  # 12 bytes
    bound_measurement: Measurement

    def to_bytes(self) -> bytes:
        return self.nonce + self.bound_measurement.digest + self.ciphertext

    @classmethod
    def from_bytes(cls, raw: bytes) -> "SealedBlob":
        if len(raw) < 44:
            raise ValueError("sealed blob too short")
        return cls(
            nonce=raw[:12],
            bound_measurement=Measurement(raw[12:44]),
            ciphertext=raw[44:],
        )


class MonotonicCounter:
    """Replay-protected counter persisted as an 8-byte big-endian file.

    Increments are durable (write temp, fsync, rename) before they are
    acknowledged, so the observed sequence never decreases across
    crashes and restarts.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        if self.path.exists():
            self._value = struct.unpack(">Q", self.path.read_bytes())[0]
        else:
            self._value = 0
            self._persist(0)

    def _persist(self, value: int) -> None:
        tmp = self.path.with_suffix(".tmp")
        try:
            with open(tmp, "wb") as f:
                f.write(struct.pack(">Q", value))
                f.flush()
                os.fsync(f.fileno())
            os.replace(tmp, self.path)
        except OSError as exc:
            raise DurableWriteError(f"counter persist failed: {exc}") from exc

    def read(self) -> int:
        with self._lock:
            return self._value

    def increment(self) -> int:
        with self._lock:
            new = self._value + 1
            self._persist(new)
            self._value = new
            return new


class TeeSimulator:
    """Holds the simulated platform identity and the active measurement.

    The platform keypair stands in for the hardware-fused key: generated
    at first boot, persisted as 64 raw bytes (32 secret || 32 public)
    with a restricted file mode.
    """

    def __init__(self, key_path: str | Path, measurement: Measurement):
        self.key_path = Path(key_path)
        self.measurement = measurement
        self._load_or_create_platform_key()

    def _load_or_create_platform_key(self) -> None:
        try:
            if self.key_path.exists():
                raw = self.key_path.read_bytes()
                if len(raw) != 64:
                    raise KeyUnavailableError(
                        f"platform key file {self.key_path} is {len(raw)} bytes, want 64"
                    )
                self._signing_key = ed25519.Ed25519PrivateKey.from_private_bytes(raw[:32])
            else:
                self._signing_key = ed25519.Ed25519PrivateKey.generate()
                raw = (
                    self._signing_key.private_bytes_raw()
                    + self._signing_key.public_key().public_bytes_raw()
                )
                self.key_path.parent.mkdir(parents=True, exist_ok=True)
                self.key_path.write_bytes(raw)
                os.chmod(self.key_path, 0o600)
        except OSError as exc:
            raise KeyUnavailableError(f"cannot load platform key: {exc}") from exc
        self.platform_secret = self._signing_key.private_bytes_raw()
        self.platform_pubkey = self._signing_key.public_key().public_bytes_raw()
        self.platform_key_id = hashlib.sha256(self.platform_pubkey).hexdigest()[:16]

    # -- attestation ---------------------------------------------------

    def generate_report(
        self, m: Measurement | None = None, nonce: bytes = b""
    ) -> AttestationReport:
        if len(nonce) != 32:
            raise ValueError("attestation nonce must be 32 bytes")
        m = m or self.measurement
        report = AttestationReport(
            measurement=m,
            nonce=nonce,
            issued_at=int(time.time()),
            platform_key_id=self.platform_key_id,
            signature=b"",
        )
        sig = self._signing_key.sign(report.signed_payload())
        return AttestationReport(
            measurement=m,
            nonce=nonce,
            issued_at=report.issued_at,
            platform_key_id=self.platform_key_id,
            signature=sig,
        )

    def sign(self, payload: bytes) -> bytes:
        """Service-identity signature (tickets, anchors, deletion proofs)."""
        return self._signing_key.sign(payload)

    # -- sealing -------------------------------------------------------

    def _seal_key(self, m: Measurement) -> bytes:
        return HKDF(
            algorithm=SHA256(), length=32, salt=m.digest, info=b"seal"
        ).derive(self.platform_secret)

    def seal(self, data: bytes, m: Measurement | None = None) -> SealedBlob:
        m = m or self.measurement
        nonce = os.urandom(12)
        ct = AESGCM(self._seal_key(m)).encrypt(nonce, data, m.digest)
        return SealedBlob(ciphertext=ct, nonce=nonce, bound_measurement=m)

    def unseal(self, blob: SealedBlob, m: Measurement | None = None) -> bytes:
        m = m or self.measurement
        if blob.bound_measurement != m:
            raise SealViolation(
                "sealed blob bound to a different measurement; refusing to unseal"
            )
        try:
            return AESGCM(self._seal_key(m)).decrypt(
                blob.nonce, blob.ciphertext, m.digest
            )
        except InvalidTag as exc:
            raise IntegrityError("sealed blob failed authentication") from exc


def verify_signature(pubkey: bytes, payload: bytes, signature: bytes) -> bool:
    try:
        ed25519.Ed25519PublicKey.from_public_bytes(pubkey).verify(signature, payload)
        return True
    except (InvalidSignature, ValueError):
        return False


def verify_report(
    report: AttestationReport,
    expected: Measurement,
    nonce: bytes,
    platform_pubkey: bytes,
) -> bool:
    """True iff signature valid, measurement matches, and nonce matches."""
    if report.measurement != expected:
        return False
    if report.nonce != nonce:
        return False
    return verify_signature(platform_pubkey, report.signed_payload(), report.signature)
