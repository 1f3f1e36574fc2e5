"""Hierarchical key management with cryptographic erasure.

master key -> epoch keys -> per-unit Data Unit Keys. Deleting a unit
means destroying the ability to derive its DUK: the unit id enters a
sealed tombstone set and derivation refuses forever after. Ciphertext
encrypted under that DUK is thereby rendered random noise.
"""

from __future__ import annotations

import hashlib
import os
import struct
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from cryptography.hazmat.primitives.hashes import SHA256
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from memtrust.errors import EpochError, NotFoundError, ShreddedError
from memtrust.tee import SealedBlob, TeeSimulator, verify_signature


@dataclass(frozen=True)
class DataUnitKey:
    unit_id: str
    epoch: int
    key: bytes  # 32 bytes


@dataclass(frozen=True)
class DeletionProof:
    unit_id: str
    shredded_at: int
    audit_head_hash: bytes  # 32 bytes
    signature: bytes

    def signed_payload(self) -> bytes:
        return (
            self.unit_id.encode("utf-8")
            + struct.pack(">Q", self.shredded_at)
            + self.audit_head_hash
        )

    def to_dict(self) -> dict:
        return {
            "unit_id": self.unit_id,
            "shredded_at": self.shredded_at,
            "audit_head_hash": self.audit_head_hash.hex(),
            "signature": self.signature.hex(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DeletionProof":
        return cls(
            unit_id=str(d["unit_id"]),
            shredded_at=int(d["shredded_at"]),
            audit_head_hash=bytes.fromhex(d["audit_head_hash"]),
            signature=bytes.fromhex(d["signature"]),
        )


def verify_deletion_proof(
    proof: DeletionProof,
    identity_pubkey: bytes,
    chain_hashes: list[bytes] | None = None,
) -> bool:
    """Check the proof signature and, when a chain is supplied, that the
    referenced audit head actually occurs in it."""
    if not verify_signature(identity_pubkey, proof.signed_payload(), proof.signature):
        return False
    if chain_hashes is not None and proof.audit_head_hash not in chain_hashes:
        return False
    return True


class KeyVault:
    """Key hierarchy rooted in a master key that only ever rests sealed.

    Tombstones are persisted as salted hashes of unit ids (the shredded
    list itself must not leak identifiers to the host), inside a
    SealedBlob. Derivation is pure and lock-free; shred and rotate go
    through one writer lock.
    """

    def __init__(self, data_dir: str | Path, tee: TeeSimulator):
        self.tee = tee
        self.dir = Path(data_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self._state_path = self.dir / "vault.sealed"
        self._tombstone_path = self.dir / "tombstones.sealed"
        self._lock = threading.Lock()
        self._proofs: dict[str, DeletionProof] = {}
        self._shredded: dict[bytes, int] = {}  # salted hash -> shred time
        self._load_or_init()

    # -- persistence ---------------------------------------------------

    def _load_or_init(self) -> None:
        if self._state_path.exists():
            raw = self.tee.unseal(SealedBlob.from_bytes(self._state_path.read_bytes()))
            self.master_key = raw[:32]
            self.current_epoch = struct.unpack(">Q", raw[32:40])[0]
        else:
            self.master_key = os.urandom(32)
            self.current_epoch = 0
            self._persist_state()
        self._tombstone_salt = HKDF(
            algorithm=SHA256(), length=32, salt=None, info=b"tombstone-salt"
        ).derive(self.master_key)
        if self._tombstone_path.exists():
            raw = self.tee.unseal(
                SealedBlob.from_bytes(self._tombstone_path.read_bytes())
            )
            off = 0
            while off < len(raw):
                (n,) = struct.unpack(">I", raw[off : off + 4])
                rec = raw[off + 4 : off + 4 + n]
                self._shredded[rec[:32]] = struct.unpack(">Q", rec[32:40])[0]
                off += 4 + n

    def _persist_state(self) -> None:
        blob = self.tee.seal(self.master_key + struct.pack(">Q", self.current_epoch))
        self._atomic_write(self._state_path, blob.to_bytes())

    def _persist_tombstones(self) -> None:
        records = b""
        for h, ts in self._shredded.items():
            rec = h + struct.pack(">Q", ts)
            records += struct.pack(">I", len(rec)) + rec
        self._atomic_write(self._tombstone_path, self.tee.seal(records).to_bytes())

    @staticmethod
    def _atomic_write(path: Path, data: bytes) -> None:
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)

    # -- hierarchy -----------------------------------------------------

    def _unit_hash(self, unit_id: str) -> bytes:
        return hashlib.sha256(self._tombstone_salt + unit_id.encode("utf-8")).digest()

    def is_shredded(self, unit_id: str) -> bool:
        return self._unit_hash(unit_id) in self._shredded

    def derive_duk(self, unit_id: str, epoch: int | None = None) -> DataUnitKey:
        if epoch is None:
            epoch = self.current_epoch
        if epoch > self.current_epoch:
            raise EpochError(f"epoch {epoch} is in the future (current {self.current_epoch})")
        if self.is_shredded(unit_id):
            raise ShreddedError(f"unit {unit_id!r} has been shredded")
        key = HKDF(
            algorithm=SHA256(),
            length=32,
            salt=struct.pack(">Q", epoch),
            info=b"duk:" + unit_id.encode("utf-8"),
        ).derive(self.master_key)
        return DataUnitKey(unit_id=unit_id, epoch=epoch, key=key)

    def garbage_key(self) -> bytes:
        """Fresh random key that the caller must discard after use.

        Re-encrypting a block under a discarded key turns it into
        permanent random noise while preserving its size on disk.
        """
        return os.urandom(32)

    def shred(self, unit_id: str, audit_head_hash: bytes, *, known: bool = True) -> DeletionProof:
        with self._lock:
            if unit_id in self._proofs:
                return self._proofs[unit_id]
            if self.is_shredded(unit_id):
                # Shredded in a previous process lifetime; re-sign a proof
                # against the recorded timestamp.
                ts = self._shredded[self._unit_hash(unit_id)]
            elif not known:
                raise NotFoundError(f"unknown unit {unit_id!r}")
            else:
                ts = int(time.time())
                self._shredded[self._unit_hash(unit_id)] = ts
                self._persist_tombstones()
            proof = DeletionProof(
                unit_id=unit_id,
                shredded_at=ts,
                audit_head_hash=audit_head_hash,
                signature=b"",
            )
            proof = DeletionProof(
                unit_id=unit_id,
                shredded_at=ts,
                audit_head_hash=audit_head_hash,
                signature=self.tee.sign(proof.signed_payload()),
            )
            self._proofs[unit_id] = proof
            return proof

    def rotate_epoch(self) -> int:
        with self._lock:
            self.current_epoch += 1
            self._persist_state()
            return self.current_epoch
