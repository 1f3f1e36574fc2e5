"""Layer 1 storage: sealed, rollback-protected, pattern-hiding.

Three stores share one directory tree:

  store/<unit-hash>/<i>.blk    fixed-size AEAD object blocks
  store/cold/<unit-hash>/...   demoted units, same block format
  store/root.sealed            SealedBlob of (merkle root || counter)
  store/graph/<node-hash>/<i>.gblk  degree-hiding adjacency blocks
  store/segments/<id>.seg      sealed cold vector segments

Every object is split into 4096-byte plaintext blocks (4-byte length
prefix + up to 4092 data bytes, zero padded) and encrypted per block
under the unit's Data Unit Key. Block ciphertext hashes form a Merkle
tree whose root, paired with the value of a monotonic counter, is
sealed to the service measurement: restoring any older authentic state
is detected as a rollback because the counter has moved on.
"""

from __future__ import annotations

import hashlib
import os
import struct
import threading
from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

import json

from memtrust.canonical import canonical_json
from memtrust.errors import (
    IntegrityError,
    NotFoundError,
    RollbackError,
    ShreddedError,
)
from memtrust.keyvault import KeyVault
from memtrust.tee import MonotonicCounter, SealedBlob, TeeSimulator

BLOCK_PLAINTEXT = 4096
BLOCK_DATA = BLOCK_PLAINTEXT - 4  # 4-byte length prefix inside each block
LEAF_TAG = b"\x00"
NODE_TAG = b"\x01"
EMPTY_ROOT = hashlib.sha256(b"MT-EMPTY").digest()

GRAPH_SLOT_BYTES = 64  # 1 flag + 2 length + 61 id bytes
GRAPH_MAX_ID = GRAPH_SLOT_BYTES - 3


def merkle_root(leaves: list[bytes]) -> bytes:
    """Binary Merkle root; odd nodes promote unchanged; empty list has a
    fixed sentinel root. Internal nodes are domain-separated from leaves."""
    if not leaves:
        return EMPTY_ROOT
    level = list(leaves)
    while len(level) > 1:
        nxt = []
        for i in range(0, len(level) - 1, 2):
            nxt.append(hashlib.sha256(NODE_TAG + level[i] + level[i + 1]).digest())
        if len(level) % 2 == 1:
            nxt.append(level[-1])
        level = nxt
    return level[0]


def _unit_hash(unit_id: str) -> str:
    return hashlib.sha256(unit_id.encode("utf-8")).hexdigest()


@dataclass
class _ObjectMeta:
    unit_id: str
    size: int
    blocks: int
    epoch: int
    cold: bool = False
    leaves: list[bytes] = field(default_factory=list)


class SealedStore:
    """AEAD block object store anchored to a monotonic counter."""

    def __init__(self, data_dir: str | Path, tee: TeeSimulator, vault: KeyVault,
                 counter: MonotonicCounter):
        self.tee = tee
        self.vault = vault
        self.counter = counter
        self.root_dir = Path(data_dir) / "store"
        self.root_dir.mkdir(parents=True, exist_ok=True)
        (self.root_dir / "cold").mkdir(exist_ok=True)
        self._root_path = self.root_dir / "root.sealed"
        self._manifest_path = self.root_dir / "manifest.sealed"
        self._lock = threading.RLock()
        self._batch_depth = 0
        self.write_listeners: list[Callable[[str, int], None]] = []
        self._objects: dict[str, _ObjectMeta] = {}
        self._write_seq = 0
        self._load()

    # -- persistence ---------------------------------------------------

    def _load(self) -> None:
        if not self._manifest_path.exists():
            self._commit()
            return
        raw = self.tee.unseal(SealedBlob.from_bytes(self._manifest_path.read_bytes()))
        doc = json.loads(raw.decode("utf-8"))
        self._write_seq = doc["write_seq"]
        for uid, m in doc["objects"].items():
            self._objects[uid] = _ObjectMeta(
                unit_id=uid, size=m["size"], blocks=m["blocks"], epoch=m["epoch"],
                cold=m["cold"], leaves=[bytes.fromhex(h) for h in m["leaves"]],
            )

    def _all_leaves(self) -> list[bytes]:
        leaves: list[bytes] = []
        for uid in sorted(self._objects):
            leaves.extend(self._objects[uid].leaves)
        return leaves

    def _commit(self) -> None:
        """Durably persist manifest, advance the counter, reseal the root."""
        doc = {
            "write_seq": self._write_seq,
            "objects": {
                uid: {
                    "size": m.size, "blocks": m.blocks, "epoch": m.epoch,
                    "cold": m.cold, "leaves": [h.hex() for h in m.leaves],
                }
                for uid, m in self._objects.items()
            },
        }
        self._atomic_write(self._manifest_path,
                           self.tee.seal(canonical_json(doc)).to_bytes())
        anchored = self.counter.increment()
        root = merkle_root(self._all_leaves())
        self._atomic_write(self._root_path,
                           self.tee.seal(root + struct.pack(">Q", anchored)).to_bytes())

    @staticmethod
    def _atomic_write(path: Path, data: bytes) -> None:
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)

    @contextmanager
    def batch(self):
        """Defer the root reseal so a multi-object pass commits once."""
        with self._lock:
            self._batch_depth += 1
            try:
                yield self
            finally:
                self._batch_depth -= 1
                if self._batch_depth == 0:
                    self._commit()

    def _maybe_commit(self) -> None:
        if self._batch_depth == 0:
            self._commit()

    # -- block plumbing ------------------------------------------------

    def _unit_dir(self, unit_id: str, cold: bool) -> Path:
        base = self.root_dir / "cold" if cold else self.root_dir
        return base / _unit_hash(unit_id)

    def _block_nonce(self, unit_id: str, index: int) -> bytes:
        self._write_seq += 1
        return (
            hashlib.sha256(unit_id.encode("utf-8")).digest()[:4]
            + struct.pack(">I", index)
            + struct.pack(">I", self._write_seq & 0xFFFFFFFF)
        )

    def _write_block(self, unit_id: str, index: int, plaintext: bytes,
                     key: bytes, cold: bool) -> bytes:
        nonce = self._block_nonce(unit_id, index)
        ct = AESGCM(key).encrypt(nonce, plaintext, None)
        d = self._unit_dir(unit_id, cold)
        d.mkdir(parents=True, exist_ok=True)
        path = d / f"{index}.blk"
        with open(path, "wb") as f:
            f.write(nonce + ct)
            f.flush()
            os.fsync(f.fileno())
        for listener in self.write_listeners:
            listener(str(path.relative_to(self.root_dir)), 12 + len(ct))
        return hashlib.sha256(LEAF_TAG + ct).digest()

    def _read_block_raw(self, unit_id: str, index: int, cold: bool) -> tuple[bytes, bytes]:
        path = self._unit_dir(unit_id, cold) / f"{index}.blk"
        try:
            raw = path.read_bytes()
        except FileNotFoundError:
            raise NotFoundError(f"missing block {index} of unit {unit_id!r}")
        return raw[:12], raw[12:]

    # -- public API ----------------------------------------------------

    def put_object(self, unit_id: str, data: bytes) -> str:
        """Store (or replace) the object for a unit; returns its handle."""
        if self.vault.is_shredded(unit_id):
            raise ShreddedError(f"unit {unit_id!r} has been shredded")
        duk = self.vault.derive_duk(unit_id)
        with self._lock:
            old = self._objects.get(unit_id)
            cold = old.cold if old else False
            n_blocks = max(1, -(-len(data) // BLOCK_DATA))
            leaves = []
            for i in range(n_blocks):
                chunk = data[i * BLOCK_DATA : (i + 1) * BLOCK_DATA]
                plaintext = struct.pack(">I", len(chunk)) + chunk
                plaintext += b"\x00" * (BLOCK_PLAINTEXT - len(plaintext))
                leaves.append(self._write_block(unit_id, i, plaintext, duk.key, cold))
            if old:
                for i in range(n_blocks, old.blocks):
                    (self._unit_dir(unit_id, cold) / f"{i}.blk").unlink(missing_ok=True)
            self._objects[unit_id] = _ObjectMeta(
                unit_id=unit_id, size=len(data), blocks=n_blocks,
                epoch=duk.epoch, cold=cold, leaves=leaves,
            )
            self._maybe_commit()
        return unit_id

    def _check_freshness(self) -> bytes:
        """Verify the sealed (root, counter) pair against live state."""
        if not self._root_path.exists():
            raise IntegrityError("sealed root missing")
        sealed = self.tee.unseal(SealedBlob.from_bytes(self._root_path.read_bytes()))
        root, anchored = sealed[:32], struct.unpack(">Q", sealed[32:40])[0]
        current = self.counter.read()
        if anchored != current:
            raise RollbackError(
                f"sealed root anchored at counter {anchored} but counter is {current}; "
                "stale state presented"
            )
        if root != merkle_root(self._all_leaves()):
            raise IntegrityError("manifest leaves do not match sealed root")
        return root

    def get_object(self, handle: str) -> bytes:
        unit_id = handle
        if self.vault.is_shredded(unit_id):
            raise ShreddedError(f"unit {unit_id!r} has been shredded")
        with self._lock:
            meta = self._objects.get(unit_id)
            if meta is None:
                raise NotFoundError(f"no object for unit {unit_id!r}")
            self._check_freshness()
            duk = self.vault.derive_duk(unit_id, meta.epoch)
            out = bytearray()
            for i in range(meta.blocks):
                nonce, ct = self._read_block_raw(unit_id, i, meta.cold)
                if hashlib.sha256(LEAF_TAG + ct).digest() != meta.leaves[i]:
                    raise IntegrityError(f"block {i} of {unit_id!r} fails its Merkle leaf")
                try:
                    plaintext = AESGCM(duk.key).decrypt(nonce, ct, None)
                except InvalidTag as exc:
                    raise IntegrityError(
                        f"block {i} of {unit_id!r} fails authentication"
                    ) from exc
                (n,) = struct.unpack(">I", plaintext[:4])
                out += plaintext[4 : 4 + n]
            return bytes(out)

    def has_object(self, unit_id: str) -> bool:
        return unit_id in self._objects

    def object_units(self) -> list[str]:
        return list(self._objects)

    def object_meta(self, unit_id: str) -> tuple[int, int, int, bool]:
        m = self._objects[unit_id]
        return m.size, m.blocks, m.epoch, m.cold

    def raw_blocks(self, unit_id: str) -> list[tuple[bytes, bytes]]:
        """(nonce, ciphertext) pairs of a unit, for audits and key-attempt tests."""
        m = self._objects[unit_id]
        return [self._read_block_raw(unit_id, i, m.cold) for i in range(m.blocks)]

    def set_tier(self, unit_id: str, cold: bool) -> None:
        """Relocate a unit between the active and cold trees."""
        with self._lock:
            meta = self._objects[unit_id]
            if meta.cold == cold:
                return
            src, dst = self._unit_dir(unit_id, meta.cold), self._unit_dir(unit_id, cold)
            dst.parent.mkdir(parents=True, exist_ok=True)
            os.replace(src, dst)
            meta.cold = cold
            self._maybe_commit()

    def reencrypt_unit(self, unit_id: str, key: bytes | None = None) -> None:
        """Rewrite every block of a unit under a new key.

        With no key given the unit is re-encrypted under its DUK at the
        vault's current epoch (normal rotation). With an explicit key
        the caller supplies a garbage key for dead units: the blocks are
        replaced by noise of identical size, no plaintext needed.
        """
        with self._lock:
            meta = self._objects[unit_id]
            if key is None:
                old = self.vault.derive_duk(unit_id, meta.epoch)
                new = self.vault.derive_duk(unit_id)
                leaves = []
                for i in range(meta.blocks):
                    nonce, ct = self._read_block_raw(unit_id, i, meta.cold)
                    plaintext = AESGCM(old.key).decrypt(nonce, ct, None)
                    leaves.append(self._write_block(unit_id, i, plaintext, new.key, meta.cold))
                meta.epoch = new.epoch
            else:
                leaves = []
                for i in range(meta.blocks):
                    noise = os.urandom(BLOCK_PLAINTEXT)
                    leaves.append(self._write_block(unit_id, i, noise, key, meta.cold))
            meta.leaves = leaves
            self._maybe_commit()


class GraphStore:
    """Degree-hiding adjacency storage.

    Every adjacency list becomes ceil(max(d,1)/B) encrypted blocks of
    identical size; the final block is padded with dummy slots that are
    indistinguishable from real ones in the ciphertext. Supernodes chain
    through a continuation flag at the block head.
    """

    def __init__(self, data_dir: str | Path, vault: KeyVault, slots: int = 16):
        self.vault = vault
        self.slots = slots
        self.dir = Path(data_dir) / "store" / "graph"
        self.dir.mkdir(parents=True, exist_ok=True)
        self._counts: dict[str, int] = {}
        self._seq = 0

    def _node_dir(self, node_id: str) -> Path:
        return self.dir / _unit_hash("graph:" + node_id)

    def _key(self, node_id: str) -> bytes:
        return self.vault.derive_duk("graph:" + node_id).key

    def store_adjacency(self, node_id: str, neighbors: list[str]) -> list[Path]:
        entries = list(neighbors)
        n_blocks = max(1, -(-len(entries) // self.slots))
        key = self._key(node_id)
        d = self._node_dir(node_id)
        d.mkdir(parents=True, exist_ok=True)
        paths = []
        for b in range(n_blocks):
            chunk = entries[b * self.slots : (b + 1) * self.slots]
            body = bytearray([1 if b < n_blocks - 1 else 0])
            for s in range(self.slots):
                if s < len(chunk):
                    ident = chunk[s].encode("utf-8")
                    if len(ident) > GRAPH_MAX_ID:
                        raise ValueError(f"neighbor id longer than {GRAPH_MAX_ID} bytes")
                    slot = bytes([1]) + struct.pack(">H", len(ident)) + ident
                    slot += b"\x00" * (GRAPH_SLOT_BYTES - len(slot))
                else:
                    slot = bytes([0]) + os.urandom(GRAPH_SLOT_BYTES - 1)
                body += slot
            self._seq += 1
            nonce = struct.pack(">Q", self._seq) + os.urandom(4)
            ct = AESGCM(key).encrypt(nonce, bytes(body), None)
            path = d / f"{b}.gblk"
            path.write_bytes(nonce + ct)
            paths.append(path)
        for b in range(n_blocks, self._counts.get(node_id, 0)):
            (d / f"{b}.gblk").unlink(missing_ok=True)
        self._counts[node_id] = n_blocks
        return paths

    def load_adjacency(self, node_id: str) -> list[str]:
        d = self._node_dir(node_id)
        if not d.exists():
            return []
        count = self._counts.get(node_id, len(list(d.glob("*.gblk"))))
        key = self._key(node_id)
        neighbors: list[str] = []
        for b in range(count):
            raw = (d / f"{b}.gblk").read_bytes()
            body = AESGCM(key).decrypt(raw[:12], raw[12:], None)
            for s in range(self.slots):
                slot = body[1 + s * GRAPH_SLOT_BYTES : 1 + (s + 1) * GRAPH_SLOT_BYTES]
                if slot[0] == 1:
                    (n,) = struct.unpack(">H", slot[1:3])
                    neighbors.append(slot[3 : 3 + n].decode("utf-8"))
        return neighbors


class SegmentCache:
    """Hot/cold sealed vector segments with an LRU hot budget.

    Hot segments live only in process memory; cold segments exist on
    disk only as sealed ciphertext.
    """

    def __init__(self, data_dir: str | Path, tee: TeeSimulator, hot_budget: int = 8):
        self.tee = tee
        self.hot_budget = hot_budget
        self.dir = Path(data_dir) / "store" / "segments"
        self.dir.mkdir(parents=True, exist_ok=True)
        self._hot: "OrderedDict[str, list]" = OrderedDict()

    def _seg_path(self, segment_id: str) -> Path:
        return self.dir / f"{_unit_hash('seg:' + segment_id)}.seg"

    def put_segment(self, segment_id: str,
                    vectors: list[tuple[str, list[float], bytes]]) -> None:
        self._hot[segment_id] = list(vectors)
        self._hot.move_to_end(segment_id)
        self._enforce_budget()

    def _enforce_budget(self) -> None:
        while len(self._hot) > self.hot_budget:
            self.evict_segment(next(iter(self._hot)))

    def evict_segment(self, segment_id: str) -> None:
        vectors = self._hot.pop(segment_id, None)
        if vectors is None:
            return
        doc = [{"id": vid, "vector": vec, "payload": payload.hex()}
               for vid, vec, payload in vectors]
        self._seg_path(segment_id).write_bytes(
            self.tee.seal(canonical_json(doc)).to_bytes()
        )

    def load_segment(self, segment_id: str) -> list[tuple[str, list[float], bytes]]:
        if segment_id in self._hot:
            self._hot.move_to_end(segment_id)
            return self._hot[segment_id]
        path = self._seg_path(segment_id)
        if not path.exists():
            raise NotFoundError(f"no segment {segment_id!r}")
        doc = json.loads(self.tee.unseal(SealedBlob.from_bytes(path.read_bytes())))
        vectors = [(e["id"], e["vector"], bytes.fromhex(e["payload"])) for e in doc]
        self._hot[segment_id] = vectors
        self._hot.move_to_end(segment_id)
        self._enforce_budget()
        return vectors

    def hot_segments(self) -> list[str]:
        return list(self._hot)
