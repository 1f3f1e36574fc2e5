// Trust anchors and signature verification.
//
// The server publishes released build measurements as transparency-log
// lines (`<hex measurement> <iso8601>`); clients pin that set plus the
// service's Ed25519 identity key and refuse to talk to anything else.
// Raw 32-byte keys are wrapped in fixed SPKI DER prefixes so node's
// crypto module can consume them without extra dependencies.

import * as crypto from "node:crypto";
import * as fs from "node:fs";

const ED25519_SPKI_PREFIX = Buffer.from("302a300506032b6570032100", "hex");
const X25519_SPKI_PREFIX = Buffer.from("302a300506032b656e032100", "hex");

export function ed25519PublicKey(raw: Buffer): crypto.KeyObject {
  if (raw.length !== 32) {
    throw new Error(`ed25519 public key must be 32 bytes, got ${raw.length}`);
  }
  return crypto.createPublicKey({
    key: Buffer.concat([ED25519_SPKI_PREFIX, raw]),
    format: "der",
    type: "spki",
  });
}

export function x25519PublicKey(raw: Buffer): crypto.KeyObject {
  if (raw.length !== 32) {
    throw new Error(`x25519 public key must be 32 bytes, got ${raw.length}`);
  }
  return crypto.createPublicKey({
    key: Buffer.concat([X25519_SPKI_PREFIX, raw]),
    format: "der",
    type: "spki",
  });
}

export function rawPublicBytes(key: crypto.KeyObject): Buffer {
  const der = key.export({ format: "der", type: "spki" });
  return Buffer.from(der.subarray(der.length - 32));
}

export interface AttestationReport {
  measurement: string;
  nonce: string;
  issued_at: number;
  platform_key_id: string;
  signature: string;
}

/** Signature check plus measurement/nonce binding for a server report. */
export function verifyReport(
  report: AttestationReport,
  expectedNonce: Buffer,
  platformKey: crypto.KeyObject,
): boolean {
  const nonce = Buffer.from(report.nonce, "hex");
  if (!nonce.equals(expectedNonce)) {
    return false;
  }
  const issuedAt = Buffer.alloc(8);
  issuedAt.writeBigUInt64BE(BigInt(report.issued_at), 0);
  const payload = Buffer.concat([
    Buffer.from(report.measurement, "hex"),
    nonce,
    issuedAt,
  ]);
  return crypto.verify(
    null,
    payload,
    platformKey,
    Buffer.from(report.signature, "hex"),
  );
}

export interface DeletionProof {
  unit_id: string;
  shredded_at: number;
  audit_head_hash: string;
  signature: string;
}

export function verifyDeletionProof(
  proof: DeletionProof,
  platformKey: crypto.KeyObject,
): boolean {
  const shreddedAt = Buffer.alloc(8);
  shreddedAt.writeBigUInt64BE(BigInt(proof.shredded_at), 0);
  const payload = Buffer.concat([
    Buffer.from(proof.unit_id, "utf-8"),
    shreddedAt,
    Buffer.from(proof.audit_head_hash, "hex"),
  ]);
  return crypto.verify(
    null,
    payload,
    platformKey,
    Buffer.from(proof.signature, "hex"),
  );
}

export class PinnedTrust {
  readonly measurements: Set<string>;
  readonly platformKey: crypto.KeyObject;

  constructor(measurements: Iterable<string>, platformPubkeyHex: string) {
    this.measurements = new Set(
      [...measurements].map((m) => m.toLowerCase()),
    );
    if (this.measurements.size === 0) {
      throw new Error("at least one pinned measurement is required");
    }
    this.platformKey = ed25519PublicKey(Buffer.from(platformPubkeyHex, "hex"));
  }

  /** Load pins from a transparency-log file of `<hex> <iso8601>` lines. */
  static load(logPath: string, platformPubkeyHex: string): PinnedTrust {
    const measurements: string[] = [];
    for (const line of fs.readFileSync(logPath, "utf-8").split("\n")) {
      const trimmed = line.trim();
      if (!trimmed) continue;
      const measurement = trimmed.split(/\s+/)[0];
      if (!/^[0-9a-fA-F]{64}$/.test(measurement)) {
        throw new Error(`bad transparency-log line: ${trimmed}`);
      }
      measurements.push(measurement);
    }
    return new PinnedTrust(measurements, platformPubkeyHex);
  }

  accepts(measurementHex: string): boolean {
    return this.measurements.has(measurementHex.toLowerCase());
  }
}
