// UMP client: one attestation-verifying handshake per session, then
// ticketed remember/recall/forget calls over the same connection.

import * as crypto from "node:crypto";
import * as net from "node:net";

import {
  AttestationReport,
  DeletionProof,
  PinnedTrust,
  rawPublicBytes,
  verifyDeletionProof,
  verifyReport,
  x25519PublicKey,
} from "./trust.js";
import {
  FrameReader,
  WireRequest,
  WireResponse,
  connectSocket,
  encodeFrame,
} from "./wire.js";

export interface Address {
  host: string;
  port: number;
}

/** Attestation failed; no user payload was sent on the connection. */
export class AttestationError extends Error {}

/** The server's policy engine denied the operation (already audited). */
export class DeniedError extends Error {
  constructor(
    readonly reason: string,
    message: string,
  ) {
    super(message);
  }
}

export class RequestError extends Error {
  constructor(
    readonly code: string,
    message: string,
  ) {
    super(message);
  }
}

export interface RecallHit {
  doc_id: string;
  score: number;
  sources: string[];
  text: string;
}

export interface ForgetResult {
  proof: DeletionProof;
  verified: boolean;
}

interface Ticket extends Record<string, unknown> {
  session_id: string;
  expires_at: number;
}

export class ClientSession {
  requestCounter = 0;
  attestationVerifications = 0;

  private socket: net.Socket | null = null;
  private reader: FrameReader | null = null;
  private ticket: Ticket | null = null;
  private channelKey: Buffer | null = null;
  private sessionId = "";

  constructor(
    readonly address: Address,
    readonly pins: PinnedTrust,
    readonly clientName = "sdk",
  ) {}

  /**
   * Attestation-verifying handshake. The report is checked (signature,
   * fresh nonce, pinned measurement) before any user data leaves the
   * client; on failure the connection is torn down with nothing but the
   * hello frame ever sent.
   */
  async connect(): Promise<void> {
    if (this.socket) {
      throw new Error("session already connected; open a new session");
    }
    this.socket = await connectSocket(this.address.host, this.address.port);
    this.reader = new FrameReader(this.socket);
    const nonce = crypto.randomBytes(32);
    const eph = crypto.generateKeyPairSync("x25519");
    let hello: WireResponse;
    try {
      hello = await this.roundTrip({
        op: "handshake",
        id: this.nextId(),
        payload: {
          nonce: nonce.toString("hex"),
          client_ephemeral_pubkey: rawPublicBytes(eph.publicKey).toString(
            "hex",
          ),
          client: this.clientName,
        },
      });
    } catch (err) {
      this.close();
      throw err;
    }
    if (!hello.ok || !hello.payload) {
      this.close();
      throw new AttestationError(
        `handshake rejected: ${hello.error?.message ?? "unknown"}`,
      );
    }
    const report = hello.payload.report as AttestationReport;
    this.attestationVerifications += 1;
    if (!verifyReport(report, nonce, this.pins.platformKey)) {
      this.close();
      throw new AttestationError(
        "attestation report failed verification; aborting before data",
      );
    }
    if (!this.pins.accepts(report.measurement)) {
      this.close();
      throw new AttestationError(
        `measurement ${report.measurement} is not pinned; aborting before data`,
      );
    }
    const serverPub = x25519PublicKey(
      Buffer.from(hello.payload.server_ephemeral_pubkey as string, "hex"),
    );
    const shared = crypto.diffieHellman({
      privateKey: eph.privateKey,
      publicKey: serverPub,
    });
    this.channelKey = Buffer.from(
      crypto.hkdfSync("sha256", shared, nonce, "ump channel", 32),
    );
    this.ticket = hello.payload.ticket as Ticket;
    this.sessionId = hello.payload.session_id as string;
  }

  get connected(): boolean {
    return this.ticket !== null;
  }

  async remember(
    text: string,
    labels: string[] = ["default"],
  ): Promise<{ episode_id: string; unit_id: string }> {
    const resp = await this.call("remember", { text, labels });
    return resp as { episode_id: string; unit_id: string };
  }

  async recall(query: string, topN = 10): Promise<RecallHit[]> {
    const resp = await this.call("recall", {
      query_text: query,
      top_n: topN,
    });
    return (resp.ranked ?? []) as RecallHit[];
  }

  /** Forget plus local verification of the returned deletion proof. */
  async forget(unitId: string): Promise<ForgetResult> {
    const resp = await this.call("forget", { unit_id: unitId });
    const proof = resp.proof as DeletionProof;
    return {
      proof,
      verified: verifyDeletionProof(proof, this.pins.platformKey),
    };
  }

  close(): void {
    this.socket?.destroy();
    this.socket = null;
    this.reader = null;
    this.ticket = null;
  }

  private nextId(): string {
    this.requestCounter += 1;
    return `${this.requestCounter}`;
  }

  private async call(
    op: string,
    payload: Record<string, unknown>,
  ): Promise<Record<string, unknown>> {
    if (!this.ticket) {
      throw new Error("session not connected");
    }
    const resp = await this.roundTrip({
      op,
      id: this.nextId(),
      payload,
      ticket: this.ticket,
    });
    if (!resp.ok) {
      const code = resp.error?.code ?? "internal";
      const message = resp.error?.message ?? "request failed";
      if (code === "denied") {
        throw new DeniedError(code, message);
      }
      throw new RequestError(code, message);
    }
    return resp.payload ?? {};
  }

  private async roundTrip(request: WireRequest): Promise<WireResponse> {
    if (!this.socket || !this.reader) {
      throw new Error("socket not open");
    }
    this.socket.write(encodeFrame(request));
    const resp = await this.reader.next();
    if (resp.id !== null && resp.id !== request.id) {
      throw new Error(
        `response id ${resp.id} does not match request ${request.id}`,
      );
    }
    return resp;
  }
}

export async function connect(
  address: Address,
  pins: PinnedTrust,
  clientName = "sdk",
): Promise<ClientSession> {
  const session = new ClientSession(address, pins, clientName);
  await session.connect();
  return session;
}
