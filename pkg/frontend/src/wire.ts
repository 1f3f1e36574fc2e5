// Length-prefixed JSON framing over a TCP socket: 4-byte big-endian
// length, then a UTF-8 JSON body. One in-flight request at a time per
// connection (sessions are single-threaded by contract).

import * as net from "node:net";

export const MAX_FRAME = 16 * 1024 * 1024;

export interface WireRequest {
  op: string;
  id: string;
  payload: Record<string, unknown>;
  ticket?: Record<string, unknown>;
}

export interface WireResponse {
  id: string | null;
  ok: boolean;
  payload?: Record<string, unknown>;
  error?: { code: string; message: string };
}

export function encodeFrame(obj: unknown): Buffer {
  const body = Buffer.from(JSON.stringify(obj), "utf-8");
  if (body.length > MAX_FRAME) {
    throw new Error(`frame body ${body.length} exceeds ${MAX_FRAME} bytes`);
  }
  const header = Buffer.alloc(4);
  header.writeUInt32BE(body.length, 0);
  return Buffer.concat([header, body]);
}

/** Buffers socket data and yields complete decoded frames. */
export class FrameReader {
  private buffer = Buffer.alloc(0);
  private waiters: Array<{
    resolve: (v: WireResponse) => void;
    reject: (e: Error) => void;
  }> = [];
  private ready: WireResponse[] = [];
  private closed: Error | null = null;

  constructor(socket: net.Socket) {
    // no setEncoding on the socket, so data events always carry Buffers
    socket.on("data", (chunk) =>
      this.onData(Buffer.isBuffer(chunk) ? chunk : Buffer.from(chunk)),
    );
    socket.on("error", (err) => this.onClose(err));
    socket.on("close", () => this.onClose(new Error("connection closed")));
  }

  private onData(chunk: Buffer): void {
    this.buffer = Buffer.concat([this.buffer, chunk]);
    while (this.buffer.length >= 4) {
      const length = this.buffer.readUInt32BE(0);
      if (length > MAX_FRAME) {
        this.onClose(new Error(`declared frame length ${length} too large`));
        return;
      }
      if (this.buffer.length < 4 + length) {
        break;
      }
      const body = this.buffer.subarray(4, 4 + length);
      this.buffer = this.buffer.subarray(4 + length);
      let frame: WireResponse;
      try {
        frame = JSON.parse(body.toString("utf-8")) as WireResponse;
      } catch (err) {
        this.onClose(new Error(`undecodable frame: ${err}`));
        return;
      }
      const waiter = this.waiters.shift();
      if (waiter) {
        waiter.resolve(frame);
      } else {
        this.ready.push(frame);
      }
    }
  }

  private onClose(err: Error): void {
    if (this.closed) return;
    this.closed = err;
    for (const w of this.waiters.splice(0)) {
      w.reject(err);
    }
  }

  next(): Promise<WireResponse> {
    const queued = this.ready.shift();
    if (queued) return Promise.resolve(queued);
    if (this.closed) return Promise.reject(this.closed);
    return new Promise((resolve, reject) => {
      this.waiters.push({ resolve, reject });
    });
  }
}

export function connectSocket(
  host: string,
  port: number,
  timeoutMs = 10_000,
): Promise<net.Socket> {
  return new Promise((resolve, reject) => {
    const socket = net.createConnection({ host, port });
    const timer = setTimeout(() => {
      socket.destroy();
      reject(new Error(`connect timeout to ${host}:${port}`));
    }, timeoutMs);
    socket.once("connect", () => {
      clearTimeout(timer);
      resolve(socket);
    });
    socket.once("error", (err) => {
      clearTimeout(timer);
      reject(err);
    });
  });
}
