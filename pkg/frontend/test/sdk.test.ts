import { spawn, ChildProcess } from "node:child_process";
import * as fs from "node:fs";
import * as os from "node:os";
import * as path from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import {
  AttestationError,
  ClientSession,
  connect,
  parseScenario,
  PinnedTrust,
  runScenario,
} from "../src/index.js";

const HARNESS = path.join(__dirname, "server_harness.py");

interface Harness {
  proc: ChildProcess;
  port: number;
  measurement: string;
  platformPubkey: string;
  pinLog: string;
  frameLog(): Promise<Array<{ op: string; id: string }>>;
  stop(): void;
}

function startHarness(): Promise<Harness> {
  const dataDir = fs.mkdtempSync(path.join(os.tmpdir(), "memtrust-sdk-"));
  const proc = spawn("python3", [HARNESS, dataDir], {
    stdio: ["pipe", "pipe", "inherit"],
  });
  const lines: string[] = [];
  const waiters: Array<(line: string) => void> = [];
  let residue = "";
  proc.stdout!.on("data", (chunk: Buffer) => {
    residue += chunk.toString("utf-8");
    let idx;
    while ((idx = residue.indexOf("\n")) >= 0) {
      const line = residue.slice(0, idx);
      residue = residue.slice(idx + 1);
      const waiter = waiters.shift();
      if (waiter) waiter(line);
      else lines.push(line);
    }
  });
  const nextLine = (): Promise<string> => {
    const queued = lines.shift();
    if (queued !== undefined) return Promise.resolve(queued);
    return new Promise((resolve) => waiters.push(resolve));
  };
  return nextLine().then((first) => {
    const info = JSON.parse(first);
    return {
      proc,
      port: info.port,
      measurement: info.measurement,
      platformPubkey: info.platform_pubkey,
      pinLog: info.pin_log,
      frameLog: async () => {
        proc.stdin!.write("framelog\n");
        return JSON.parse(await nextLine());
      },
      stop: () => {
        proc.stdin!.write("stop\n");
      },
    };
  });
}

let server: Harness;

beforeAll(async () => {
  server = await startHarness();
}, 30_000);

afterAll(() => {
  server?.stop();
});

function goodPins(): PinnedTrust {
  return PinnedTrust.load(server.pinLog, server.platformPubkey);
}

function address() {
  return { host: "127.0.0.1", port: server.port };
}

describe("PinnedTrust", () => {
  it("loads measurements from transparency-log lines", () => {
    const pins = goodPins();
    expect(pins.accepts(server.measurement)).toBe(true);
    expect(pins.accepts("ab".repeat(32))).toBe(false);
  });

  it("rejects an empty pin set", () => {
    expect(() => new PinnedTrust([], server.platformPubkey)).toThrow();
  });

  it("rejects malformed log lines", () => {
    const bad = path.join(os.tmpdir(), `bad-pins-${process.pid}.log`);
    fs.writeFileSync(bad, "not-a-measurement 2026-01-01T00:00:00Z\n");
    expect(() => PinnedTrust.load(bad, server.platformPubkey)).toThrow();
  });
});

describe("session operations", () => {
  it("remember then recall returns the stored text first", async () => {
    const session = await connect(address(), goodPins());
    try {
      await session.remember("the quarterly osprey report is due friday");
      const hits = await session.recall("osprey report");
      expect(hits.length).toBeGreaterThan(0);
      expect(hits[0].text).toContain("osprey");
    } finally {
      session.close();
    }
  });

  it("forget verifies the deletion proof locally", async () => {
    const session = await connect(address(), goodPins());
    try {
      const ack = await session.remember("a fact destined for deletion");
      const result = await session.forget(ack.unit_id);
      expect(result.verified).toBe(true);
      expect(result.proof.unit_id).toBe(ack.unit_id);
    } finally {
      session.close();
    }
  });

  it("recall after forget excludes the unit", async () => {
    const session = await connect(address(), goodPins());
    try {
      const ack = await session.remember("transient xylophone memorandum");
      await session.forget(ack.unit_id);
      const hits = await session.recall("xylophone memorandum");
      expect(hits.map((h) => h.doc_id)).not.toContain(ack.episode_id);
    } finally {
      session.close();
    }
  });

  it("performs exactly one attestation verification per session", async () => {
    const session = await connect(address(), goodPins());
    try {
      for (let i = 0; i < 5; i++) {
        await session.remember(`ticket reuse check ${i}`);
      }
      await session.recall("ticket reuse");
      expect(session.attestationVerifications).toBe(1);
    } finally {
      session.close();
    }
  });

  it("refuses double connect on one session", async () => {
    const session = await connect(address(), goodPins());
    try {
      await expect(session.connect()).rejects.toThrow(/already connected/);
    } finally {
      session.close();
    }
  });

  it("rejects a report signed by the wrong platform key", async () => {
    const wrongKey = "11".repeat(32);
    const pins = new PinnedTrust([server.measurement], wrongKey);
    const session = new ClientSession(address(), pins);
    await expect(session.connect()).rejects.toThrow(AttestationError);
  });
});

describe("abort-before-data", () => {
  it("sends no payload frames to an unpinned server", async () => {
    // dedicated server so its frame log only sees this test
    const rogue = await startHarness();
    try {
      const pins = new PinnedTrust(["cd".repeat(32)], rogue.platformPubkey);
      const session = new ClientSession(
        { host: "127.0.0.1", port: rogue.port },
        pins,
      );
      await expect(session.connect()).rejects.toThrow(/not pinned/);
      await expect(
        (session as unknown as { connected: boolean }).connected,
      ).toBe(false);
      const frames = await rogue.frameLog();
      expect(frames.length).toBe(1);
      expect(frames[0].op).toBe("handshake");
    } finally {
      rogue.stop();
    }
  }, 30_000);
});

describe("example agent", () => {
  const FIG1_SCENARIO = [
    'chat-agent\tremember\t{"text": "Project: Snake Game"}',
    'chat-agent\tremember\t{"text": "Language: Python"}',
    'coding-agent\trecall\t{"query_text": "current project?", "top_n": 5}',
    'coding-agent\trecall\t{"query_text": "which language", "top_n": 5}',
  ].join("\n");

  it("two-agent scenario recalls the stored project facts", async () => {
    const steps = parseScenario(FIG1_SCENARIO);
    const transcript = await runScenario(steps, address(), goodPins());
    expect(transcript.length).toBe(4);
    const projectHits = transcript[2].response as Array<{ text: string }>;
    expect(projectHits.some((h) => h.text === "Project: Snake Game")).toBe(
      true,
    );
    const langHits = transcript[3].response as Array<{ text: string }>;
    expect(langHits.some((h) => h.text === "Language: Python")).toBe(true);
  }, 30_000);

  it("empty scenario yields an empty transcript", async () => {
    const transcript = await runScenario([], address(), goodPins());
    expect(transcript).toEqual([]);
  });

  it("rejects malformed scenario lines", () => {
    expect(() => parseScenario("only-two\tfields")).toThrow(/line 1/);
  });

  it("interleaved agents share the store", async () => {
    const scenario = [
      'a\tremember\t{"text": "shared walrus detail one"}',
      'b\tremember\t{"text": "shared walrus detail two"}',
      'a\trecall\t{"query_text": "walrus detail"}',
      'b\trecall\t{"query_text": "walrus detail"}',
    ].join("\n");
    const transcript = await runScenario(
      parseScenario(scenario),
      address(),
      goodPins(),
    );
    for (const step of transcript.slice(2)) {
      const texts = (step.response as Array<{ text: string }>).map(
        (h) => h.text,
      );
      expect(texts.some((t) => t.includes("walrus detail one"))).toBe(true);
      expect(texts.some((t) => t.includes("walrus detail two"))).toBe(true);
    }
  }, 30_000);
});
