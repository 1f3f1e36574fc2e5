// Scripted multi-agent scenario runner.
//
// Scenario files are line-oriented: `actor<TAB>op<TAB>payload-json`.
// Each distinct actor gets its own session (one handshake each); ops map
// straight onto the SDK calls, and every step's response lands in the
// transcript.

import * as fs from "node:fs";

import { Address, ClientSession, connect } from "./client.js";
import { PinnedTrust } from "./trust.js";

export interface TranscriptEntry {
  actor: string;
  op: string;
  payload: Record<string, unknown>;
  response: unknown;
}

export interface ScenarioStep {
  actor: string;
  op: string;
  payload: Record<string, unknown>;
}

export function parseScenario(text: string): ScenarioStep[] {
  const steps: ScenarioStep[] = [];
  for (const [lineno, raw] of text.split("\n").entries()) {
    const line = raw.trim();
    if (!line || line.startsWith("#")) continue;
    const parts = raw.split("\t");
    if (parts.length !== 3) {
      throw new Error(
        `scenario line ${lineno + 1}: expected actor<TAB>op<TAB>payload-json`,
      );
    }
    steps.push({
      actor: parts[0].trim(),
      op: parts[1].trim(),
      payload: JSON.parse(parts[2]) as Record<string, unknown>,
    });
  }
  return steps;
}

export async function runScenario(
  steps: ScenarioStep[],
  address: Address,
  pins: PinnedTrust,
): Promise<TranscriptEntry[]> {
  const sessions = new Map<string, ClientSession>();
  const transcript: TranscriptEntry[] = [];
  try {
    for (const step of steps) {
      let session = sessions.get(step.actor);
      if (!session) {
        session = await connect(address, pins, step.actor);
        sessions.set(step.actor, session);
      }
      let response: unknown;
      switch (step.op) {
        case "remember":
          response = await session.remember(
            step.payload.text as string,
            (step.payload.labels as string[] | undefined) ?? ["default"],
          );
          break;
        case "recall":
          response = await session.recall(
            step.payload.query_text as string,
            (step.payload.top_n as number | undefined) ?? 10,
          );
          break;
        case "forget":
          response = await session.forget(step.payload.unit_id as string);
          break;
        default:
          throw new Error(`scenario op ${step.op} is not supported`);
      }
      transcript.push({
        actor: step.actor,
        op: step.op,
        payload: step.payload,
        response,
      });
    }
  } finally {
    for (const session of sessions.values()) {
      session.close();
    }
  }
  return transcript;
}

export async function exampleAgent(
  scenarioPath: string,
  address: Address,
  pins: PinnedTrust,
): Promise<TranscriptEntry[]> {
  const steps = parseScenario(fs.readFileSync(scenarioPath, "utf-8"));
  return runScenario(steps, address, pins);
}
