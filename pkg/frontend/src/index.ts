export {
  Address,
  AttestationError,
  ClientSession,
  DeniedError,
  ForgetResult,
  RecallHit,
  RequestError,
  connect,
} from "./client.js";
export {
  AttestationReport,
  DeletionProof,
  PinnedTrust,
  verifyDeletionProof,
  verifyReport,
} from "./trust.js";
export {
  ScenarioStep,
  TranscriptEntry,
  exampleAgent,
  parseScenario,
  runScenario,
} from "./agent.js";
export { encodeFrame, FrameReader, MAX_FRAME } from "./wire.js";
