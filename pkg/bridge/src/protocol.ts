/**
 * Wire protocol v1: line-delimited JSON over stdio.
 *
 * The engine opens with {"type":"hello","versions":[...]}; the bridge picks
 * the highest version both sides support and answers {"type":"ready",...}.
 * After that, requests and responses strictly alternate until
 * {"type":"bye"}.  Session handling is pure string-in/strings-out so it can
 * be tested without spawning a process.
 */

import { Backend, BackendError } from "./backend";

export const SUPPORTED_VERSIONS = [1];

export const MASK_SLOT = "MASK";
export const EOS_SLOT = "EOS";

export interface ForwardRequest {
  type: "forward";
  id: number;
  prompt: string[];
  slots: string[];
  masked: number[];
  temperature: number;
  seed: number;
}

export interface DistEntry {
  top: [string, number][];
  rest_mass: number;
}

export interface DistResponse {
  type: "dist";
  id: number;
  positions: Record<string, DistEntry>;
}

export interface Session {
  phase: "handshake" | "ready" | "closed";
  version: number | null;
  backend: Backend;
}

export function newSession(backend: Backend): Session {
  return { phase: "handshake", version: null, backend };
}

function errorMessage(message: string, id?: number): string {
  const obj: Record<string, unknown> = { type: "error", message };
  if (id !== undefined) obj.id = id;
  return JSON.stringify(obj);
}

function validateForward(msg: Record<string, unknown>): ForwardRequest | string {
  if (typeof msg.id !== "number") return "forward request is missing a numeric id";
  const id = msg.id;
  if (!Array.isArray(msg.slots) || !msg.slots.every((s) => typeof s === "string")) {
    return "forward request needs string slots";
  }
  if (!Array.isArray(msg.masked) || !msg.masked.every((m) => Number.isInteger(m))) {
    return "forward request needs integer masked positions";
  }
  const slots = msg.slots as string[];
  const masked = msg.masked as number[];
  if (masked.length === 0) return "no masked positions";
  for (const pos of masked) {
    if (pos < 0 || pos >= slots.length) return `masked position ${pos} out of range`;
    if (slots[pos] !== MASK_SLOT) return `masked position ${pos} is not a ${MASK_SLOT} slot`;
  }
  return {
    type: "forward",
    id,
    prompt: Array.isArray(msg.prompt) ? (msg.prompt as string[]) : [],
    slots,
    masked,
    temperature: typeof msg.temperature === "number" ? msg.temperature : 1.0,
    seed: typeof msg.seed === "number" ? msg.seed : 0,
  };
}

/**
 * Consume one input line, mutate the session, and return the response lines
 * to write.  Malformed input produces an error response and the session
 * keeps serving; only "bye" (or EOF upstream) closes it.
 */
export function handleLine(session: Session, line: string): string[] {
  if (session.phase === "closed") return [];
  const trimmed = line.trim();
  if (trimmed === "") return [];

  let msg: Record<string, unknown>;
  try {
    msg = JSON.parse(trimmed);
  } catch (exc) {
    return [errorMessage(`malformed message: ${(exc as Error).message}`)];
  }
  if (typeof msg !== "object" || msg === null || typeof msg.type !== "string") {
    return [errorMessage("message has no type")];
  }

  if (msg.type === "bye") {
    session.phase = "closed";
    return [];
  }

  if (session.phase === "handshake") {
    if (msg.type !== "hello") {
      return [errorMessage(`expected hello, got ${msg.type}`)];
    }
    const offered = Array.isArray(msg.versions) ? (msg.versions as number[]) : [];
    const common = offered.filter((v) => SUPPORTED_VERSIONS.includes(v));
    if (common.length === 0) {
      return [errorMessage(`version mismatch: engine offers ${JSON.stringify(offered)}, bridge supports ${JSON.stringify(SUPPORTED_VERSIONS)}`)];
    }
    session.version = Math.max(...common);
    session.phase = "ready";
    return [JSON.stringify({ type: "ready", version: session.version })];
  }

  if (msg.type === "hello") {
    return [errorMessage("handshake already completed")];
  }
  if (msg.type !== "forward") {
    return [errorMessage(`unknown message type ${JSON.stringify(msg.type)}`)];
  }

  const parsed = validateForward(msg);
  if (typeof parsed === "string") {
    const id = typeof msg.id === "number" ? msg.id : undefined;
    return [errorMessage(parsed, id)];
  }

  let positions: Record<string, DistEntry>;
  try {
    positions = session.backend.distributions(parsed);
  } catch (exc) {
    const message = exc instanceof BackendError ? exc.message : `backend failure: ${(exc as Error).message}`;
    return [errorMessage(message, parsed.id)];
  }
  const response: DistResponse = { type: "dist", id: parsed.id, positions };
  return [JSON.stringify(response)];
}
