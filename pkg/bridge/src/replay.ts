/**
 * Scripted replay backend: serve a recording file, one step per forward.
 *
 * The recording is JSON lines: a header row with the token list and the
 * EOS/MASK markers, then one row per denoising step holding dense
 * probability arrays (alphabet plus EOS, EOS last) per masked position.
 * Replay answers with every nonzero entry listed exactly and rest_mass 0,
 * so the engine reconstructs the recorded arrays bit for bit.
 */

import * as fs from "fs";

import { Backend, BackendError } from "./backend";
import { EOS_SLOT, type DistEntry, type ForwardRequest } from "./protocol";

interface StepRecord {
  step: number;
  positions: Map<number, number[]>;
}

export interface Recording {
  tokens: string[];
  eosMarker: string;
  maskMarker: string;
  steps: StepRecord[];
}

export function loadRecording(path: string): Recording {
  const lines = fs
    .readFileSync(path, "utf-8")
    .split("\n")
    .filter((line) => line.trim() !== "");
  if (lines.length === 0) {
    throw new BackendError(`${path}: empty recording`);
  }
  const header = JSON.parse(lines[0]);
  if (header.type !== "header" || header.version !== 1) {
    throw new BackendError(`${path}: bad recording header`);
  }
  const steps: StepRecord[] = [];
  for (const line of lines.slice(1)) {
    const obj = JSON.parse(line);
    if (obj.type !== "step") {
      throw new BackendError(`${path}: unexpected record type ${obj.type}`);
    }
    const positions = new Map<number, number[]>();
    for (const [key, probs] of Object.entries(obj.positions)) {
      positions.set(Number(key), probs as number[]);
    }
    steps.push({ step: obj.step, positions });
  }
  return { tokens: header.tokens, eosMarker: header.eos, maskMarker: header.mask, steps };
}

export class ReplayBackend implements Backend {
  private cursor = 0;

  constructor(private recording: Recording) {}

  reset(): void {
    this.cursor = 0;
  }

  distributions(request: ForwardRequest): Record<string, DistEntry> {
    if (this.cursor >= this.recording.steps.length) {
      throw new BackendError(`recording exhausted after ${this.recording.steps.length} steps`);
    }
    const record = this.recording.steps[this.cursor];
    const recorded = [...record.positions.keys()].sort((a, b) => a - b);
    const requested = [...request.masked].sort((a, b) => a - b);
    if (JSON.stringify(recorded) !== JSON.stringify(requested)) {
      throw new BackendError(
        `step ${record.step}: recorded positions ${JSON.stringify(recorded)} != requested ${JSON.stringify(requested)}`
      );
    }
    this.cursor += 1;

    const tokens = this.recording.tokens;
    const positions: Record<string, DistEntry> = {};
    for (const pos of recorded) {
      const probs = record.positions.get(pos)!;
      const top: [string, number][] = [];
      for (let idx = 0; idx < probs.length; idx++) {
        if (probs[idx] !== 0) {
          const token = idx === tokens.length ? EOS_SLOT : tokens[idx];
          top.push([token, probs[idx]]);
        }
      }
      positions[String(pos)] = { top, rest_mass: 0.0 };
    }
    return positions;
  }
}
