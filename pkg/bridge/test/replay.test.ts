import * as fs from "fs";
import * as os from "os";
import * as path from "path";

import { afterAll, describe, expect, it } from "vitest";

import { BackendError } from "../src/backend";
import { handleLine, newSession } from "../src/protocol";
import { loadRecording, ReplayBackend } from "../src/replay";

const tmpDir = fs.mkdtempSync(path.join(os.tmpdir(), "bridge-test-"));
afterAll(() => fs.rmSync(tmpDir, { recursive: true, force: true }));

const HEADER = {
  type: "header",
  version: 1,
  tokens: ["f", "(", "a", ";", ")"],
  eos: "[EOS]",
  mask: "[MASK]",
};

function writeRecording(name: string, steps: object[]): string {
  const file = path.join(tmpDir, name);
  const lines = [JSON.stringify(HEADER), ...steps.map((s) => JSON.stringify(s))];
  fs.writeFileSync(file, lines.join("\n") + "\n");
  return file;
}

describe("recording loader", () => {
  it("parses header and steps", () => {
    const file = writeRecording("ok.jsonl", [
      { type: "step", step: 0, positions: { "0": [0.5, 0.25, 0, 0, 0, 0.25] } },
    ]);
    const rec = loadRecording(file);
    expect(rec.tokens).toEqual(HEADER.tokens);
    expect(rec.steps).toHaveLength(1);
    expect(rec.steps[0].positions.get(0)).toEqual([0.5, 0.25, 0, 0, 0, 0.25]);
  });

  it("rejects a missing header", () => {
    const file = path.join(tmpDir, "bad.jsonl");
    fs.writeFileSync(file, JSON.stringify({ type: "step", step: 0, positions: {} }) + "\n");
    expect(() => loadRecording(file)).toThrow(BackendError);
  });
});

describe("replay backend", () => {
  it("serves recorded probabilities exactly, EOS last", () => {
    const probs = [0.5, 0.25, 0, 0, 0, 0.25]; // 5 tokens + EOS
    const file = writeRecording("exact.jsonl", [
      { type: "step", step: 0, positions: { "1": probs } },
    ]);
    const backend = new ReplayBackend(loadRecording(file));
    const entry = backend.distributions({
      type: "forward",
      id: 0,
      prompt: [],
      slots: ["f", "MASK"],
      masked: [1],
      temperature: 0.2,
      seed: 0,
    })["1"];
    expect(entry.rest_mass).toBe(0);
    expect(entry.top).toEqual([
      ["f", 0.5],
      ["(", 0.25],
      ["EOS", 0.25],
    ]);
  });

  it("raises on a positions mismatch", () => {
    const file = writeRecording("drift.jsonl", [
      { type: "step", step: 0, positions: { "0": [1, 0, 0, 0, 0, 0] } },
    ]);
    const backend = new ReplayBackend(loadRecording(file));
    expect(() =>
      backend.distributions({
        type: "forward",
        id: 0,
        prompt: [],
        slots: ["MASK", "MASK"],
        masked: [0, 1],
        temperature: 0.2,
        seed: 0,
      })
    ).toThrow(/recorded positions/);
  });

  it("replays steps in order through a full session", () => {
    const file = writeRecording("session.jsonl", [
      { type: "step", step: 0, positions: { "0": [1, 0, 0, 0, 0, 0], "1": [0, 1, 0, 0, 0, 0] } },
      { type: "step", step: 1, positions: { "1": [0, 0.75, 0, 0, 0, 0.25] } },
    ]);
    const session = newSession(new ReplayBackend(loadRecording(file)));
    handleLine(session, JSON.stringify({ type: "hello", versions: [1] }));

    const first = JSON.parse(
      handleLine(
        session,
        JSON.stringify({
          type: "forward", id: 0, prompt: [], slots: ["MASK", "MASK"],
          masked: [0, 1], temperature: 0.2, seed: 0,
        })
      )[0]
    );
    expect(first.positions["0"].top).toEqual([["f", 1]]);
    expect(first.positions["1"].top).toEqual([["(", 1]]);

    const second = JSON.parse(
      handleLine(
        session,
        JSON.stringify({
          type: "forward", id: 1, prompt: [], slots: ["f", "MASK"],
          masked: [1], temperature: 0.2, seed: 0,
        })
      )[0]
    );
    expect(second.positions["1"].top).toEqual([
      ["(", 0.75],
      ["EOS", 0.25],
    ]);

    const exhausted = JSON.parse(
      handleLine(
        session,
        JSON.stringify({
          type: "forward", id: 2, prompt: [], slots: ["f", "MASK"],
          masked: [1], temperature: 0.2, seed: 0,
        })
      )[0]
    );
    expect(exhausted.type).toBe("error");
    expect(exhausted.message).toMatch(/exhausted/);
  });
});
