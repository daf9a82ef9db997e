/**
 * Stdio entry point: wire stdin lines through the protocol session and
 * write responses to stdout.
 *
 * Usage:
 *   node dist/main.js --replay <recording.jsonl>
 *   node dist/main.js --uniform
 */

import * as readline from "readline";

import { UniformBackend } from "./backend";
import { handleLine, newSession } from "./protocol";
import { loadRecording, ReplayBackend } from "./replay";

function buildBackend(argv: string[]) {
  const replayIdx = argv.indexOf("--replay");
  if (replayIdx >= 0) {
    const path = argv[replayIdx + 1];
    if (!path) {
      process.stderr.write("--replay needs a recording path\n");
      process.exit(2);
    }
    return new ReplayBackend(loadRecording(path));
  }
  return new UniformBackend();
}

function main(): void {
  const session = newSession(buildBackend(process.argv.slice(2)));
  const rl = readline.createInterface({ input: process.stdin, terminal: false });
  rl.on("line", (line) => {
    for (const response of handleLine(session, line)) {
      process.stdout.write(response + "\n");
    }
    if (session.phase === "closed") {
      rl.close();
      process.exit(0);
    }
  });
  rl.on("close", () => process.exit(0));
}

main();
