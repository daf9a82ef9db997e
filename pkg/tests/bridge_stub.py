#!/usr/bin/env python3
"""Minimal wire-protocol-v1 bridge for exercising the engine-side client.

Modes (argv[1]):
    uniform        serve uniform distributions via rest_mass only
    replay:PATH    serve a recording file, one step per forward request
    bad-version    answer the handshake with an unsupported version
    silent         never answer anything (timeout testing)
    malformed      answer the first forward with a non-JSON line
    error          answer every forward with an error message
"""

import json
import sys


def send(obj):
    sys.stdout.write(json.dumps(obj) + "\n")
    sys.stdout.flush()


def main():
    mode = sys.argv[1] if len(sys.argv) > 1 else "uniform"

    records = None
    vocab = None
    cursor = 0
    if mode.startswith("replay:"):
        from gcdk.denoise import load_recording

        vocab, records = load_recording(mode.split(":", 1)[1])
        mode = "replay"

    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        if mode == "silent":
            continue
        try:
            msg = json.loads(line)
        except json.JSONDecodeError as exc:
            send({"type": "error", "message": f"malformed message: {exc}"})
            continue

        kind = msg.get("type")
        if kind == "hello":
            versions = msg.get("versions", [])
            if mode == "bad-version":
                send({"type": "ready", "version": 99})
            elif 1 in versions:
                send({"type": "ready", "version": 1})
            else:
                send({"type": "error", "message": f"no common version in {versions}"})
            continue
        if kind == "bye":
            return
        if kind != "forward":
            send({"type": "error", "message": f"unknown message type {kind!r}"})
            continue

        masked = msg.get("masked", [])
        if not masked:
            send({"type": "error", "message": "no masked positions", "id": msg.get("id")})
            continue
        if mode == "malformed":
            sys.stdout.write("this is not json\n")
            sys.stdout.flush()
            continue
        if mode == "error":
            send({"type": "error", "message": "backend exploded", "id": msg.get("id")})
            continue
        if mode == "replay":
            record = records[cursor]
            cursor += 1
            positions = {}
            for pos in sorted(record.positions):
                arr = record.positions[pos]
                top = []
                for idx, p in enumerate(arr):
                    if p != 0.0:
                        token = "EOS" if idx == vocab.eos_id else vocab.tokens[idx]
                        top.append([token, float(p)])
                positions[str(pos)] = {"top": top, "rest_mass": 0.0}
            send({"type": "dist", "id": msg["id"], "positions": positions})
            continue

        # uniform mode: all mass in rest_mass
        positions = {str(pos): {"top": [], "rest_mass": 1.0} for pos in masked}
        send({"type": "dist", "id": msg["id"], "positions": positions})


if __name__ == "__main__":
    main()
