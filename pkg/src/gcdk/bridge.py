"""Engine-side client for external denoisers over child-process stdio.

Wire protocol v1, one JSON object per line, strictly alternating
request/response after the handshake:

    -> {"type": "hello", "versions": [1]}
    <- {"type": "ready", "version": 1}
    -> {"type": "forward", "id": 0, "prompt": [...], "slots": [...],
        "masked": [...], "temperature": 0.2, "seed": 7}
    <- {"type": "dist", "id": 0,
        "positions": {"3": {"top": [["tok", 0.5], ...], "rest_mass": 0.5}}}
    -> {"type": "bye"}

Slots cross the boundary as token strings with the literal sentinels "MASK"
and "EOS"; the engine owns the string-to-id mapping and densifies the sparse
response (unlisted tokens share rest_mass uniformly).
"""

from __future__ import annotations

import json
import os
import select
import shlex
import subprocess
from typing import Optional

from .denoise import Denoiser, Distribution, NoMaskedPositionsError
from .grammar import MASK, Vocabulary

PROTOCOL_VERSIONS = (1,)
WIRE_MASK = "MASK"
WIRE_EOS = "EOS"


class BridgeError(RuntimeError):
    """The bridge replied with an error or a malformed message."""


class BridgeTransportError(BridgeError):
    """The channel failed: timeout, closed pipe, or handshake mismatch."""


class _LineChannel:
    """Line-delimited bytes over a subprocess's stdin/stdout with timeouts."""

    def __init__(self, proc: subprocess.Popen):
        self.proc = proc
        self._buf = b""

    def send(self, obj: dict) -> None:
        data = (json.dumps(obj, ensure_ascii=False) + "\n").encode("utf-8")
        try:
            self.proc.stdin.write(data)
            self.proc.stdin.flush()
        except (BrokenPipeError, ValueError) as exc:
            raise BridgeTransportError(f"bridge stdin closed: {exc}") from exc

    def recv(self, timeout: Optional[float]) -> dict:
        fd = self.proc.stdout.fileno()
        while True:
            nl = self._buf.find(b"\n")
            if nl >= 0:
                line, self._buf = self._buf[:nl], self._buf[nl + 1 :]
                if not line.strip():
                    continue
                try:
                    return json.loads(line.decode("utf-8"))
                except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                    raise BridgeError(f"malformed bridge message: {exc}") from exc
            if timeout is not None:
                ready, _, _ = select.select([fd], [], [], timeout)
                if not ready:
                    raise BridgeTransportError(f"bridge reply timed out after {timeout}s")
            chunk = os.read(fd, 65536)
            if not chunk:
                raise BridgeTransportError("bridge closed its stdout")
            self._buf += chunk


class BridgeDenoiser(Denoiser):
    """DenoiserContract implementation backed by an external process."""

    def __init__(self, command, vocab: Vocabulary, handshake_timeout: float = 5.0,
                 reply_timeout: Optional[float] = 60.0):
        for sentinel in (WIRE_MASK, WIRE_EOS):
            if sentinel in vocab:
                raise ValueError(f"vocabulary token {sentinel!r} collides with a wire sentinel")
        self.vocab = vocab
        self.reply_timeout = reply_timeout
        args = shlex.split(command) if isinstance(command, str) else list(command)
        try:
            self.proc = subprocess.Popen(
                args, stdin=subprocess.PIPE, stdout=subprocess.PIPE, bufsize=0
            )
        except OSError as exc:
            raise BridgeTransportError(f"cannot start bridge {args!r}: {exc}") from exc
        self.channel = _LineChannel(self.proc)
        self._next_id = 0
        self._handshake(handshake_timeout)

    def _handshake(self, timeout: float) -> None:
        self.channel.send({"type": "hello", "versions": list(PROTOCOL_VERSIONS)})
        reply = self.channel.recv(timeout)
        if reply.get("type") != "ready":
            raise BridgeTransportError(f"handshake failed: {reply!r}")
        version = reply.get("version")
        if version not in PROTOCOL_VERSIONS:
            raise BridgeTransportError(f"bridge chose unsupported version {version!r}")
        self.version = version

    def _slot_str(self, slot: int) -> str:
        if slot == MASK:
            return WIRE_MASK
        if slot == self.vocab.eos_id:
            return WIRE_EOS
        return self.vocab.tokens[slot]

    def _token_id(self, token: str) -> int:
        if token == WIRE_EOS:
            return self.vocab.eos_id
        return self.vocab.id_of(token)

    def forward(self, state, temperature, seed):
        requested = state.masked_in_block()
        if not requested:
            raise NoMaskedPositionsError("no masked positions in the current block")
        req_id = self._next_id
        self._next_id += 1
        self.channel.send(
            {
                "type": "forward",
                "id": req_id,
                "prompt": list(state.prompt),
                "slots": [self._slot_str(s) for s in state.output],
                "masked": list(requested),
                "temperature": temperature,
                "seed": seed,
            }
        )
        reply = self.channel.recv(self.reply_timeout)
        if reply.get("type") == "error":
            raise BridgeError(f"bridge error: {reply.get('message')!r}")
        if reply.get("type") != "dist":
            raise BridgeError(f"unexpected bridge reply type {reply.get('type')!r}")
        if reply.get("id") != req_id:
            raise BridgeError(f"bridge echoed id {reply.get('id')!r}, expected {req_id}")
        positions = reply.get("positions")
        if not isinstance(positions, dict):
            raise BridgeError("bridge reply has no positions object")
        out = {}
        n = self.vocab.size + 1
        for key, entry in positions.items():
            pos = int(key)
            pairs = [(self._token_id(tok), float(p)) for tok, p in entry["top"]]
            out[pos] = Distribution.from_sparse(pairs, float(entry.get("rest_mass", 0.0)), n)
        if set(out) != set(requested):
            raise BridgeError(
                f"bridge answered positions {sorted(out)}, requested {sorted(requested)}"
            )
        return out

    def close(self) -> None:
        if self.proc.poll() is None:
            try:
                self.channel.send({"type": "bye"})
            except BridgeTransportError:
                pass
            try:
                self.proc.wait(timeout=5.0)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()
        for stream in (self.proc.stdin, self.proc.stdout):
            if stream is not None:
                try:
                    stream.close()
                except OSError:
                    pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False
