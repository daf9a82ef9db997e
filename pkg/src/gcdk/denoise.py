"""Denoiser contract and deterministic synthetic implementations.

A denoiser plays the role of the mask-predicting model: given a partially
filled canvas it returns one categorical distribution over "alphabet plus
EOS" for every masked position of the current block.  The built-in
implementations are deterministic functions of (state, temperature, seed) so
decodes replay exactly; `ScriptedDenoiser` replays a recording file instead
and keeps an internal cursor (one record per forward call, in order).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .earley import init_chart, run_chart
from .grammar import MASK, Grammar, Vocabulary

PROB_TOL = 1e-9


class NoMaskedPositionsError(ValueError):
    """forward() was called on a state with no masked slot in the block."""


class ReplayMismatchError(ValueError):
    """A replayed request does not line up with the recording."""


@dataclass(frozen=True)
class SequenceState:
    """The decoding canvas: prompt plus a fixed-length output window.

    Output slots hold vocabulary token ids, `MASK` (-1), or the EOS id
    (len(vocab)).  Blocks partition the output left to right; only masked
    slots inside `current_block` are eligible for denoising requests.
    """

    prompt: tuple[str, ...]
    output: tuple[int, ...]
    block_size: int
    current_block: int = 0

    def __post_init__(self):
        if not 0 < self.block_size <= len(self.output):
            raise ValueError(f"block_size {self.block_size} out of range for L={len(self.output)}")

    @property
    def length(self) -> int:
        return len(self.output)

    def block_window(self) -> tuple[int, int]:
        start = self.current_block * self.block_size
        return start, min(start + self.block_size, len(self.output))

    def masked_in_block(self) -> tuple[int, ...]:
        start, end = self.block_window()
        return tuple(i for i in range(start, end) if self.output[i] == MASK)


class Distribution:
    """Probabilities over the alphabet plus EOS (dense, index eos_id last)."""

    __slots__ = ("probs",)

    def __init__(self, probs: np.ndarray):
        probs = np.asarray(probs, dtype=np.float64)
        if probs.ndim != 1:
            raise ValueError("distribution must be one-dimensional")
        if (probs < 0).any():
            raise ValueError("negative probability")
        if abs(float(probs.sum()) - 1.0) > PROB_TOL:
            raise ValueError(f"probabilities sum to {probs.sum()!r}, not 1")
        probs.flags.writeable = False
        self.probs = probs

    @classmethod
    def uniform(cls, n: int) -> "Distribution":
        return cls(np.full(n, 1.0 / n))

    @classmethod
    def point_mass(cls, n: int, index: int) -> "Distribution":
        p = np.zeros(n)
        p[index] = 1.0
        return cls(p)

    @classmethod
    def from_sparse(cls, pairs, rest_mass: float, n: int) -> "Distribution":
        """Densify top-k (index, prob) pairs; unlisted entries split rest_mass.

        The result is renormalized so it sums to exactly 1 even when the wire
        encoding only promised 1e-6 accuracy.
        """
        p = np.zeros(n)
        listed = set()
        for idx, prob in pairs:
            if not 0 <= idx < n:
                raise ValueError(f"sparse index {idx} out of range")
            if idx in listed:
                raise ValueError(f"sparse index {idx} listed twice")
            listed.add(idx)
            p[idx] = prob
        if rest_mass < 0:
            raise ValueError("negative rest_mass")
        unlisted = n - len(listed)
        if rest_mass > 0:
            if unlisted == 0:
                raise ValueError("rest_mass > 0 but every index is listed")
            share = rest_mass / unlisted
            for idx in range(n):
                if idx not in listed:
                    p[idx] = share
        total = float(p.sum())
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"sparse distribution sums to {total!r}")
        return cls(p / total)

    @property
    def size(self) -> int:
        return len(self.probs)

    def max_prob(self) -> float:
        return float(self.probs.max())

    def support(self) -> np.ndarray:
        return np.flatnonzero(self.probs)

    def __eq__(self, other):
        return isinstance(other, Distribution) and np.array_equal(self.probs, other.probs)

    def __repr__(self):
        return f"Distribution({self.probs!r})"


# A DistributionSet maps masked output position -> Distribution.
DistributionSet = dict


def _apply_temperature(p: np.ndarray, temperature: float) -> np.ndarray:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if temperature == 1.0:
        return p
    q = np.power(p, 1.0 / temperature)
    return q / q.sum()


class Denoiser:
    """Behavioral contract: forward(state, temperature, seed) -> DistributionSet.

    Implementations must return one Distribution per masked position of the
    current block and be deterministic for equal arguments.
    """

    def forward(self, state: SequenceState, temperature: float, seed: int) -> DistributionSet:
        raise NotImplementedError

    def _requested(self, state: SequenceState) -> tuple[int, ...]:
        positions = state.masked_in_block()
        if not positions:
            raise NoMaskedPositionsError("no masked positions in the current block")
        return positions


class UniformDenoiser(Denoiser):
    """Uniform over the alphabet plus EOS at every masked position."""

    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab

    def forward(self, state, temperature, seed):
        n = self.vocab.size + 1
        return {i: Distribution.uniform(n) for i in self._requested(state)}


class NoisyOracleDenoiser(Denoiser):
    """Grammar-aware synthetic model with a tunable error rate.

    Per masked position the distribution mixes (1 - epsilon) of uniform mass
    over the tokens admissible after the contiguous fixed prefix left of the
    position (EOS joins that set when the prefix is a complete sentence) with
    epsilon of uniform noise over the alphabet plus EOS.  Fixed tokens to the
    right of the first mask are deliberately ignored, so the model is cheap
    and imperfect and the verifier has real work to do.  Temperature is
    applied to the mixture as a probability power.
    """

    def __init__(self, grammar: Grammar, epsilon: float):
        if not 0.0 <= epsilon <= 1.0:
            raise ValueError("epsilon must be in [0, 1]")
        if not grammar.reduced:
            raise ValueError("NoisyOracleDenoiser requires a reduced grammar")
        self.grammar = grammar
        self.epsilon = epsilon

    def forward(self, state, temperature, seed):
        positions = self._requested(state)
        vocab = self.grammar.vocab
        n = vocab.size + 1
        eos = vocab.eos_id
        noise = np.full(n, 1.0 / n)

        slots = state.output
        first_mask = next((i for i, s in enumerate(slots) if s == MASK), len(slots))
        # Charts for every distinct fixed-prefix length, shared across positions.
        charts = [init_chart(self.grammar)]
        dead_at = None
        for i in range(first_mask):
            nxt = charts[-1].advance(slots[i])
            charts.append(nxt)
            if nxt.dead:
                dead_at = i + 1
                break

        out = {}
        for pos in positions:
            plen = min(pos, first_mask)
            if dead_at is not None and plen >= dead_at:
                consistent = noise
            else:
                chart = charts[plen]
                admissible = set(chart.admissible_tokens())
                if chart.accepting:
                    admissible.add(eos)
                if admissible:
                    consistent = np.zeros(n)
                    consistent[sorted(admissible)] = 1.0 / len(admissible)
                else:
                    consistent = noise
            p = (1.0 - self.epsilon) * consistent + self.epsilon * noise
            out[pos] = Distribution(_apply_temperature(p, temperature))
        return out


def make_noisy_oracle(grammar: Grammar, epsilon: float) -> NoisyOracleDenoiser:
    return NoisyOracleDenoiser(grammar, epsilon)


@dataclass(frozen=True)
class StepRecord:
    """One denoising step of a recording: request positions and their probs."""

    step: int
    positions: dict  # position -> np.ndarray over alphabet plus EOS

    def distributions(self) -> DistributionSet:
        return {pos: Distribution(arr) for pos, arr in self.positions.items()}


class ScriptedDenoiser(Denoiser):
    """Replays a recording, one StepRecord per forward call, in order.

    The requested positions must match the record exactly; a drifted decode
    raises `ReplayMismatchError` instead of silently serving wrong rows.
    """

    def __init__(self, records: list[StepRecord]):
        self.records = list(records)
        self._cursor = 0

    def reset(self):
        self._cursor = 0

    def forward(self, state, temperature, seed):
        requested = self._requested(state)
        if self._cursor >= len(self.records):
            raise ReplayMismatchError(f"recording exhausted after {len(self.records)} steps")
        record = self.records[self._cursor]
        if tuple(sorted(record.positions)) != requested:
            raise ReplayMismatchError(
                f"step {record.step}: recorded positions {sorted(record.positions)} "
                f"!= requested {list(requested)}"
            )
        self._cursor += 1
        return record.distributions()


class RecordingDenoiser(Denoiser):
    """Wraps a denoiser and captures every forward call as a StepRecord."""

    def __init__(self, inner: Denoiser):
        self.inner = inner
        self.records: list[StepRecord] = []

    def forward(self, state, temperature, seed):
        dists = self.inner.forward(state, temperature, seed)
        self.records.append(
            StepRecord(step=len(self.records), positions={p: d.probs for p, d in dists.items()})
        )
        return dists


def save_recording(path, vocab: Vocabulary, records: list[StepRecord]) -> None:
    """Write a recording as JSON lines; floats round-trip bit-exactly."""
    lines = [
        json.dumps(
            {
                "type": "header",
                "version": 1,
                "tokens": list(vocab.tokens),
                "eos": vocab.eos_marker,
                "mask": vocab.mask_marker,
            },
            ensure_ascii=False,
        )
    ]
    for rec in records:
        lines.append(
            json.dumps(
                {
                    "type": "step",
                    "step": rec.step,
                    "positions": {
                        str(pos): [float(x) for x in rec.positions[pos]]
                        for pos in sorted(rec.positions)
                    },
                },
                ensure_ascii=False,
            )
        )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_recording(path) -> tuple[Vocabulary, list[StepRecord]]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line for line in fh.read().splitlines() if line]
    if not lines:
        raise ValueError(f"{path}: empty recording")
    header = json.loads(lines[0])
    if header.get("type") != "header" or header.get("version") != 1:
        raise ValueError(f"{path}: bad recording header")
    vocab = Vocabulary(tuple(header["tokens"]), eos_marker=header["eos"], mask_marker=header["mask"])
    records = []
    for line in lines[1:]:
        obj = json.loads(line)
        if obj.get("type") != "step":
            raise ValueError(f"{path}: unexpected record type {obj.get('type')!r}")
        positions = {int(k): np.array(v, dtype=np.float64) for k, v in obj["positions"].items()}
        records.append(StepRecord(step=obj["step"], positions=positions))
    return vocab, records


def sample_token(dist: Distribution, exclusions, rng: np.random.Generator) -> Optional[int]:
    """Sample from `dist` renormalized off `exclusions`; None when exhausted."""
    p = np.array(dist.probs)
    for idx in exclusions:
        p[idx] = 0.0
    total = float(p.sum())
    if total <= 0.0:
        return None
    return int(rng.choice(len(p), p=p / total))
