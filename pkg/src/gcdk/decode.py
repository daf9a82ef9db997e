"""Block decoding with lookahead-verified grammar constraints.

Three strategies share one driver:

* ``LAVE``: every proposed token is verified by sampling fillings for the
  masked positions of the incomplete prefix and checking whether any filled
  complete prefix is still extendable.  Accepted witnesses are cached; after
  ``attempt_budget`` consecutive rejections the cached witness replaces the
  prefix (and, when that is a no-op, one admissible token is appended under
  an adjusted next-position distribution).
* ``FS_CD``: forced left-to-right unmasking with the distribution masked to
  the admissible next tokens of the complete prefix.
* ``NO_CD``: the denoiser's native unmasking, no verification.

Rejection is data, not control flow: dead parser states are values and every
verdict lands in the trace.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

import numpy as np

from .denoise import Denoiser, SequenceState, sample_token
from .earley import ChartState, init_chart
from .grammar import MASK, Grammar, GrammarNotReducedError


class InvariantViolation(RuntimeError):
    """A reliability or cache invariant failed; indicates an engine bug."""


class EmptyAdmissibleSetError(RuntimeError):
    """Recovery found no admissible next token for a non-valid cached prefix."""


class Strategy(str, Enum):
    NO_CD = "no-cd"
    FS_CD = "fs-cd"
    LAVE = "lave"


@dataclass(frozen=True)
class DecodeConfig:
    max_length: int = 256
    denoise_steps: int = 128
    block_size: int = 32
    lookahead_size: int = 10
    attempt_budget: int = 5
    temperature: float = 0.2
    strategy: Strategy = Strategy.LAVE
    seed: int = 0

    def validate(self):
        if self.max_length < 1:
            raise ValueError("max_length must be >= 1")
        if not 1 <= self.denoise_steps <= self.max_length:
            raise ValueError("denoise_steps must satisfy 1 <= T <= L")
        if not 1 <= self.block_size <= self.max_length:
            raise ValueError("block_size must satisfy 1 <= B <= L")
        if self.lookahead_size < 1:
            raise ValueError("lookahead_size must be >= 1")
        if self.attempt_budget < 1:
            raise ValueError("attempt_budget must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass(frozen=True)
class TraceEvent:
    step: int
    position: int  # 0-based slot index
    token: str  # display string; empty when no token was drawn
    verdict: str  # accepted | rejected | recovery | unmasked-unverified
    witness_len: int
    elapsed_us: int
    detail: Optional[dict] = None

    def to_json_line(self) -> str:
        obj = {
            "step": self.step,
            "position": self.position,
            "token": self.token,
            "verdict": self.verdict,
            "witness_len": self.witness_len,
            "elapsed_us": self.elapsed_us,
        }
        if self.detail is not None:
            obj["detail"] = self.detail
        return json.dumps(obj, ensure_ascii=False)


@dataclass
class DecodeTrace:
    events: list = field(default_factory=list)
    rejections: int = 0
    recoveries: int = 0
    forced: int = 0  # unverified force-finalized slots
    truncated: bool = False
    canvas: tuple = ()

    def add(self, event: TraceEvent):
        self.events.append(event)


def write_trace(path, trace: DecodeTrace) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for event in trace.events:
            fh.write(event.to_json_line() + "\n")


def read_trace_lines(path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


@dataclass(frozen=True)
class VerificationResult:
    accepted: bool
    witness: Optional[tuple[int, ...]]
    samples_used: int


@dataclass
class DecodeState:
    """Mutable per-run state mirroring Algorithm 1's bookkeeping."""

    slots: list
    c_fail: int = 0
    y_cache: tuple = ()
    step: int = 0
    exclusions: dict = field(default_factory=dict)  # position -> set of token ids


def rightmost_nonmask(slots) -> int:
    """1-based index of the rightmost non-MASK slot (EOS counts); 0 if none."""
    for i in range(len(slots) - 1, -1, -1):
        if slots[i] != MASK:
            return i + 1
    return 0


def masked_positions(prefix) -> tuple[int, ...]:
    """0-based masked indices inside a prefix that ends at the rightmost token."""
    return tuple(i for i, s in enumerate(prefix) if s == MASK)


def fill(prefix, assignment: dict) -> tuple[int, ...]:
    """Substitute tokens for every masked position; keys must match exactly."""
    need = set(masked_positions(prefix))
    if set(assignment) != need:
        raise KeyError(f"assignment keys {sorted(assignment)} != masked positions {sorted(need)}")
    out = list(prefix)
    for pos, tok in assignment.items():
        out[pos] = tok
    return tuple(out)


def eos_fill(slots, eos_id: int) -> tuple[int, ...]:
    """Set every slot right of the first EOS to EOS."""
    out = list(slots)
    try:
        first = out.index(eos_id)
    except ValueError:
        return tuple(out)
    for i in range(first + 1, len(out)):
        out[i] = eos_id
    return tuple(out)


def select_unmask_positions(dists, window: tuple[int, int], quota: int) -> list[int]:
    """The `quota` most confident masked positions in the window.

    Confidence is the distribution's max probability; ties break toward the
    lower position index.
    """
    if quota < 1:
        raise ValueError("quota must be >= 1")
    start, end = window
    candidates = [(pos, d.max_prob()) for pos, d in dists.items() if start <= pos < end]
    candidates.sort(key=lambda pc: (-pc[1], pc[0]))
    return [pos for pos, _conf in candidates[:quota]]


_EXHAUSTIVE_CAP = 1_000_000


def lookahead_verify(
    y_slots,
    dists,
    n_samples: int,
    grammar: Grammar,
    rng: np.random.Generator,
    exhaustive: bool = False,
    base_chart: Optional[ChartState] = None,
    base_len: int = 0,
) -> VerificationResult:
    """Decide whether a freshly proposed token keeps the output extendable.

    The incomplete prefix of `y_slots` (up to the rightmost non-MASK slot) is
    completed by sampling up to `n_samples` distinct assignments for its
    masked positions from the per-position distributions, EOS excluded; the
    proposal is accepted iff some completed prefix is extendable, and the
    first such completion is returned as the witness.  `exhaustive=True`
    enumerates every assignment over the whole alphabet instead, ignoring
    the distributions and `n_samples`.

    `base_chart`/`base_len` may supply a recognizer state for an untouched
    prefix of `y_slots` (no masked slot before `base_len`); verification
    advances from there instead of from scratch.
    """
    vocab_size = grammar.vocab.size
    r = rightmost_nonmask(y_slots)
    prefix = list(y_slots[:r])
    masked = [i for i in range(r) if prefix[i] == MASK]
    first_mask = masked[0] if masked else r

    if base_chart is None:
        base_chart = init_chart(grammar)
        base_len = 0
    if base_len > first_mask:
        raise ValueError("base_len reaches past the first masked position")

    chart = base_chart
    for i in range(base_len, first_mask):
        chart = chart.advance(prefix[i])
        if chart.dead:
            return VerificationResult(False, None, 0)

    def check(assignment) -> bool:
        c = chart
        k = 0
        for i in range(first_mask, r):
            tok = assignment[k] if prefix[i] == MASK else prefix[i]
            if prefix[i] == MASK:
                k += 1
            c = c.advance(tok)
            if c.dead:
                return False
        return True

    if not masked:
        ok = check(())
        return VerificationResult(ok, tuple(prefix) if ok else None, 1)

    if exhaustive:
        if vocab_size ** len(masked) > _EXHAUSTIVE_CAP:
            raise ValueError("exhaustive enumeration is too large")
        used = 0
        for assignment in itertools.product(range(vocab_size), repeat=len(masked)):
            used += 1
            if check(assignment):
                witness = fill(prefix, dict(zip(masked, assignment)))
                return VerificationResult(True, witness, used)
        return VerificationResult(False, None, used)

    # Per-position sampling distributions restricted to the alphabet.
    position_probs = []
    joint_support = 1
    for pos in masked:
        p = np.array(dists[pos].probs[:vocab_size])
        total = float(p.sum())
        if total <= 0.0:
            return VerificationResult(False, None, 0)
        position_probs.append(p / total)
        if joint_support <= n_samples:
            joint_support *= int(np.count_nonzero(p))

    target = min(n_samples, joint_support)
    draw_cap = 4 * n_samples + 8
    seen = set()
    used = 0
    for _draw in range(draw_cap):
        assignment = tuple(int(rng.choice(vocab_size, p=p)) for p in position_probs)
        if assignment in seen:
            continue
        seen.add(assignment)
        used += 1
        if check(assignment):
            witness = fill(prefix, dict(zip(masked, assignment)))
            return VerificationResult(True, witness, used)
        if used >= target:
            break
    return VerificationResult(False, None, used)


def recover(state: DecodeState, grammar: Grammar, dists, rng: np.random.Generator) -> TraceEvent:
    """Cache-enhanced recovery: restore the cached witness, maybe extend it.

    Replaces the prefix with the cached complete prefix.  When that changes
    nothing (the prefix was already complete and equal to the cache), one
    more token is appended, sampled from the next position's distribution
    restricted to the admissible next tokens of the cache; if no token is
    admissible but the cache is a complete sentence, EOS is placed instead.
    Resets the failure counter and clears per-step exclusions.
    """
    vocab = grammar.vocab
    r = rightmost_nonmask(state.slots)
    if len(state.y_cache) != r:
        raise InvariantViolation(
            f"cache length {len(state.y_cache)} != rightmost non-mask index {r} at recovery"
        )
    prefix = list(state.slots[:r])
    changed = MASK in prefix
    detail: dict = {}

    state.slots[:r] = list(state.y_cache)
    if changed:
        detail["kind"] = "replace"
        detail["filled"] = sum(1 for s in prefix if s == MASK)
        token_str = ""
        position = r - 1 if r else 0
    else:
        chart = init_chart(grammar)
        for tok in state.y_cache:
            chart = chart.advance(tok)
        if chart.dead:
            raise InvariantViolation("cached prefix is not extendable")
        admissible = sorted(chart.admissible_tokens())
        base = dists.get(r)
        probs = None
        if admissible and base is not None:
            p = np.zeros(vocab.size + 1)
            idx = np.array(admissible)
            p[idx] = base.probs[idx]
            total = float(p.sum())
            if total > 0:
                probs = p / total
        if probs is None and admissible and not chart.accepting:
            # Model puts no mass on any admissible token; fall back to a
            # uniform choice so the run keeps moving.
            probs = np.zeros(vocab.size + 1)
            probs[np.array(admissible)] = 1.0 / len(admissible)
        if probs is not None:
            tok = int(rng.choice(vocab.size + 1, p=probs))
            detail["kind"] = "append"
            detail["admissible"] = admissible
            detail["cache"] = list(state.y_cache)
            state.slots[r] = tok
            state.y_cache = state.y_cache + (tok,)
            token_str = vocab.display(tok)
            position = r
        elif chart.accepting:
            # Either nothing is admissible or the model refuses everything
            # admissible; the cache is a complete sentence, so terminate.
            state.slots[r] = vocab.eos_id
            detail["kind"] = "eos"
            token_str = vocab.eos_marker
            position = r
        else:
            raise EmptyAdmissibleSetError(
                "no admissible next token and the cached prefix is not a valid sentence"
            )

    state.c_fail = 0
    state.exclusions.clear()
    return TraceEvent(
        step=state.step,
        position=position,
        token=token_str,
        verdict="recovery",
        witness_len=len(state.y_cache),
        elapsed_us=0,
        detail=detail,
    )


class _ChartCache:
    """Incrementally extended charts for the leading complete run of slots."""

    def __init__(self, grammar: Grammar, slots):
        self.grammar = grammar
        self.slots = slots
        self.charts = [init_chart(grammar)]

    def get(self, length: int) -> ChartState:
        while len(self.charts) <= length:
            i = len(self.charts) - 1
            tok = self.slots[i]
            if tok == MASK:
                raise ValueError("chart cache asked to cross a masked slot")
            self.charts.append(self.charts[-1].advance(tok))
        return self.charts[length]

    def truncate(self, length: int):
        del self.charts[length + 1 :]


def _step_seed(seed: int, step: int) -> int:
    return (seed * 1_000_003 + step) % (2**63)


def decode(
    cfg: DecodeConfig,
    grammar: Grammar,
    denoiser: Denoiser,
    prompt: tuple[str, ...] = (),
    rng: Optional[np.random.Generator] = None,
    clock: Optional[Callable[[], float]] = None,
    strict: bool = True,
) -> tuple[tuple[int, ...], DecodeTrace]:
    """Run one decode; returns (content before the first EOS, trace).

    `clock` measures per-proposal verification time; pass None for fully
    reproducible traces (elapsed fields stay 0).  With `strict=True` every
    accepted witness is re-checked for extendability with an independent
    recognizer run and violations raise `InvariantViolation`.
    """
    cfg.validate()
    if not grammar.reduced:
        raise GrammarNotReducedError("decode requires a reduced grammar")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    now = clock if clock is not None else (lambda: 0.0)

    if cfg.strategy is Strategy.FS_CD:
        return _decode_fs_cd(cfg, grammar, denoiser, prompt, rng, now)
    if cfg.strategy is Strategy.NO_CD:
        return _decode_no_cd(cfg, grammar, denoiser, prompt, rng, now)
    return _decode_lave(cfg, grammar, denoiser, prompt, rng, now, strict)


def _content(slots, eos_id) -> tuple[int, ...]:
    out = []
    for s in slots:
        if s == eos_id:
            break
        out.append(s)
    return tuple(out)


def _blocks(length, block_size):
    return [
        (b * block_size, min((b + 1) * block_size, length))
        for b in range(math.ceil(length / block_size))
    ]


def _check_witness(grammar, witness, y_prime, trace_context: str):
    chart = init_chart(grammar)
    for tok in witness:
        chart = chart.advance(tok)
        if chart.dead:
            raise InvariantViolation(f"{trace_context}: witness is not extendable")
    for i, tok in enumerate(witness):
        if y_prime[i] != MASK and y_prime[i] != tok:
            raise InvariantViolation(f"{trace_context}: witness disagrees with committed token at {i}")


def _decode_lave(cfg, grammar, denoiser, prompt, rng, now, strict):
    vocab = grammar.vocab
    eos = vocab.eos_id
    L = cfg.max_length
    state = DecodeState(slots=[MASK] * L)
    trace = DecodeTrace()
    cache = _ChartCache(grammar, state.slots)

    for block_index, (bs, be) in enumerate(_blocks(L, cfg.block_size)):
        budget = max(1, math.ceil(cfg.denoise_steps * (be - bs) / L))
        dists = {}
        for step_in_block in range(budget):
            masked = [i for i in range(bs, be) if state.slots[i] == MASK]
            if not masked:
                break
            seq = SequenceState(prompt, tuple(state.slots), cfg.block_size, block_index)
            dists = denoiser.forward(seq, cfg.temperature, _step_seed(cfg.seed, state.step))
            state.exclusions = {}
            quota = max(1, math.ceil(len(masked) / (budget - step_in_block)))
            recovered = False

            for pos in select_unmask_positions(dists, (bs, be), quota):
                if state.slots[pos] != MASK:
                    continue
                while True:
                    excl = state.exclusions.setdefault(pos, set())
                    tok = sample_token(dists[pos], excl, rng)
                    if tok is None:
                        # A drained support counts as a full budget of failures.
                        state.c_fail += cfg.attempt_budget
                        trace.rejections += 1
                        trace.add(TraceEvent(state.step, pos, "", "rejected",
                                             len(state.y_cache), 0,
                                             {"reason": "support-exhausted"}))
                        event = recover(state, grammar, dists, rng)
                        trace.add(event)
                        trace.recoveries += 1
                        cache.truncate(0)
                        state.slots[:] = list(eos_fill(state.slots, eos))
                        recovered = True
                        break
                    t0 = now()
                    first_mask = next(
                        (i for i, s in enumerate(state.slots) if s == MASK), L
                    )
                    if tok == eos:
                        content = state.slots[:pos]
                        if MASK in content:
                            result = VerificationResult(False, None, 0)
                        else:
                            ok = cache.get(pos).accepting
                            result = VerificationResult(ok, tuple(content) if ok else None, 0)
                    else:
                        y_prime = list(state.slots)
                        y_prime[pos] = tok
                        result = lookahead_verify(
                            y_prime, dists, cfg.lookahead_size, grammar, rng,
                            base_chart=cache.get(first_mask), base_len=first_mask,
                        )
                    elapsed = int((now() - t0) * 1e6)

                    if result.accepted:
                        if strict and tok != eos:
                            y_prime = list(state.slots)
                            y_prime[pos] = tok
                            _check_witness(grammar, result.witness, y_prime,
                                           f"step {state.step} pos {pos}")
                        state.slots[pos] = tok
                        state.y_cache = result.witness
                        state.c_fail = 0
                        trace.add(TraceEvent(state.step, pos, vocab.display(tok), "accepted",
                                             len(result.witness), elapsed,
                                             {"samples_used": result.samples_used,
                                              "witness": list(result.witness)}))
                        if tok == eos:
                            cache.truncate(pos)
                            filled = eos_fill(state.slots, eos)
                            state.slots[:] = list(filled)
                        break
                    state.exclusions[pos].add(tok)
                    state.c_fail += 1
                    trace.rejections += 1
                    trace.add(TraceEvent(state.step, pos, vocab.display(tok), "rejected",
                                         len(state.y_cache), elapsed,
                                         {"samples_used": result.samples_used}))
                    if state.c_fail >= cfg.attempt_budget:
                        event = recover(state, grammar, dists, rng)
                        trace.add(event)
                        trace.recoveries += 1
                        cache.truncate(0)
                        state.slots[:] = list(eos_fill(state.slots, eos))
                        recovered = True
                        break
                if recovered:
                    break
            state.step += 1

        leftovers = [i for i in range(bs, be) if state.slots[i] == MASK]
        if leftovers:
            # Step budget ran out with rejections outstanding: finalize the
            # block without verification and flag the run.
            for pos in leftovers:
                if state.slots[pos] != MASK:
                    continue
                tok = sample_token(dists[pos], set(), rng)
                state.slots[pos] = tok
                trace.forced += 1
                trace.add(TraceEvent(state.step, pos, vocab.display(tok),
                                     "unmasked-unverified", len(state.y_cache), 0, None))
                if tok == eos:
                    state.slots[:] = list(eos_fill(state.slots, eos))
            trace.truncated = True

    trace.canvas = tuple(state.slots)
    if eos not in state.slots:
        trace.truncated = True
    return _content(state.slots, eos), trace


def _decode_no_cd(cfg, grammar, denoiser, prompt, rng, now):
    vocab = grammar.vocab
    eos = vocab.eos_id
    L = cfg.max_length
    slots = [MASK] * L
    trace = DecodeTrace()
    step = 0

    for block_index, (bs, be) in enumerate(_blocks(L, cfg.block_size)):
        budget = max(1, math.ceil(cfg.denoise_steps * (be - bs) / L))
        for step_in_block in range(budget):
            masked = [i for i in range(bs, be) if slots[i] == MASK]
            if not masked:
                break
            seq = SequenceState(prompt, tuple(slots), cfg.block_size, block_index)
            dists = denoiser.forward(seq, cfg.temperature, _step_seed(cfg.seed, step))
            quota = max(1, math.ceil(len(masked) / (budget - step_in_block)))
            for pos in select_unmask_positions(dists, (bs, be), quota):
                if slots[pos] != MASK:
                    continue
                tok = sample_token(dists[pos], set(), rng)
                slots[pos] = tok
                trace.add(TraceEvent(step, pos, vocab.display(tok),
                                     "unmasked-unverified", 0, 0, None))
                if tok == eos:
                    slots[:] = list(eos_fill(slots, eos))
            step += 1

    trace.canvas = tuple(slots)
    if eos not in slots:
        trace.truncated = True
    return _content(slots, eos), trace


def _decode_fs_cd(cfg, grammar, denoiser, prompt, rng, now):
    vocab = grammar.vocab
    eos = vocab.eos_id
    L = cfg.max_length
    slots = [MASK] * L
    trace = DecodeTrace()
    chart = init_chart(grammar)

    for pos in range(L):
        block_index = pos // cfg.block_size
        seq = SequenceState(prompt, tuple(slots), cfg.block_size, block_index)
        dists = denoiser.forward(seq, cfg.temperature, _step_seed(cfg.seed, pos))
        admissible = sorted(chart.admissible_tokens())
        if chart.accepting:
            admissible.append(eos)
        if not admissible:
            raise InvariantViolation("FS-CD reached a prefix with no admissible token")
        base = dists.get(pos)
        p = np.zeros(vocab.size + 1)
        idx = np.array(admissible)
        if base is not None:
            p[idx] = base.probs[idx]
        total = float(p.sum())
        if total > 0:
            p /= total
        else:
            p[idx] = 1.0 / len(idx)
        tok = int(rng.choice(vocab.size + 1, p=p))
        slots[pos] = tok
        trace.add(TraceEvent(pos, pos, vocab.display(tok), "accepted", pos + 1, 0, None))
        if tok == eos:
            slots[:] = list(eos_fill(slots, eos))
            break
        chart = chart.advance(tok)

    trace.canvas = tuple(slots)
    if eos not in slots:
        trace.truncated = True
    return _content(slots, eos), trace
