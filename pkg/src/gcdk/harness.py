"""Benchmark suites, pass@k style metrics, and the feasibility study.

A suite is a JSON file of problems (id, prompt tokens, grammar path, checker
spec).  `run_benchmark` decodes every (problem, strategy, sample) cell with a
seed derived from (suite seed, problem id, strategy, sample index), grades
outputs, and aggregates syntactic@k / functional@k plus average wall time
into a `Report` that round-trips through `write_report` / `read_report`.
"""

from __future__ import annotations

import hashlib
import json
import math
import shlex
import subprocess
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .decode import DecodeConfig, Strategy, decode, lookahead_verify
from .denoise import Denoiser, SequenceState
from .earley import init_chart, is_valid
from .grammar import MASK, Grammar, is_terminal_code, load_grammar, load_vocabulary, reduce_grammar, term_index

K_VALUES = (1, 3, 5, 10)


class InsufficientSamplesError(ValueError):
    pass


@dataclass(frozen=True)
class CheckerSpec:
    kind: str  # "grammar-only" | "exact-match" | "external"
    target: Optional[tuple[str, ...]] = None  # exact-match token strings
    command: Optional[str] = None  # external template with {output_file}

    def __post_init__(self):
        if self.kind not in ("grammar-only", "exact-match", "external"):
            raise ValueError(f"unknown checker kind {self.kind!r}")
        if self.kind == "exact-match" and self.target is None:
            raise ValueError("exact-match checker needs a target")
        if self.kind == "external" and not self.command:
            raise ValueError("external checker needs a command template")


@dataclass(frozen=True)
class Problem:
    id: str
    prompt: tuple[str, ...]
    grammar_path: str
    vocab_path: Optional[str]
    checker: CheckerSpec


@dataclass
class RunResult:
    problem_id: str
    strategy: str
    sample_index: int
    output: tuple[str, ...]
    syntactic: bool
    functional: bool
    wall_time: float
    rejections: int
    recoveries: int
    truncated: bool
    error: Optional[str] = None


@dataclass
class Report:
    metadata: dict
    k_values: tuple[int, ...]
    strategies: tuple[str, ...]
    syntactic: dict  # strategy -> {k: percentage}
    functional: dict
    avg_time: dict  # strategy -> seconds

    def __eq__(self, other):
        if not isinstance(other, Report):
            return NotImplemented
        return (
            self.metadata == other.metadata
            and self.k_values == other.k_values
            and self.strategies == other.strategies
            and self.syntactic == other.syntactic
            and self.functional == other.functional
            and self.avg_time == other.avg_time
        )


def load_suite(path) -> list[Problem]:
    path = Path(path)
    data = json.loads(path.read_text(encoding="utf-8"))
    problems = []
    for entry in data["problems"]:
        checker = entry.get("checker", {"kind": "grammar-only"})
        spec = CheckerSpec(
            kind=checker["kind"],
            target=tuple(checker["target"]) if checker.get("target") is not None else None,
            command=checker.get("command"),
        )
        grammar_path = str((path.parent / entry["grammar"]).resolve())
        vocab = entry.get("vocab")
        vocab_path = str((path.parent / vocab).resolve()) if vocab else None
        problems.append(
            Problem(
                id=str(entry["id"]),
                prompt=tuple(entry.get("prompt", ())),
                grammar_path=grammar_path,
                vocab_path=vocab_path,
                checker=spec,
            )
        )
    return problems


_GRAMMAR_CACHE: dict = {}


def load_problem_grammar(problem: Problem) -> Grammar:
    key = (problem.grammar_path, problem.vocab_path)
    if key not in _GRAMMAR_CACHE:
        text = Path(problem.grammar_path).read_text(encoding="utf-8")
        if problem.vocab_path:
            vocab = load_vocabulary(Path(problem.vocab_path).read_text(encoding="utf-8"))
        else:
            from .grammar import literal_vocabulary

            vocab = literal_vocabulary(text)
        _GRAMMAR_CACHE[key] = reduce_grammar(load_grammar(text, vocab))
    return _GRAMMAR_CACHE[key]


def syntactic_at_k(flags: Sequence[Sequence[bool]], k: int) -> float:
    """Percentage of problems with at least one true flag among the first k."""
    if not flags:
        return 0.0
    for row in flags:
        if len(row) < k:
            raise InsufficientSamplesError(f"need {k} samples, problem has {len(row)}")
    hits = sum(1 for row in flags if any(row[:k]))
    return 100.0 * hits / len(flags)


def functional_at_k(results: Sequence[RunResult], k: int) -> float:
    """syntactic_at_k over the functional flags of grouped run results."""
    by_problem: dict = {}
    for r in results:
        by_problem.setdefault(r.problem_id, []).append(r)
    rows = []
    for pid in sorted(by_problem):
        runs = sorted(by_problem[pid], key=lambda r: r.sample_index)
        rows.append([r.functional for r in runs])
    return syntactic_at_k(rows, k)


def run_seed(suite_seed: int, problem_id: str, strategy: str, sample_index: int) -> int:
    blob = f"{suite_seed}|{problem_id}|{strategy}|{sample_index}".encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "big") % (2**63)


def make_denoiser(spec: str, grammar: Grammar) -> Denoiser:
    """Build a denoiser from a selector string.

    Selectors: ``uniform``, ``noisy-oracle:<epsilon>``, ``replay:<path>``,
    ``bridge:<command>``.
    """
    from .denoise import ScriptedDenoiser, UniformDenoiser, load_recording, make_noisy_oracle

    if spec == "uniform":
        return UniformDenoiser(grammar.vocab)
    if spec.startswith("noisy-oracle:"):
        return make_noisy_oracle(grammar, float(spec.split(":", 1)[1]))
    if spec.startswith("replay:"):
        _vocab, records = load_recording(spec.split(":", 1)[1])
        return ScriptedDenoiser(records)
    if spec.startswith("bridge:"):
        from .bridge import BridgeDenoiser

        return BridgeDenoiser(spec.split(":", 1)[1], grammar.vocab)
    raise ValueError(f"unknown denoiser selector {spec!r}")


def _run_checker(checker: CheckerSpec, output_tokens: tuple[str, ...]) -> tuple[bool, Optional[str]]:
    if checker.kind == "grammar-only":
        return True, None
    if checker.kind == "exact-match":
        return output_tokens == checker.target, None
    try:
        with tempfile.NamedTemporaryFile("w", suffix=".out", delete=False) as fh:
            fh.write("\n".join(output_tokens) + "\n")
            out_path = fh.name
        args = shlex.split(checker.command.format(output_file=out_path))
        proc = subprocess.run(args, capture_output=True, timeout=60)
        return proc.returncode == 0, None
    except Exception as exc:  # checker failures mark the sample, never abort
        return False, f"checker: {exc}"


def run_cell(
    problem: Problem,
    strategy: str,
    sample_index: int,
    cfg_template: DecodeConfig,
    denoiser_spec,
    clock: Optional[Callable[[], float]] = None,
) -> RunResult:
    """Decode and grade one (problem, strategy, sample) cell."""
    grammar = load_problem_grammar(problem)
    vocab = grammar.vocab
    seed = run_seed(cfg_template.seed, problem.id, strategy, sample_index)
    cfg = replace(cfg_template, strategy=Strategy(strategy), seed=seed)
    if callable(denoiser_spec):
        denoiser = denoiser_spec(grammar)
    else:
        denoiser = make_denoiser(denoiser_spec, grammar)
    timer = time.perf_counter if clock is None else clock
    try:
        t0 = timer()
        output_ids, trace = decode(cfg, grammar, denoiser, prompt=problem.prompt, clock=clock)
        wall = timer() - t0
        output = tuple(vocab.display(t) for t in output_ids)
        syntactic = bool(is_valid(grammar, output_ids))
        if syntactic:
            functional, error = _run_checker(problem.checker, output)
        else:
            # Syntactic correctness is a prerequisite; the checker never runs.
            functional, error = False, None
        return RunResult(
            problem_id=problem.id,
            strategy=strategy,
            sample_index=sample_index,
            output=output,
            syntactic=syntactic,
            functional=functional,
            wall_time=wall,
            rejections=trace.rejections,
            recoveries=trace.recoveries,
            truncated=trace.truncated,
            error=error,
        )
    except Exception as exc:
        return RunResult(
            problem_id=problem.id,
            strategy=strategy,
            sample_index=sample_index,
            output=(),
            syntactic=False,
            functional=False,
            wall_time=0.0,
            rejections=0,
            recoveries=0,
            truncated=True,
            error=f"{type(exc).__name__}: {exc}",
        )


def _run_cell_task(args):
    problem, strategy, sample_index, cfg_template, denoiser_spec = args
    return run_cell(problem, strategy, sample_index, cfg_template, denoiser_spec)


def run_benchmark(
    suite: Sequence[Problem],
    strategies: Sequence[str],
    cfg_template: DecodeConfig,
    samples: int,
    denoiser_spec="uniform",
    jobs: int = 1,
    clock: Optional[Callable[[], float]] = None,
) -> tuple[Report, list[RunResult]]:
    """Run the full grid and aggregate; per-run failures never abort the suite."""
    if not suite:
        raise ValueError("suite must not be empty")
    strategies = [str(Strategy(s).value) for s in strategies]

    cells = [
        (problem, strategy, sample, cfg_template, denoiser_spec)
        for problem in suite
        for strategy in strategies
        for sample in range(samples)
    ]
    if jobs > 1:
        if callable(denoiser_spec):
            raise ValueError("parallel runs need a string denoiser spec")
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell_task, cells))
    else:
        results = [run_cell(p, s, i, c, d, clock=clock) for p, s, i, c, d in cells]

    # Deterministic aggregation regardless of completion order.
    results.sort(key=lambda r: (r.problem_id, r.strategy, r.sample_index))
    ks = tuple(k for k in K_VALUES if k <= samples)
    syntactic: dict = {}
    functional: dict = {}
    avg_time: dict = {}
    for strategy in strategies:
        rows = [r for r in results if r.strategy == strategy]
        by_problem: dict = {}
        for r in rows:
            by_problem.setdefault(r.problem_id, []).append(r)
        syn_rows = [
            [x.syntactic for x in sorted(runs, key=lambda r: r.sample_index)]
            for _pid, runs in sorted(by_problem.items())
        ]
        syntactic[strategy] = {k: syntactic_at_k(syn_rows, k) for k in ks}
        functional[strategy] = {k: functional_at_k(rows, k) for k in ks}
        avg_time[strategy] = float(np.mean([r.wall_time for r in rows])) if rows else 0.0

    report = Report(
        metadata={
            "suite_seed": cfg_template.seed,
            "samples": samples,
            "problems": len(suite),
            "strategies": list(strategies),
            "denoiser": denoiser_spec if isinstance(denoiser_spec, str) else "custom",
            "config": {
                "max_length": cfg_template.max_length,
                "denoise_steps": cfg_template.denoise_steps,
                "block_size": cfg_template.block_size,
                "lookahead_size": cfg_template.lookahead_size,
                "attempt_budget": cfg_template.attempt_budget,
                "temperature": cfg_template.temperature,
            },
        },
        k_values=ks,
        strategies=tuple(strategies),
        syntactic=syntactic,
        functional=functional,
        avg_time=avg_time,
    )
    return report, results


def format_report_table(report: Report) -> str:
    ks = report.k_values
    header = ["strategy", "metric"] + [f"k={k}" for k in ks]
    rows = [header]
    for strategy in report.strategies:
        rows.append([strategy, "syntactic"] + [f"{report.syntactic[strategy][k]:.1f}" for k in ks])
        rows.append([strategy, "functional"] + [f"{report.functional[strategy][k]:.1f}" for k in ks])
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip() for row in rows]
    lines.append("")
    lines.append("strategy  avg_time_s")
    for strategy in report.strategies:
        lines.append(f"{strategy.ljust(8)}  {report.avg_time[strategy]:.2f}")
    return "\n".join(lines) + "\n"


def write_report(report: Report, path) -> None:
    """Write `path` (JSON, lossless) and a sibling .txt table."""
    path = Path(path)
    payload = {
        "metadata": report.metadata,
        "k_values": list(report.k_values),
        "strategies": list(report.strategies),
        "syntactic": {s: {str(k): v for k, v in m.items()} for s, m in report.syntactic.items()},
        "functional": {s: {str(k): v for k, v in m.items()} for s, m in report.functional.items()},
        "avg_time": report.avg_time,
    }
    try:
        path.write_text(json.dumps(payload, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
        path.with_suffix(".txt").write_text(format_report_table(report), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc


def read_report(path) -> Report:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return Report(
        metadata=data["metadata"],
        k_values=tuple(data["k_values"]),
        strategies=tuple(data["strategies"]),
        syntactic={s: {int(k): v for k, v in m.items()} for s, m in data["syntactic"].items()},
        functional={s: {int(k): v for k, v in m.items()} for s, m in data["functional"].items()},
        avg_time=data["avg_time"],
    )


# ---------------------------------------------------------------------------
# Random sentence sampling (for corpora) and the feasibility study.
# ---------------------------------------------------------------------------


def _min_lengths(g: Grammar) -> list:
    INF = float("inf")
    minlen = [INF] * len(g.nonterminals)
    changed = True
    while changed:
        changed = False
        for prod in g.productions:
            total = 0
            for code in prod.rhs:
                total += 1 if is_terminal_code(code) else minlen[code]
                if total == INF:
                    break
            if total < minlen[prod.lhs]:
                minlen[prod.lhs] = total
                changed = True
    return minlen


def sample_sentence(g: Grammar, rng: np.random.Generator, max_len: int = 12) -> tuple[int, ...]:
    """Random valid sentence of at most `max_len` tokens (reduced grammar)."""
    if not g.reduced:
        raise ValueError("sample_sentence requires a reduced grammar")
    minlen = _min_lengths(g)
    if minlen[g.start] > max_len:
        raise ValueError(f"shortest sentence has {minlen[g.start]} tokens > max_len={max_len}")

    out: list[int] = []
    pending = [g.start]  # leftmost-first stack of symbol codes
    while pending:
        code = pending.pop(0)
        if is_terminal_code(code):
            choices = sorted(g.term_tokens[term_index(code)])
            out.append(int(choices[int(rng.integers(len(choices)))]))
            continue
        budget = max_len - len(out) - sum(
            1 if is_terminal_code(c) else minlen[c] for c in pending
        )
        options = [
            pid
            for pid in g.prods_by_lhs[code]
            if sum(1 if is_terminal_code(c) else minlen[c] for c in g.productions[pid].rhs) <= budget
        ]
        if not options:
            raise AssertionError("budget bookkeeping left no derivable production")
        pid = options[int(rng.integers(len(options)))]
        pending = list(g.productions[pid].rhs) + pending
    return tuple(out)


def sample_corpus(g: Grammar, count: int, rng: np.random.Generator, max_len: int = 12) -> list:
    return [sample_sentence(g, rng, max_len) for _ in range(count)]


@dataclass
class FeasibilityCurve:
    retain_prob: float
    n_values: tuple[int, ...]
    acceptance: dict  # n -> rate in [0, 1]
    instances: int
    exhaustive_rate: Optional[float] = None

    def to_json(self) -> str:
        return json.dumps(
            {
                "retain_prob": self.retain_prob,
                "n_values": list(self.n_values),
                "acceptance": {str(n): self.acceptance[n] for n in self.n_values},
                "instances": self.instances,
                "exhaustive_rate": self.exhaustive_rate,
            },
            indent=2,
        )


def prefix_mask_acceptance_study(
    g: Grammar,
    corpus: Sequence[tuple[int, ...]],
    retain_prob: float,
    n_values: Sequence[int],
    denoiser: Denoiser,
    rng: np.random.Generator,
    instances: int = 200,
    exhaustive: bool = False,
    temperature: float = 1.0,
) -> FeasibilityCurve:
    """Acceptance rate of lookahead verification on known-extendable prefixes.

    Each instance takes a random prefix of a corpus sentence, masks every
    token independently with probability 1 - retain_prob, queries the
    denoiser once, and asks whether any of the first n sampled fillings is
    extendable.  Common random numbers make the per-instance success index
    well defined, so the curve is non-decreasing in n by construction.
    """
    if not corpus:
        raise ValueError("corpus must not be empty")
    for sent in corpus:
        if not is_valid(g, sent):
            raise ValueError("corpus contains a sentence rejected by the grammar")
    n_values = tuple(sorted(set(int(n) for n in n_values)))
    n_max = max(n_values)

    hits = {n: 0 for n in n_values}
    exhaustive_hits = 0
    for inst in range(instances):
        sentence = corpus[int(rng.integers(len(corpus)))]
        plen = int(rng.integers(1, len(sentence) + 1)) if sentence else 0
        prefix = list(sentence[:plen])
        slots = [tok if rng.random() < retain_prob else MASK for tok in prefix]

        if MASK not in slots:
            # Nothing to fill: the prefix itself is the single candidate and
            # is extendable by construction.
            for n in n_values:
                hits[n] += 1
            exhaustive_hits += 1
            continue

        state = SequenceState(prompt=(), output=tuple(slots), block_size=len(slots), current_block=0)
        dists = denoiser.forward(state, temperature, int(rng.integers(2**62)))
        result = lookahead_verify(slots, dists, n_max, g, rng)
        if result.accepted:
            for n in n_values:
                if result.samples_used <= n:
                    hits[n] += 1
        if exhaustive:
            ex = lookahead_verify(slots, dists, n_max, g, rng, exhaustive=True)
            exhaustive_hits += 1 if ex.accepted else 0

    return FeasibilityCurve(
        retain_prob=retain_prob,
        n_values=n_values,
        acceptance={n: hits[n] / instances for n in n_values},
        instances=instances,
        exhaustive_rate=(exhaustive_hits / instances) if exhaustive else None,
    )
