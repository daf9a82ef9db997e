"""Command-line interface.

Exit codes are the machine contract: 0 success, 1 domain negative (a dead
prefix, an invalid decode), 2 usage or environment error.  All commands are
deterministic under --seed.  GCDK_LOG controls log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import earley
from .decode import DecodeConfig, Strategy, decode, write_trace
from .grammar import GrammarError, Vocabulary, literal_vocabulary, load_grammar, load_vocabulary, reduce_grammar
from .harness import (
    load_suite,
    make_denoiser,
    prefix_mask_acceptance_study,
    run_benchmark,
    sample_corpus,
    format_report_table,
    write_report,
)

log = logging.getLogger("gcdk")

_CONFIG_FLAGS = {
    "max_length": "max_length",
    "steps": "denoise_steps",
    "block_size": "block_size",
    "lookahead": "lookahead_size",
    "budget": "attempt_budget",
    "temperature": "temperature",
    "strategy": "strategy",
    "seed": "seed",
}


def _load_grammar_files(grammar_path: str, vocab_path):
    text = Path(grammar_path).read_text(encoding="utf-8")
    if vocab_path:
        vocab = load_vocabulary(Path(vocab_path).read_text(encoding="utf-8"))
    else:
        vocab = literal_vocabulary(text)
    return reduce_grammar(load_grammar(text, vocab))


def _read_tokens(args) -> list[str]:
    if args.tokens_file:
        return [line for line in Path(args.tokens_file).read_text(encoding="utf-8").splitlines() if line]
    return list(args.tokens)


def _build_config(args) -> DecodeConfig:
    # Precedence: defaults < config file < flags.
    base = {}
    if getattr(args, "config", None):
        base = json.loads(Path(args.config).read_text(encoding="utf-8"))
        allowed = {f.name for f in fields(DecodeConfig)}
        unknown = set(base) - allowed
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
    cfg = DecodeConfig(**base)
    overrides = {}
    for flag, field_name in _CONFIG_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[field_name] = value
    if "strategy" in overrides:
        overrides["strategy"] = Strategy(overrides["strategy"])
    if overrides:
        cfg = replace(cfg, **overrides)
    cfg.validate()
    return cfg


def cmd_check(args) -> int:
    grammar = _load_grammar_files(args.grammar, args.vocab)
    tokens = grammar.vocab.encode(_read_tokens(args))
    state = earley.run_chart(grammar, tokens)
    if state.accepting:
        print("valid")
        return 0
    if not state.dead:
        print("extendable")
        return 0
    print("dead")
    return 1


def cmd_next_tokens(args) -> int:
    grammar = _load_grammar_files(args.grammar, args.vocab)
    tokens = grammar.vocab.encode(_read_tokens(args))
    try:
        admissible = earley.next_tokens(grammar, tokens)
    except earley.NotExtendablePrefixError:
        print("dead", file=sys.stderr)
        return 1
    for tid in sorted(admissible):
        print(grammar.vocab.display(tid))
    return 0


def cmd_decode(args) -> int:
    grammar = _load_grammar_files(args.grammar, args.vocab)
    cfg = _build_config(args)
    denoiser = make_denoiser(args.denoiser, grammar)
    prompt = tuple(args.prompt or ())
    # Artifacts must be byte-identical under --seed, so per-event timing is
    # left at zero; the wall clock only feeds the summary line.
    t0 = time.perf_counter()
    output, trace = decode(cfg, grammar, denoiser, prompt=prompt)
    wall = time.perf_counter() - t0
    valid = earley.is_valid(grammar, output)

    display = [grammar.vocab.display(t) for t in output]
    if args.out:
        Path(args.out).write_text("\n".join(display) + ("\n" if display else ""), encoding="utf-8")
    else:
        for tok in display:
            print(tok)
    if args.trace:
        write_trace(args.trace, trace)
    print(
        f"valid: {str(valid).lower()}  rejections: {trace.rejections}  "
        f"recoveries: {trace.recoveries}  truncated: {str(trace.truncated).lower()}  "
        f"time_s: {wall:.2f}",
        file=sys.stderr,
    )
    if cfg.strategy is Strategy.LAVE and not valid and trace.truncated:
        return 1
    return 0 if valid or cfg.strategy is not Strategy.LAVE else 1


def cmd_bench(args) -> int:
    suite = load_suite(args.suite)
    cfg = _build_config(args)
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    samples = args.samples if args.samples is not None else (args.k or 1)
    if args.k is not None and samples < args.k:
        samples = args.k
    clock = (lambda: 0.0) if args.no_timing else None
    report, results = run_benchmark(
        suite, strategies, cfg, samples, denoiser_spec=args.denoiser, jobs=args.jobs,
        clock=clock,
    )
    out = Path(args.out or "report.json")
    write_report(report, out)
    failures = [r for r in results if r.error]
    if failures:
        log.warning("%d runs recorded errors (first: %s)", len(failures), failures[0].error)
    sys.stdout.write(format_report_table(report))
    return 0


def cmd_lookahead_study(args) -> int:
    grammar = _load_grammar_files(args.grammar, args.vocab)
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    if args.corpus:
        lines = [l for l in Path(args.corpus).read_text(encoding="utf-8").splitlines() if l]
        corpus = [grammar.vocab.encode(line.split()) for line in lines]
    else:
        corpus = sample_corpus(grammar, args.sample_corpus, rng, max_len=args.max_sentence_len)
    n_values = [int(x) for x in args.n_values.split(",")]
    denoiser = make_denoiser(args.denoiser, grammar)
    curve = prefix_mask_acceptance_study(
        grammar,
        corpus,
        retain_prob=args.retain_prob,
        n_values=n_values,
        denoiser=denoiser,
        rng=rng,
        instances=args.instances,
        exhaustive=args.exhaustive,
    )
    payload = curve.to_json() + "\n"
    if args.out:
        Path(args.out).write_text(payload, encoding="utf-8")
    sys.stdout.write(payload)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gcdk", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_grammar_flags(p):
        p.add_argument("--grammar", required=True, help="grammar file (.gram)")
        p.add_argument("--vocab", help="vocabulary file, one token per line")

    def add_config_flags(p):
        p.add_argument("--config", help="JSON file with DecodeConfig overrides")
        p.add_argument("--strategy", choices=[s.value for s in Strategy])
        p.add_argument("--max-length", dest="max_length", type=int)
        p.add_argument("--steps", type=int, help="denoising steps T")
        p.add_argument("--block-size", dest="block_size", type=int)
        p.add_argument("--lookahead", type=int, help="lookahead size N")
        p.add_argument("--budget", type=int, help="attempt budget tau")
        p.add_argument("--temperature", type=float)
        p.add_argument("--seed", type=int)

    p = sub.add_parser("check", help="classify a token string: valid | extendable | dead")
    add_grammar_flags(p)
    p.add_argument("tokens", nargs="*", help="whitespace-separated vocabulary tokens")
    p.add_argument("--tokens-file", help="one token per line (tokens may contain spaces)")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("next-tokens", help="admissible next tokens of a prefix")
    add_grammar_flags(p)
    p.add_argument("tokens", nargs="*")
    p.add_argument("--tokens-file")
    p.set_defaults(func=cmd_next_tokens)

    p = sub.add_parser("decode", help="run one decode")
    add_grammar_flags(p)
    add_config_flags(p)
    p.add_argument("--denoiser", default="uniform",
                   help="uniform | noisy-oracle:EPS | replay:PATH | bridge:COMMAND")
    p.add_argument("--prompt", nargs="*", help="prompt tokens (passed through to the denoiser)")
    p.add_argument("--out", help="write output tokens here, one per line")
    p.add_argument("--trace", help="write the event trace here")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("bench", help="run a benchmark suite")
    add_config_flags(p)
    p.add_argument("--suite", required=True, help="suite JSON file")
    p.add_argument("--strategies", default="no-cd,fs-cd,lave")
    p.add_argument("--samples", type=int, help="independent runs per problem")
    p.add_argument("--k", type=int, help="largest k for the @k metrics")
    p.add_argument("--denoiser", default="uniform")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", help="report path (.json; a .txt table is written alongside)")
    p.add_argument("--no-timing", action="store_true",
                   help="zero the timing fields so reports are byte-reproducible")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("lookahead-study", help="prefix-masking acceptance curve")
    add_grammar_flags(p)
    p.add_argument("--corpus", help="file of valid sentences, one per line, space-separated tokens")
    p.add_argument("--sample-corpus", type=int, default=50,
                   help="sample this many sentences from the grammar instead")
    p.add_argument("--max-sentence-len", type=int, default=10)
    p.add_argument("--retain-prob", type=float, default=0.8)
    p.add_argument("--n-values", default="3,5,10,20,30,40")
    p.add_argument("--instances", type=int, default=200)
    p.add_argument("--exhaustive", action="store_true",
                   help="also verify by full enumeration (small alphabets only)")
    p.add_argument("--denoiser", default="uniform")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_lookahead_study)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("GCDK_LOG", "WARNING").upper())
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except GrammarError as exc:
        print(f"grammar error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"file not found: {exc.filename}", file=sys.stderr)
        return 2
    except KeyError as exc:
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
