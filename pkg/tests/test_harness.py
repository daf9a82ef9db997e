import json
import sys

import numpy as np
import pytest

from gcdk.decode import DecodeConfig, Strategy
from gcdk.denoise import Denoiser, Distribution, UniformDenoiser, make_noisy_oracle
from gcdk.earley import is_valid
from gcdk.harness import (
    CheckerSpec,
    FeasibilityCurve,
    InsufficientSamplesError,
    Problem,
    RunResult,
    functional_at_k,
    load_suite,
    make_denoiser,
    prefix_mask_acceptance_study,
    read_report,
    run_benchmark,
    run_cell,
    run_seed,
    sample_corpus,
    sample_sentence,
    syntactic_at_k,
    format_report_table,
    write_report,
)


class PointMassDenoiser(Denoiser):
    def __init__(self, vocab, token):
        self.vocab = vocab
        self.token_id = vocab.id_of(token)

    def forward(self, state, temperature, seed):
        n = self.vocab.size + 1
        return {i: Distribution.point_mass(n, self.token_id) for i in self._requested(state)}


def result(pid, strategy, idx, functional, syntactic=True):
    return RunResult(
        problem_id=pid, strategy=strategy, sample_index=idx, output=(),
        syntactic=syntactic, functional=functional, wall_time=0.0,
        rejections=0, recoveries=0, truncated=False,
    )


class TestMetrics:
    def test_syntactic_at_k_half(self):
        assert syntactic_at_k([[True, False, False], [False, False, False]], 3) == 50.0

    def test_syntactic_at_k_saturated(self):
        assert syntactic_at_k([[True], [True], [True]], 1) == 100.0

    def test_syntactic_at_k_monotone_in_k(self):
        flags = [[False, True]]
        assert syntactic_at_k(flags, 1) == 0.0
        assert syntactic_at_k(flags, 2) == 100.0

    def test_insufficient_samples(self):
        with pytest.raises(InsufficientSamplesError):
            syntactic_at_k([[True]], 2)

    def test_functional_at_k_direct_count(self):
        rows = [result("p1", "lave", 0, True), result("p2", "lave", 0, False)]
        assert functional_at_k(rows, 1) == 50.0

    def test_functional_requires_syntactic(self, gfor):
        problem = Problem(
            id="p", prompt=(), grammar_path="", vocab_path=None,
            checker=CheckerSpec(kind="external", command="false"),
        )
        # run_cell is exercised end to end elsewhere; here check the rule
        # directly on the grading helper.
        from gcdk.harness import _run_checker
        ok, _ = _run_checker(CheckerSpec(kind="exact-match", target=("a",)), ("a",))
        assert ok
        ok, _ = _run_checker(CheckerSpec(kind="exact-match", target=("a",)), ("b",))
        assert not ok


class TestCheckers:
    def test_external_checker_pass_and_fail(self):
        ok, err = __import__("gcdk.harness", fromlist=["_run_checker"])._run_checker(
            CheckerSpec(kind="external", command=f'"{sys.executable}" -c "import sys; sys.exit(0)" {{output_file}}'),
            ("x",),
        )
        assert ok and err is None
        ok, err = __import__("gcdk.harness", fromlist=["_run_checker"])._run_checker(
            CheckerSpec(kind="external", command=f'"{sys.executable}" -c "import sys; sys.exit(3)"'),
            ("x",),
        )
        assert not ok

    def test_external_checker_invocation_failure_recorded(self):
        from gcdk.harness import _run_checker
        ok, err = _run_checker(
            CheckerSpec(kind="external", command="/nonexistent/checker {output_file}"), ("x",)
        )
        assert not ok and err is not None


def make_problem(assets_dir, name, pid, checker=None, prompt=()):
    return Problem(
        id=pid,
        prompt=tuple(prompt),
        grammar_path=str(assets_dir / f"{name}.gram"),
        vocab_path=str(assets_dir / f"{name}.vocab"),
        checker=checker or CheckerSpec(kind="grammar-only"),
    )


class TestRunBenchmark:
    def test_lave_beats_no_cd_on_adversarial(self, assets_dir):
        problem = make_problem(assets_dir, "brackets", "b0")
        cfg = DecodeConfig(max_length=8, denoise_steps=8, block_size=8,
                           attempt_budget=1, seed=99)
        report, results = run_benchmark(
            [problem], ["no-cd", "lave"], cfg, samples=1,
            denoiser_spec=lambda g: PointMassDenoiser(g.vocab, ")"),
            clock=lambda: 0.0,
        )
        assert report.syntactic["lave"][1] == 100.0
        assert report.syntactic["no-cd"][1] == 0.0

    def test_empty_strategy_list_gives_metadata_only(self, assets_dir):
        problem = make_problem(assets_dir, "mini_for", "m0")
        cfg = DecodeConfig(max_length=8, denoise_steps=8, block_size=8, seed=0)
        report, results = run_benchmark([problem], [], cfg, samples=1, clock=lambda: 0.0)
        assert report.strategies == ()
        assert report.syntactic == {} and report.functional == {}
        assert report.metadata["problems"] == 1

    def test_k_values_follow_samples(self, assets_dir):
        problem = make_problem(assets_dir, "mini_for", "m0")
        cfg = DecodeConfig(max_length=10, denoise_steps=10, block_size=10, seed=1)
        report, _ = run_benchmark(
            [problem], ["lave"], cfg, samples=10,
            denoiser_spec=lambda g: make_noisy_oracle(g, 0.0), clock=lambda: 0.0,
        )
        assert report.k_values == (1, 3, 5, 10)
        syn = report.syntactic["lave"]
        assert all(syn[a] <= syn[b] for a, b in zip((1, 3, 5), (3, 5, 10)))

    def test_functional_leq_syntactic(self, assets_dir, gfor):
        target = ["f", "(", "a", ";", "a", ";", "a", ")"]
        problem = make_problem(
            assets_dir, "mini_for", "m0",
            checker=CheckerSpec(kind="exact-match", target=tuple(target)),
        )
        cfg = DecodeConfig(max_length=10, denoise_steps=10, block_size=10, seed=4)
        report, _ = run_benchmark(
            [problem], ["lave", "no-cd"], cfg, samples=3,
            denoiser_spec=lambda g: make_noisy_oracle(g, 0.5), clock=lambda: 0.0,
        )
        for strategy in report.strategies:
            for k in report.k_values:
                assert report.functional[strategy][k] <= report.syntactic[strategy][k]

    def test_suite_order_permutation_invariant(self, assets_dir):
        problems = [
            make_problem(assets_dir, "mini_for", "m0"),
            make_problem(assets_dir, "brackets", "b0"),
        ]
        cfg = DecodeConfig(max_length=8, denoise_steps=8, block_size=8, seed=7)
        spec = lambda g: make_noisy_oracle(g, 0.2)
        r1, _ = run_benchmark(problems, ["lave"], cfg, samples=2, denoiser_spec=spec,
                              clock=lambda: 0.0)
        r2, _ = run_benchmark(list(reversed(problems)), ["lave"], cfg, samples=2,
                              denoiser_spec=spec, clock=lambda: 0.0)
        assert r1 == r2

    def test_run_failures_recorded_not_raised(self, assets_dir):
        class Broken(Denoiser):
            def forward(self, state, temperature, seed):
                raise RuntimeError("boom")

        problem = make_problem(assets_dir, "brackets", "b0")
        cfg = DecodeConfig(max_length=8, denoise_steps=8, block_size=8, seed=0)
        report, results = run_benchmark(
            [problem], ["lave"], cfg, samples=1,
            denoiser_spec=lambda g: Broken(), clock=lambda: 0.0,
        )
        assert results[0].error and "boom" in results[0].error
        assert report.syntactic["lave"][1] == 0.0

    def test_seed_derivation_is_stable(self):
        a = run_seed(1, "p1", "lave", 0)
        b = run_seed(1, "p1", "lave", 0)
        c = run_seed(1, "p1", "lave", 1)
        assert a == b and a != c

    def test_parallel_jobs_match_serial_metrics(self, assets_dir):
        problems = [make_problem(assets_dir, "mini_for", f"p{i}") for i in range(4)]
        cfg = DecodeConfig(max_length=12, denoise_steps=12, block_size=6, seed=3)
        serial, _ = run_benchmark(problems, ["lave"], cfg, samples=2,
                                  denoiser_spec="noisy-oracle:0.2", clock=lambda: 0.0)
        parallel, _ = run_benchmark(problems, ["lave"], cfg, samples=2,
                                    denoiser_spec="noisy-oracle:0.2", jobs=2)
        assert serial.syntactic == parallel.syntactic
        assert serial.functional == parallel.functional

    def test_parallel_jobs_reject_callable_spec(self, assets_dir):
        problems = [make_problem(assets_dir, "mini_for", "p0")]
        cfg = DecodeConfig(max_length=12, denoise_steps=12, block_size=6, seed=3)
        with pytest.raises(ValueError, match="string denoiser spec"):
            run_benchmark(problems, ["lave"], cfg, samples=1,
                          denoiser_spec=lambda g: None, jobs=2)


class TestSuiteFile:
    def test_load_suite_resolves_paths(self, assets_dir, tmp_path):
        suite = {
            "problems": [
                {
                    "id": "j1",
                    "prompt": ["extract"],
                    "grammar": str(assets_dir / "json_schema_example.gram"),
                    "vocab": str(assets_dir / "json_schema_example.vocab"),
                    "checker": {"kind": "exact-match",
                                "target": ["{", '"id"', ":", "42", "}"]},
                }
            ]
        }
        path = tmp_path / "suite.json"
        path.write_text(json.dumps(suite))
        problems = load_suite(path)
        assert problems[0].id == "j1"
        assert problems[0].prompt == ("extract",)
        assert problems[0].checker.kind == "exact-match"
        res = run_cell(
            problems[0], "fs-cd", 0,
            DecodeConfig(max_length=10, denoise_steps=10, block_size=10, seed=5),
            lambda g: make_noisy_oracle(g, 0.0), clock=lambda: 0.0,
        )
        assert res.syntactic


class TestReportIO:
    def _small_report(self, assets_dir):
        problem = make_problem(assets_dir, "mini_for", "m0")
        cfg = DecodeConfig(max_length=10, denoise_steps=10, block_size=10, seed=2)
        report, _ = run_benchmark(
            [problem], ["lave", "fs-cd"], cfg, samples=3,
            denoiser_spec=lambda g: make_noisy_oracle(g, 0.1), clock=lambda: 0.0,
        )
        return report

    def test_roundtrip(self, assets_dir, tmp_path):
        report = self._small_report(assets_dir)
        path = tmp_path / "report.json"
        write_report(report, path)
        assert read_report(path) == report

    def test_table_layout(self, assets_dir, tmp_path):
        report = self._small_report(assets_dir)
        table = format_report_table(report)
        header = table.splitlines()[0].split()
        assert header[:2] == ["strategy", "metric"]
        assert header[2:] == ["k=1", "k=3"]
        assert "avg_time_s" in table
        # times carry two decimals
        last = table.strip().splitlines()[-1]
        assert last.split()[-1] == "0.00"

    def test_io_error_names_path(self, assets_dir):
        report = self._small_report(assets_dir)
        with pytest.raises(OSError, match="/nonexistent"):
            write_report(report, "/nonexistent/dir/report.json")


class TestFeasibilityStudy:
    def test_retain_one_is_flat_100(self, brackets):
        rng = np.random.default_rng(0)
        corpus = sample_corpus(brackets, 20, rng, max_len=6)
        curve = prefix_mask_acceptance_study(
            brackets, corpus, retain_prob=1.0, n_values=[1, 3],
            denoiser=UniformDenoiser(brackets.vocab), rng=rng, instances=50,
        )
        assert curve.acceptance[1] == 1.0 and curve.acceptance[3] == 1.0

    def test_exhaustive_reaches_100(self, brackets):
        rng = np.random.default_rng(1)
        corpus = sample_corpus(brackets, 20, rng, max_len=4)
        curve = prefix_mask_acceptance_study(
            brackets, corpus, retain_prob=0.5, n_values=[1, 2, 5],
            denoiser=UniformDenoiser(brackets.vocab), rng=rng, instances=60,
            exhaustive=True,
        )
        assert curve.exhaustive_rate == 1.0

    def test_curve_monotone(self, brackets):
        rng = np.random.default_rng(2)
        corpus = sample_corpus(brackets, 30, rng, max_len=6)
        curve = prefix_mask_acceptance_study(
            brackets, corpus, retain_prob=0.8, n_values=[1, 2, 3, 5, 10],
            denoiser=UniformDenoiser(brackets.vocab), rng=rng, instances=100,
        )
        rates = [curve.acceptance[n] for n in curve.n_values]
        assert all(a <= b for a, b in zip(rates, rates[1:]))

    def test_corpus_must_be_valid(self, brackets):
        rng = np.random.default_rng(3)
        bad = [(brackets.vocab.id_of(")"),)]
        with pytest.raises(ValueError, match="rejected"):
            prefix_mask_acceptance_study(
                brackets, bad, 0.8, [1], UniformDenoiser(brackets.vocab), rng
            )

    def test_curve_serializes(self, brackets, tmp_path):
        curve = FeasibilityCurve(0.8, (1, 3), {1: 0.5, 3: 0.9}, 10, None)
        data = json.loads(curve.to_json())
        assert data["acceptance"] == {"1": 0.5, "3": 0.9}


class TestSampling:
    def test_sample_sentences_are_valid(self, desk_grammars):
        rng = np.random.default_rng(10)
        for g in desk_grammars.values():
            for _ in range(30):
                s = sample_sentence(g, rng, max_len=10)
                assert len(s) <= 10
                assert is_valid(g, s)

    def test_make_denoiser_selectors(self, brackets):
        assert isinstance(make_denoiser("uniform", brackets), UniformDenoiser)
        noisy = make_denoiser("noisy-oracle:0.25", brackets)
        assert noisy.epsilon == 0.25
        with pytest.raises(ValueError):
            make_denoiser("bogus", brackets)
