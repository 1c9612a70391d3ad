"""Problem parsing, the unbiased pass@k estimator, incremental prompt
augmentation, candidate execution, scoring, and correlations."""

import json
import math
from fractions import Fraction

import numpy as np
import pytest
import scipy.stats

from textcode import evaluator as E
from textcode.corpus import FormattedPair

GCD_PROBLEM = {
    "task_id": "demo/gcd",
    "entry_point": "gcd",
    "prompt": (
        "def gcd(a: int, b: int) -> int:\n"
        '    """Return the greatest common divisor of a and b."""\n'
    ),
    "canonical_solution": "    while b:\n        a, b = b, a % b\n    return a\n",
    "test": (
        "def check(candidate):\n"
        "    assert candidate(12, 18) == 6\n"
        "    assert candidate(7, 13) == 1\n"
        "    assert candidate(0, 5) == 5\n"
    ),
}


@pytest.fixture(scope="module")
def gcd_problem(tmp_path_factory):
    path = tmp_path_factory.mktemp("gcd") / "p.jsonl"
    path.write_text(json.dumps(GCD_PROBLEM) + "\n")
    (prob,) = E.load_problems(path, validate=True)
    return prob


def test_parse_problem_fields(gcd_problem):
    p = gcd_problem
    assert p.signature == "def gcd(a: int, b: int) -> int:"
    assert p.description == "Return the greatest common divisor of a and b."
    assert p.reference_body == "while b:\n    (a, b) = (b, a % b)\nreturn a"
    assert p.entry_point == "gcd"
    assert p.preamble == ""


def test_parse_problem_with_preamble(tmp_path):
    rec = dict(GCD_PROBLEM)
    rec["prompt"] = "import math\n\n" + rec["prompt"]
    path = tmp_path / "p.jsonl"
    path.write_text(json.dumps(rec) + "\n")
    (prob,) = E.load_problems(path)
    assert prob.preamble == "import math\n\n"


def test_validate_rejects_broken_reference(tmp_path):
    rec = dict(GCD_PROBLEM)
    rec["canonical_solution"] = "    return a + b\n"
    path = tmp_path / "p.jsonl"
    path.write_text(json.dumps(rec) + "\n")
    with pytest.raises(E.EvalError, match="fails its own tests"):
        E.load_problems(path, validate=True)


def oracle_pass_at_k(n, c, k):
    """Exhaustive-enumeration oracle over all C(n, k) draws."""
    from itertools import combinations

    outcomes = [1] * c + [0] * (n - c)
    draws = list(combinations(range(n), k))
    hits = sum(any(outcomes[i] for i in draw) for draw in draws)
    return hits / len(draws)


def test_pass_at_k_matches_enumeration():
    for n in range(1, 13):
        for c in range(n + 1):
            for k in range(1, n + 1):
                got = E.pass_at_k(n, c, k)
                want = oracle_pass_at_k(n, c, k)
                assert got == pytest.approx(want, abs=1e-12), (n, c, k)


def test_pass_at_k_high_precision_n200():
    n = 200
    for c in (0, 1, 7, 50, 199, 200):
        for k in (1, 10, 100):
            exact = 1 - Fraction(math.comb(n - c, k), math.comb(n, k))
            assert abs(E.pass_at_k(n, c, k) - float(exact)) <= 1e-9


def test_pass_at_k_edges_and_errors():
    assert E.pass_at_k(10, 10, 1) == 1.0
    assert E.pass_at_k(10, 0, 5) == 0.0
    assert E.pass_at_k(5, 3, 4) == 1.0  # n - c < k forces a hit
    with pytest.raises(E.EvalError):
        E.pass_at_k(5, 6, 1)
    with pytest.raises(E.EvalError):
        E.pass_at_k(5, 2, 0)
    with pytest.raises(E.EvalError):
        E.pass_at_k(0, 0, 1)


def test_augment_incremental_three_line_body(tmp_path):
    rec = dict(GCD_PROBLEM)
    path = tmp_path / "p.jsonl"
    path.write_text(json.dumps(rec) + "\n")
    (prob,) = E.load_problems(path)
    # while/assign/return -> 3 marker lines -> 3 prompts (0, 1, 2 lines given)
    assert len(prob.body_lines()) == 3
    prompts = E.augment_incremental(prob)
    assert [a.lines_given for a in prompts] == [0, 1, 2]
    assert prompts[0].prepended_code == ""
    assert prompts[1].prepended_code == "[new_line] [indent] while b:"
    full = E.augment_incremental(prob, include_full=True)
    assert [a.lines_given for a in full] == [0, 1, 2, 3]
    assert full[-1].prepended_code == prob.body_markers


def test_assemble_program_round_trips(gcd_problem):
    lines = gcd_problem.body_lines()
    # a completion that continues mid-body starts with the line separator
    program = E.assemble_program(
        gcd_problem, lines[0], f"[new_line] {lines[1]} [new_line] {lines[2]}"
    )
    expected = gcd_problem.signature + "\n" + "\n".join(
        "    " + ln for ln in gcd_problem.reference_body.split("\n")
    )
    assert program == expected


def test_local_executor_pass_fail_timeout_crash():
    ex = E.LocalExecutor(timeout_seconds=3.0)
    ok = ex("def f(x):\n    return x + 1", "def check(c):\n    assert c(1) == 2", "f")
    assert ok.status == "pass"
    bad = ex("def f(x):\n    return x", "def check(c):\n    assert c(1) == 2", "f")
    assert bad.status == "fail"
    assert "AssertionError" in bad.stderr_excerpt
    crash = ex("def f(x:\n", "def check(c):\n    pass", "f")
    assert crash.status == "fail"
    loop = ex("def f(x):\n    while True:\n        pass", "def check(c):\n    c(1)", "f")
    assert loop.status == "timeout"


def _samples_for(problem, mode, n, good_fraction):
    """Copy-oracle samples: the first ``good_fraction * n`` finish the
    reference body, the rest emit garbage."""
    prompts = (
        E.augment_incremental(problem) if mode == "incremental"
        else E.augment_incremental(problem)[:1]
    )
    out = []
    for aug in prompts:
        lines = problem.body_lines()
        remainder = f" {E.MARK_NEWLINE} ".join(lines[aug.lines_given:])
        if aug.lines_given > 0:
            # continuing mid-body: the separator comes from the completion
            remainder = f"{E.MARK_NEWLINE} {remainder}"
        for i in range(n):
            good = i < int(round(good_fraction * n))
            out.append({
                "task_id": aug.task_id,
                "lines_given": aug.lines_given,
                "sample_index": i,
                "completion": remainder if good else "return None",
            })
    return out


def test_evaluate_standard_counts(gcd_problem):
    samples = _samples_for(gcd_problem, "standard", n=4, good_fraction=0.5)
    report = E.evaluate([gcd_problem], samples, ks=[1, 2, 4], workers=2)
    (outcome,) = report.prompts
    assert (outcome.n, outcome.c) == (4, 2)
    assert report.pass_at[1] == pytest.approx(0.5)
    assert report.pass_at[4] == pytest.approx(1.0)
    assert report.pass_at[2] == pytest.approx(oracle_pass_at_k(4, 2, 2))


def test_evaluate_incremental_micro_average(gcd_problem):
    # perfect copies on every augmented prompt -> micro-average 1.0
    samples = _samples_for(gcd_problem, "incremental", n=2, good_fraction=1.0)
    report = E.evaluate([gcd_problem], samples, ks=[1], mode="incremental")
    assert len(report.prompts) == 3
    assert report.pass_at[1] == pytest.approx(1.0)


def test_evaluate_missing_prompt_raises(gcd_problem):
    samples = _samples_for(gcd_problem, "standard", n=2, good_fraction=1.0)
    with pytest.raises(E.EvalError, match="no samples"):
        E.evaluate([gcd_problem], samples, ks=[1], mode="incremental")


def test_evaluate_bad_markers_count_as_fail(gcd_problem):
    samples = [{
        "task_id": gcd_problem.task_id, "lines_given": 0, "sample_index": 0,
        "completion": "[dedent] [dedent] [dedent] oops",
    }]
    report = E.evaluate([gcd_problem], samples, ks=[1])
    assert report.pass_at[1] == 0.0


def test_report_json_round_trip(gcd_problem):
    samples = _samples_for(gcd_problem, "standard", n=2, good_fraction=0.5)
    report = E.evaluate([gcd_problem], samples, ks=[1], metadata={"tag": "t"})
    blob = json.loads(json.dumps(report.to_json()))
    assert blob["mode"] == "standard"
    assert blob["metadata"]["tag"] == "t"
    assert blob["pass_at"]["1"] == report.pass_at[1]


def test_contamination_check(gcd_problem, toy_pairs):
    clean = E.contamination_check([gcd_problem], toy_pairs)
    assert clean == []
    dirty = toy_pairs[0]
    pair = FormattedPair(
        docstring="Return the greatest  common\ndivisor of a and b.",
        signature="def g(a, b):", code=dirty.code, format_style="pangu",
        dedup_key="x",
    )
    hits = E.contamination_check([gcd_problem], list(toy_pairs) + [pair])
    assert hits == [("demo/gcd", len(toy_pairs))]


def test_pearson_against_scipy():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = rng.normal(size=30)
        y = rng.normal(size=30) + 0.5 * x
        assert E.pearson(x, y) == pytest.approx(
            scipy.stats.pearsonr(x, y).statistic, abs=1e-12
        )


def test_pearson_errors():
    with pytest.raises(E.EvalError):
        E.pearson([1.0, 2.0], [1.0])
    with pytest.raises(E.EvalError):
        E.pearson([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])


def test_correlation_report():
    series = {
        "a": [0.1, 0.2, 0.3, 0.5],
        "b": [0.1, 0.25, 0.28, 0.55],
        "c": [0.5, 0.4, 0.2, 0.1],
    }
    rep = E.correlation_report(series)
    assert set(rep["pairs"]) == {"a|b", "a|c", "b|c"}
    assert rep["pairs"]["a|b"] > 0.9
    assert rep["pairs"]["a|c"] < 0
    assert rep["mean"] == pytest.approx(np.mean(list(rep["pairs"].values())))
    with pytest.raises(E.EvalError):
        E.correlation_report({"a": [1, 2]})
