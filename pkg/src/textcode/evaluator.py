"""Functional-correctness scoring: pass@k, incremental pass@k, execution
orchestration, contamination checks, and checkpoint-correlation analysis.

Problems follow the public HumanEval/MBPP JSONL schema ({task_id, prompt,
canonical_solution, test, entry_point}). Candidate programs are assembled as
signature + given reference lines + completion, then executed through a
pluggable executor; a sample counts as correct only when every unit test
passes.
"""

from __future__ import annotations

import ast
import json
import math
import re
import subprocess
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .corpus import (
    CorpusError,
    FormattedPair,
    MARK_DEDENT,
    MARK_INDENT,
    MARK_NEWLINE,
    denormalize,
    normalize_whitespace,
)


class EvalError(Exception):
    pass


class SandboxInfrastructureError(EvalError):
    """Executor infrastructure failure, distinct from a failing candidate."""


# -- problems ----------------------------------------------------------------


@dataclass
class EvalProblem:
    task_id: str
    description: str
    signature: str
    reference_body: str  # real source, no markers
    unit_tests: str
    entry_point: str
    preamble: str = ""  # imports/helpers preceding the function in the prompt

    @property
    def body_markers(self) -> str:
        """Reference body in marker-normalized form, as it follows the
        signature in training data."""
        return f"{MARK_NEWLINE} {MARK_INDENT} {normalize_whitespace(self.reference_body)} {MARK_DEDENT}"

    def body_lines(self) -> list[str]:
        return self.body_markers.split(f" {MARK_NEWLINE} ")


def _parse_problem(obj: dict) -> EvalProblem:
    source = obj["prompt"] + obj["canonical_solution"]
    tree = ast.parse(source)
    fn = None
    for node in ast.walk(tree):
        if isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef)) and node.name == obj["entry_point"]:
            fn = node
    if fn is None:
        raise EvalError(f"entry point {obj['entry_point']!r} not found in {obj['task_id']}")
    body = list(fn.body)
    doc = ""
    if (
        body
        and isinstance(body[0], ast.Expr)
        and isinstance(body[0].value, ast.Constant)
        and isinstance(body[0].value.value, str)
    ):
        doc = body[0].value.value
        body = body[1:]
    if not body:
        raise EvalError(f"{obj['task_id']}: reference solution has no body")
    prefix = "async def" if isinstance(fn, ast.AsyncFunctionDef) else "def"
    signature = f"{prefix} {fn.name}({ast.unparse(fn.args)})"
    if fn.returns is not None:
        signature += f" -> {ast.unparse(fn.returns)}"
    signature += ":"
    marker = re.search(rf"^(async\s+)?def\s+{re.escape(fn.name)}\b", obj["prompt"], re.M)
    preamble = obj["prompt"][: marker.start()] if marker else ""
    return EvalProblem(
        task_id=obj["task_id"],
        description=re.sub(r"\s+", " ", doc).strip() or obj["task_id"],
        signature=signature,
        reference_body="\n".join(ast.unparse(stmt) for stmt in body),
        unit_tests=obj["test"],
        entry_point=obj["entry_point"],
        preamble=preamble,
    )


def load_problems(
    path: Path | str,
    validate: bool = False,
    executor: Optional["Executor"] = None,
) -> list[EvalProblem]:
    """Read a HumanEval-schema JSONL file; optionally check that each
    reference solution passes its own tests."""
    problems = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                problems.append(_parse_problem(json.loads(line)))
    if validate:
        executor = executor or LocalExecutor()
        for prob in problems:
            program = prob.preamble + prob.signature + "\n" + _indent(prob.reference_body)
            result = executor(program, prob.unit_tests, prob.entry_point)
            if result.status != "pass":
                raise EvalError(
                    f"reference solution for {prob.task_id} fails its own tests "
                    f"({result.status}): {result.stderr_excerpt}"
                )
    return problems


def _indent(text: str, unit: str = "    ") -> str:
    return "\n".join(unit + ln if ln.strip() else ln for ln in text.split("\n"))


# -- pass@k ------------------------------------------------------------------


def pass_at_k(n: int, c: int, k: int) -> float:
    """Unbiased estimator 1 - C(n-c, k)/C(n, k), in stable product form."""
    if not 0 <= c <= n:
        raise EvalError(f"require 0 <= c <= n, got n={n}, c={c}")
    if not 1 <= k <= n:
        raise EvalError(f"require 1 <= k <= n, got n={n}, k={k}")
    if n - c < k:
        return 1.0
    return 1.0 - float(np.prod(1.0 - k / np.arange(n - c + 1, n + 1, dtype=np.float64)))


# -- incremental augmentation --------------------------------------------------


@dataclass
class AugmentedPrompt:
    task_id: str
    lines_given: int
    description: str
    signature: str
    prepended_code: str  # marker text; empty when lines_given == 0


def augment_incremental(problem: EvalProblem, include_full: bool = False) -> list[AugmentedPrompt]:
    """One prompt per partial solution: the original plus prompts with
    1..L-1 reference lines prepended (the full body only behind a flag)."""
    lines = problem.body_lines()
    top = len(lines) + 1 if include_full else len(lines)
    out = []
    for given in range(top):
        prefix = f" {MARK_NEWLINE} ".join(lines[:given])
        out.append(
            AugmentedPrompt(
                task_id=problem.task_id,
                lines_given=given,
                description=problem.description,
                signature=problem.signature,
                prepended_code=prefix,
            )
        )
    return out


# -- execution ----------------------------------------------------------------


@dataclass
class ExecutionResult:
    status: str  # pass | fail | timeout | crash
    wall_time: float = 0.0
    stderr_excerpt: str = ""


Executor = Callable[[str, str, str], ExecutionResult]


def build_script(program_text: str, test_text: str, entry_point: str) -> str:
    return f"{program_text}\n\n{test_text}\n\ncheck({entry_point})\n"


@dataclass
class LocalExecutor:
    """Runs candidates in a fresh interpreter subprocess with a wall-clock
    timeout. Suitable for trusted toy suites; untrusted code should go
    through the sandbox runner protocol instead."""

    timeout_seconds: float = 10.0

    def __call__(self, program_text: str, test_text: str, entry_point: str) -> ExecutionResult:
        script = build_script(program_text, test_text, entry_point)
        with tempfile.TemporaryDirectory() as tmp:
            try:
                proc = subprocess.run(
                    [sys.executable, "-"],
                    input=script,
                    capture_output=True,
                    text=True,
                    timeout=self.timeout_seconds,
                    cwd=tmp,
                )
            except subprocess.TimeoutExpired:
                return ExecutionResult("timeout", self.timeout_seconds)
            except OSError as exc:
                raise SandboxInfrastructureError(str(exc)) from exc
        status = "pass" if proc.returncode == 0 else "fail"
        return ExecutionResult(status, 0.0, proc.stderr[-500:])


@dataclass
class SandboxExecutor:
    """Talks the frozen stdin/stdout JSON protocol of the sandbox runner."""

    command: Sequence[str]
    timeout_seconds: float = 10.0
    memory_limit_mb: int = 512

    def __call__(self, program_text: str, test_text: str, entry_point: str) -> ExecutionResult:
        request = json.dumps(
            {
                "program_text": program_text,
                "test_text": f"{test_text}\n\ncheck({entry_point})\n",
                "timeout_seconds": self.timeout_seconds,
                "memory_limit_mb": self.memory_limit_mb,
            }
        )
        try:
            proc = subprocess.run(
                list(self.command),
                input=request,
                capture_output=True,
                text=True,
                timeout=self.timeout_seconds + 30,
            )
        except (subprocess.TimeoutExpired, OSError) as exc:
            raise SandboxInfrastructureError(str(exc)) from exc
        if proc.returncode != 0:
            raise SandboxInfrastructureError(proc.stderr[-500:])
        verdict = json.loads(proc.stdout.strip().splitlines()[-1])
        return ExecutionResult(
            verdict["status"], verdict.get("wall_time", 0.0), verdict.get("stderr_excerpt", "")
        )


def assemble_program(
    problem: EvalProblem, prepended_code: str, completion_markers: str
) -> str:
    """Signature + given reference lines + completion, denormalized to real
    Python source (with the problem's preamble, if any)."""
    marker_text = problem.signature
    if prepended_code:
        marker_text += f" {prepended_code}"
    if completion_markers:
        marker_text += f" {completion_markers}"
    return problem.preamble + denormalize(marker_text)


# -- evaluation ----------------------------------------------------------------


@dataclass
class PromptOutcome:
    task_id: str
    lines_given: int
    n: int
    c: int


@dataclass
class PassKReport:
    mode: str
    ks: list[int]
    pass_at: dict[int, float]
    prompts: list[PromptOutcome]
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "ks": self.ks,
            "pass_at": {str(k): v for k, v in self.pass_at.items()},
            "prompts": [
                {"task_id": p.task_id, "lines_given": p.lines_given, "n": p.n, "c": p.c}
                for p in self.prompts
            ],
            "metadata": self.metadata,
        }


def evaluate(
    problems: Sequence[EvalProblem],
    samples: Iterable[dict],
    ks: Sequence[int],
    mode: str = "standard",
    executor: Optional[Executor] = None,
    workers: int = 4,
    metadata: Optional[dict] = None,
) -> PassKReport:
    """Execute every sample and score pass@k.

    ``samples`` are dicts {task_id, sample_index, completion[, lines_given]}.
    Standard mode averages per-problem pass@k over the original prompts;
    incremental mode pools original and augmented prompts with equal weight
    (micro-average).
    """
    if mode not in ("standard", "incremental"):
        raise EvalError(f"unknown mode: {mode}")
    executor = executor or LocalExecutor()
    by_problem = {p.task_id: p for p in problems}

    required: dict[tuple[str, int], EvalProblem] = {}
    for prob in problems:
        if mode == "standard":
            required[(prob.task_id, 0)] = prob
        else:
            for aug in augment_incremental(prob):
                required[(prob.task_id, aug.lines_given)] = prob

    grouped: dict[tuple[str, int], list[dict]] = {key: [] for key in required}
    for sample in samples:
        key = (sample["task_id"], int(sample.get("lines_given", 0)))
        if key in grouped:
            grouped[key].append(sample)
    missing = sorted(key for key, items in grouped.items() if not items)
    if missing:
        raise EvalError(f"no samples for prompts: {missing[:10]}{'...' if len(missing) > 10 else ''}")

    jobs: list[tuple[tuple[str, int], str]] = []
    for key, items in grouped.items():
        prob = required[key]
        lines = prob.body_lines()
        prefix = f" {MARK_NEWLINE} ".join(lines[: key[1]])
        for sample in items:
            try:
                program = assemble_program(prob, prefix, sample["completion"])
            except CorpusError:
                jobs.append((key, None))
                continue
            jobs.append((key, program))

    def run(job):
        key, program = job
        if program is None:
            return key, ExecutionResult("fail", 0.0, "denormalization failed")
        prob = required[key]
        return key, executor(program, prob.unit_tests, prob.entry_point)

    counts: dict[tuple[str, int], list[int]] = {key: [0, 0] for key in grouped}
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(job) for job in jobs]
    for key, result in results:
        counts[key][0] += 1
        if result.status == "pass":
            counts[key][1] += 1

    prompts = [
        PromptOutcome(task_id=key[0], lines_given=key[1], n=nc[0], c=nc[1])
        for key, nc in sorted(counts.items())
    ]
    pass_at = {}
    for k in ks:
        values = [pass_at_k(p.n, p.c, k) for p in prompts]
        pass_at[int(k)] = float(np.mean(values))
    return PassKReport(
        mode=mode, ks=[int(k) for k in ks], pass_at=pass_at, prompts=prompts,
        metadata=metadata or {},
    )


# -- contamination --------------------------------------------------------------


def _strip_ws(text: str) -> str:
    return re.sub(r"\s+", "", text)


def contamination_check(
    problems: Sequence[EvalProblem], training_pairs: Sequence[FormattedPair]
) -> list[tuple[str, int]]:
    """Exact whitespace-stripped matches between problem descriptions and
    training docstrings."""
    index: dict[str, list[int]] = {}
    for i, pair in enumerate(training_pairs):
        index.setdefault(_strip_ws(pair.docstring), []).append(i)
    matches = []
    for prob in problems:
        for i in index.get(_strip_ws(prob.description), []):
            matches.append((prob.task_id, i))
    return matches


# -- correlation ------------------------------------------------------------------


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise EvalError("pearson requires two equal-length series of length >= 2")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float((xc ** 2).sum()) * float((yc ** 2).sum()))
    if denom == 0.0:
        raise EvalError("pearson undefined for zero-variance series")
    return float((xc * yc).sum() / denom)


def correlation_report(series: dict[str, Sequence[float]]) -> dict:
    """Pairwise Pearson correlations between checkpoint score series, plus
    the mean over distinct pairs."""
    names = sorted(series)
    if len(names) < 2:
        raise EvalError("need at least two series")
    pairs = {}
    values = []
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            r = pearson(series[a], series[b])
            pairs[f"{a}|{b}"] = r
            values.append(r)
    return {"pairs": pairs, "mean": float(np.mean(values)), "names": names}
