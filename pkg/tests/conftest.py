"""Shared fixtures: a memorizable toy benchmark, its training pairs and
vocabulary, small models, and a hand-audited synthetic source tree."""

import json
import re

import pytest

from textcode.corpus import FilterRules, FormattedPair
from textcode.data import instances_from_pairs
from textcode.evaluator import load_problems
from textcode.model import ModelConfig, init_model
from textcode.tokenizer import (
    TokenizerError,
    build_separation_set,
    train_vocabulary,
)

TOY_COUNT = 32


def toy_problem_records():
    """HumanEval-schema records with two-line reference bodies; the docstring
    number determines the body, so a small model can memorize the mapping."""
    records = []
    for i in range(TOY_COUNT):
        records.append(
            {
                "task_id": f"toy/{i:02d}",
                "entry_point": f"fn{i:02d}",
                "prompt": (
                    f"def fn{i:02d}(x):\n"
                    f'    """Map the input through rule {i}."""\n'
                ),
                "canonical_solution": f"    y = x + {i}\n    return y\n",
                "test": (
                    "def check(candidate):\n"
                    f"    assert candidate(0) == {i}\n"
                    f"    assert candidate(7) == {7 + i}\n"
                ),
            }
        )
    return records


@pytest.fixture(scope="session")
def toy_problems_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("toy") / "problems.jsonl"
    with open(path, "w") as fh:
        for rec in toy_problem_records():
            fh.write(json.dumps(rec) + "\n")
    return path


@pytest.fixture(scope="session")
def toy_problems(toy_problems_path):
    return load_problems(toy_problems_path, validate=True)


def pairs_from_problems(problems, style="pangu"):
    from textcode.corpus import _dedup_key

    out = []
    for prob in problems:
        code = prob.body_markers
        out.append(
            FormattedPair(
                docstring=prob.description,
                signature=prob.signature,
                code=code,
                format_style=style,
                dedup_key=_dedup_key(prob.description, prob.signature, code),
                source_path=prob.task_id,
            )
        )
    return out


@pytest.fixture(scope="session")
def toy_pairs(toy_problems):
    return pairs_from_problems(toy_problems)


def train_best(texts, target):
    """Train at ``target`` or, if the corpus saturates first, at the largest
    achievable size reported by the trainer."""
    texts = list(texts)
    try:
        return train_vocabulary(texts, target)
    except TokenizerError as exc:
        m = re.search(r"achievable size is (\d+)", str(exc))
        if m is None:
            raise
        return train_vocabulary(texts, int(m.group(1)))


@pytest.fixture(scope="session")
def toy_vocab(toy_pairs):
    from textcode.corpus import render_pair

    return train_best([render_pair(p) for p in toy_pairs], 512)


@pytest.fixture(scope="session")
def toy_sepset(toy_vocab):
    return build_separation_set(toy_vocab)


@pytest.fixture(scope="session")
def toy_instances(toy_pairs, toy_vocab):
    instances, dropped = instances_from_pairs(toy_pairs, toy_vocab, 256)
    assert dropped == 0
    return instances


def tiny_config(vocab_size, separation="shared", context=256, **over):
    kw = dict(layers=2, model_dim=32, ffn_dim=64, heads=2, context=context,
              vocab_size=vocab_size, separation=separation)
    kw.update(over)
    return ModelConfig(**kw)


@pytest.fixture()
def tiny_model(toy_vocab):
    return init_model(tiny_config(toy_vocab.size), seed=0)


# -- hand-audited corpus tree --------------------------------------------------

AUDIT_RULES = FilterRules(max_size_bytes=8000, max_mean_line_len=60.0, max_line_len=400)

# Composition (by construction):
#   174 good files x (2 documented fns + 1 undocumented fn)
#     4 files sharing one identical documented fn (3 dropped as duplicates)
#     3 files whose only fn has a whitespace-only docstring (format failure)
#     2 files whose only fn is docstring-only (empty body)
#     4 rejected for size, 4 for parse, 4 for mean line, 4 for max line
#     1 unreadable (invalid utf-8)
AUDIT_EXPECTED = {
    "files_seen": 200,
    "files_kept": 183,
    "rejections": {"size": 4, "parse": 4, "mean-line": 4, "max-line": 4,
                   "unreadable": 1},
    "functions_extracted": 174 * 3 + 4 + 3,
    "functions_skipped": {"no-docstring": 174, "format-failure": 3,
                          "empty-body": 2},
    "pairs_emitted": 174 * 2 + 1,
    "duplicates_dropped": 3,
}


def build_audited_tree(root):
    root.mkdir(parents=True, exist_ok=True)
    for i in range(174):
        (root / f"good_{i:03d}.py").write_text(
            f"def alpha_{i:03d}(x):\n"
            f'    """Compute variant {i} alpha."""\n'
            f"    return x * {i} + 1\n\n"
            f"def beta_{i:03d}(x, y):\n"
            f'    """Combine inputs for case {i}."""\n'
            f"    z = x + y\n"
            f"    return z - {i}\n\n"
            f"def gamma_{i:03d}(x):\n"
            f"    return x\n"
        )
    for i in range(4):
        (root / f"dup_{i}.py").write_text(
            "def dupe(x):\n"
            '    """Duplicated helper."""\n'
            "    return x + 42\n"
        )
    for i in range(3):
        (root / f"blankdoc_{i}.py").write_text(
            f"def blank_{i}(x):\n"
            '    """   """\n'
            "    return x\n"
        )
    for i in range(2):
        (root / f"doconly_{i}.py").write_text(
            f"def husk_{i}():\n"
            '    """Nothing but this docstring."""\n'
        )
    for i in range(4):
        (root / f"big_{i}.py").write_text("x = 0\n" * 1500)  # 9000 bytes
    for i in range(4):
        (root / f"broken_{i}.py").write_text("def broken(:\n")
    for i in range(4):
        lines = [f"v{j} = {'1' * 70}" for j in range(20)]  # mean ~75 chars
        (root / f"wide_{i}.py").write_text("\n".join(lines) + "\n")
    for i in range(4):
        lines = ["y = 1"] * 20 + ["z = " + "1" * 450]  # one 454-char line
        (root / f"longline_{i}.py").write_text("\n".join(lines) + "\n")
    (root / "garbage_0.py").write_bytes(b"\xff\xfe not text")
    return root


@pytest.fixture(scope="session")
def audited_tree(tmp_path_factory):
    return build_audited_tree(tmp_path_factory.mktemp("audit") / "tree")
