"""Corpus pipeline: scan, filter, extract, normalize, deduplicate, format.

Operates on a local tree of ``.py`` files and produces training-ready
docstring/code pairs. Whitespace structure of function bodies is rewritten
with ``[new_line]`` / ``[indent]`` / ``[dedent]`` markers so instances fit on
a single line; :func:`denormalize` inverts the rewrite.
"""

from __future__ import annotations

import ast
import hashlib
import json
import re
import threading
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional

MARK_NEWLINE = "[new_line]"
MARK_INDENT = "[indent]"
MARK_DEDENT = "[dedent]"
CODE_MARKERS = (MARK_NEWLINE, MARK_INDENT, MARK_DEDENT)
# Any of these inside a docstring would break the rendered format's
# injectivity, so such pairs are rejected outright.
RESERVED_MARKERS = CODE_MARKERS + ("[descr]", "[python]", "[eoc]", "[sos]", "[pad]", "[MASK]")

STYLES = ("pangu", "pycodegpt")

INDENT_UNIT = "    "


class CorpusError(Exception):
    pass


class NormalizationError(CorpusError):
    """Raised on inconsistent indentation; carries the offending line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"{message} (line {line})")
        self.line = line


@dataclass
class FilterRules:
    max_size_bytes: int = 1_000_000
    max_mean_line_len: float = 100.0
    max_line_len: int = 1_000


@dataclass
class SourceFile:
    path: str
    text: str
    size_bytes: int


@dataclass
class RawFunction:
    signature_text: str
    docstring_text: Optional[str]
    body_text: str
    source_path: str
    line_span: tuple[int, int]


@dataclass
class FormattedPair:
    docstring: str
    signature: str
    code: str
    format_style: str
    dedup_key: str
    source_path: str = ""

    def to_json(self) -> dict:
        return {
            "docstring": self.docstring,
            "signature": self.signature,
            "code": self.code,
            "source_path": self.source_path,
            "style": self.format_style,
        }


@dataclass
class PipelineStats:
    files_seen: int = 0
    files_kept: int = 0
    rejections: Counter = field(default_factory=Counter)
    functions_extracted: int = 0
    functions_skipped: Counter = field(default_factory=Counter)
    pairs_emitted: int = 0
    duplicates_dropped: int = 0
    rejection_log: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "files_seen": self.files_seen,
            "files_kept": self.files_kept,
            "rejections": dict(self.rejections),
            "functions_extracted": self.functions_extracted,
            "functions_skipped": dict(self.functions_skipped),
            "pairs_emitted": self.pairs_emitted,
            "duplicates_dropped": self.duplicates_dropped,
        }


def _first_failing_rule(text: str, size_bytes: int, rules: FilterRules) -> Optional[str]:
    if size_bytes >= rules.max_size_bytes:
        return "size"
    try:
        ast.parse(text)
    except (SyntaxError, ValueError, RecursionError):
        return "parse"
    lines = text.splitlines()
    if lines:
        mean = sum(len(ln) for ln in lines) / len(lines)
        if mean >= rules.max_mean_line_len:
            return "mean-line"
        if max(len(ln) for ln in lines) >= rules.max_line_len:
            return "max-line"
    return None


def scan_and_filter(
    root: Path | str,
    rules: FilterRules | None = None,
    stats: PipelineStats | None = None,
) -> Iterator[SourceFile]:
    """Yield source files under ``root`` that pass all filter rules.

    Rules are checked in order (size, parsability, mean line length, max line
    length) and the first failure is recorded per rejected file. Unreadable
    files are logged and skipped.
    """
    rules = rules or FilterRules()
    stats = stats if stats is not None else PipelineStats()
    root = Path(root)
    if not root.is_dir():
        raise CorpusError(f"not a directory: {root}")
    for path in sorted(root.rglob("*.py")):
        if not path.is_file():
            continue
        stats.files_seen += 1
        try:
            raw = path.read_bytes()
            text = raw.decode("utf-8")
        except (OSError, UnicodeDecodeError):
            stats.rejections["unreadable"] += 1
            stats.rejection_log.append((str(path), "unreadable"))
            continue
        reason = _first_failing_rule(text, len(raw), rules)
        if reason is not None:
            stats.rejections[reason] += 1
            stats.rejection_log.append((str(path), reason))
            continue
        stats.files_kept += 1
        yield SourceFile(path=str(path), text=text, size_bytes=len(raw))


def _signature_text(node: ast.FunctionDef | ast.AsyncFunctionDef) -> str:
    prefix = "async def" if isinstance(node, ast.AsyncFunctionDef) else "def"
    sig = f"{prefix} {node.name}({ast.unparse(node.args)})"
    if node.returns is not None:
        sig += f" -> {ast.unparse(node.returns)}"
    return sig + ":"


def _walk_functions(body: Iterable[ast.stmt]) -> Iterator[ast.FunctionDef | ast.AsyncFunctionDef]:
    for node in body:
        if isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef)):
            yield node
            yield from _walk_functions(node.body)
        elif isinstance(node, ast.ClassDef):
            yield from _walk_functions(node.body)


def extract_functions(file: SourceFile, stats: PipelineStats | None = None) -> list[RawFunction]:
    """Extract functions (with their docstrings) from a parsable source file.

    Bodies are re-rendered from the syntax tree, which drops comments and
    yields uniform 4-space indentation. Functions whose body is only a
    docstring are skipped.
    """
    stats = stats if stats is not None else PipelineStats()
    try:
        tree = ast.parse(file.text)
    except SyntaxError as exc:
        raise CorpusError(f"unparsable file passed to extract_functions: {file.path}") from exc
    out: list[RawFunction] = []
    for node in _walk_functions(tree.body):
        doc = None
        body = list(node.body)
        if (
            body
            and isinstance(body[0], ast.Expr)
            and isinstance(body[0].value, ast.Constant)
            and isinstance(body[0].value.value, str)
        ):
            doc = body[0].value.value
            body = body[1:]
        if not body:
            stats.functions_skipped["empty-body"] += 1
            continue
        try:
            body_text = "\n".join(ast.unparse(stmt) for stmt in body)
        except (ValueError, RecursionError):
            stats.functions_skipped["unparse-failure"] += 1
            continue
        stats.functions_extracted += 1
        out.append(
            RawFunction(
                signature_text=_signature_text(node),
                docstring_text=doc,
                body_text=body_text,
                source_path=file.path,
                line_span=(node.lineno, node.end_lineno or node.lineno),
            )
        )
    return out


def normalize_whitespace(code: str) -> str:
    """Rewrite a code block onto one line with explicit structure markers.

    Blank lines are dropped; indentation level changes become matching
    ``[indent]`` / ``[dedent]`` markers, closed out at the end so markers
    always balance.
    """
    out: list[str] = []
    stack = [0]
    first = True
    for lineno, raw in enumerate(code.split("\n"), start=1):
        if not raw.strip():
            continue
        stripped = raw.lstrip(" ")
        indent = len(raw) - len(stripped)
        if stripped.startswith("\t") or "\t" in raw[:indent]:
            raise NormalizationError("tab in indentation", lineno)
        if not first:
            out.append(MARK_NEWLINE)
        if indent > stack[-1]:
            stack.append(indent)
            out.append(MARK_INDENT)
        else:
            while indent < stack[-1]:
                stack.pop()
                out.append(MARK_DEDENT)
            if indent != stack[-1]:
                raise NormalizationError("inconsistent dedent", lineno)
        out.append(stripped.rstrip())
        first = False
    while len(stack) > 1:
        stack.pop()
        out.append(MARK_DEDENT)
    return " ".join(out)


_MARKER_SPLIT = re.compile(r" ?(\[(?:new_line|indent|dedent)\]) ?")


def denormalize(normalized: str, indent_unit: str = INDENT_UNIT) -> str:
    """Invert :func:`normalize_whitespace`, emitting real newlines/indentation."""
    level = 0
    line_level = 0
    lines: list[str] = []
    current: list[str] = []

    def flush():
        if current:
            lines.append(indent_unit * line_level + " ".join(current))
            current.clear()

    for part in _MARKER_SPLIT.split(normalized):
        if part == "":
            continue
        if part == MARK_NEWLINE:
            flush()
        elif part == MARK_INDENT:
            level += 1
        elif part == MARK_DEDENT:
            level -= 1
            if level < 0:
                raise CorpusError("unbalanced [dedent]")
        else:
            # indentation of a line is the level in force at its first word
            if not current:
                line_level = level
            current.append(part)
    flush()
    return "\n".join(lines)


def clean_docstring(doc: str) -> str:
    """Collapse whitespace runs to single spaces and trim the ends."""
    return re.sub(r"\s+", " ", doc).strip()


def _dedup_key(docstring: str, signature: str, code: str) -> str:
    payload = "\x00".join((docstring, signature, code)).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()


def format_pair(fn: RawFunction, style: str) -> FormattedPair:
    """Build a formatted training pair from an extracted function.

    The ``code`` field is the body's marker text as it appears after the
    signature: ``[new_line] [indent] ... [dedent]``.
    """
    if style not in STYLES:
        raise CorpusError(f"unknown style: {style}")
    if fn.docstring_text is None:
        raise CorpusError(f"function without docstring: {fn.signature_text}")
    doc = clean_docstring(fn.docstring_text)
    if not doc or any(m in doc for m in RESERVED_MARKERS):
        raise CorpusError(f"unusable docstring for {fn.signature_text}")
    code = f"{MARK_NEWLINE} {MARK_INDENT} {normalize_whitespace(fn.body_text)} {MARK_DEDENT}"
    return FormattedPair(
        docstring=doc,
        signature=fn.signature_text,
        code=code,
        format_style=style,
        dedup_key=_dedup_key(doc, fn.signature_text, code),
        source_path=fn.source_path,
    )


def render_pair(pair: FormattedPair) -> str:
    """Render a pair into its single-line training text for the given style."""
    if pair.format_style == "pangu":
        return f"[descr] {pair.docstring} [python] {pair.signature} {pair.code} [eoc]"
    return f"[sos] {pair.signature} [descr] {pair.docstring} [python] {pair.code} [eoc]"


_PANGU_RE = re.compile(
    r"^\[descr\] (?P<doc>.*?) \[python\] (?P<sig>.*?) (?P<code>\[new_line\] .*) \[eoc\]$"
)
_PYCODEGPT_RE = re.compile(
    r"^\[sos\] (?P<sig>.*?) \[descr\] (?P<doc>.*?) \[python\] (?P<code>\[new_line\] .*) \[eoc\]$"
)


def parse_rendered(text: str, style: str) -> tuple[str, str, str]:
    """Recover (docstring, signature, code) from a rendered pair."""
    pattern = _PANGU_RE if style == "pangu" else _PYCODEGPT_RE
    m = pattern.match(text)
    if m is None:
        raise CorpusError("text does not match the rendered-pair template")
    return m.group("doc"), m.group("sig"), m.group("code")


def deduplicate(
    pairs: Iterable[FormattedPair], stats: PipelineStats | None = None
) -> Iterator[FormattedPair]:
    """First occurrence wins; order of survivors is the input order."""
    stats = stats if stats is not None else PipelineStats()
    seen: set[str] = set()
    lock = threading.Lock()
    for pair in pairs:
        with lock:
            if pair.dedup_key in seen:
                stats.duplicates_dropped += 1
                continue
            seen.add(pair.dedup_key)
        stats.pairs_emitted += 1
        yield pair


def extract_pairs(
    root: Path | str,
    style: str,
    rules: FilterRules | None = None,
    workers: int = 1,
    stats: PipelineStats | None = None,
) -> Iterator[FormattedPair]:
    """Full pipeline: scan -> extract -> format -> dedup.

    Extraction fans out over a bounded thread pool when ``workers > 1``;
    deduplication stays the single serialization point.
    """
    stats = stats if stats is not None else PipelineStats()

    def file_pairs(src: SourceFile) -> list[FormattedPair]:
        out = []
        for fn in extract_functions(src, stats):
            if fn.docstring_text is None:
                stats.functions_skipped["no-docstring"] += 1
                continue
            try:
                out.append(format_pair(fn, style))
            except (CorpusError, NormalizationError):
                stats.functions_skipped["format-failure"] += 1
        return out

    files = scan_and_filter(root, rules, stats)
    if workers <= 1:
        gen = (pair for src in files for pair in file_pairs(src))
    else:

        def fan_out():
            with ThreadPoolExecutor(max_workers=workers) as pool:
                for batch in pool.map(file_pairs, files):
                    yield from batch

        gen = fan_out()
    yield from deduplicate(gen, stats)


def write_pairs_jsonl(pairs: Iterable[FormattedPair], out_path: Path | str) -> int:
    n = 0
    with open(out_path, "w", encoding="utf-8") as fh:
        for pair in pairs:
            fh.write(json.dumps(pair.to_json(), ensure_ascii=False) + "\n")
            n += 1
    return n


def read_pairs_jsonl(path: Path | str) -> list[FormattedPair]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            pairs.append(
                FormattedPair(
                    docstring=obj["docstring"],
                    signature=obj["signature"],
                    code=obj["code"],
                    format_style=obj["style"],
                    dedup_key=_dedup_key(obj["docstring"], obj["signature"], obj["code"]),
                    source_path=obj.get("source_path", ""),
                )
            )
    return pairs
