"""Subword vocabulary with protected control symbols and separation sets.

A small deterministic byte-pair trainer: words are split on U+0020 and
prefixed with the word-boundary marker ``▁``; the most frequent adjacent
symbol pair is merged until the target size is reached. Control tokens are
atomic and never split. Characters outside the trained alphabet fall back to
byte tokens, so encoding never fails.
"""

from __future__ import annotations

import builtins as _builtins
import json
import keyword
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

WORD_MARK = "▁"  # ▁

DEFAULT_CONTROL_TOKENS = (
    "[pad]",
    "[sos]",
    "[descr]",
    "[python]",
    "[eoc]",
    "[new_line]",
    "[indent]",
    "[dedent]",
    "[MASK]",
)

_BYTE_TOKENS = tuple(f"<0x{i:02X}>" for i in range(256))


class TokenizerError(Exception):
    pass


@dataclass
class Vocabulary:
    tokens: list[str]
    merges: list[tuple[str, str]]
    control_tokens: tuple[str, ...] = DEFAULT_CONTROL_TOKENS
    ids: dict[str, int] = field(init=False, repr=False)
    _merge_ranks: dict[tuple[str, str], int] = field(init=False, repr=False)
    _control_re: re.Pattern = field(init=False, repr=False)
    _byte_ids: list[int] = field(init=False, repr=False)
    _word_cache: dict[str, tuple[int, ...]] = field(init=False, repr=False)

    def __post_init__(self):
        self.ids = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.ids) != len(self.tokens):
            raise TokenizerError("duplicate tokens in vocabulary")
        missing = [c for c in self.control_tokens if c not in self.ids]
        if missing:
            raise TokenizerError(f"control tokens missing from vocabulary: {missing}")
        self._merge_ranks = {pair: i for i, pair in enumerate(self.merges)}
        self._control_re = re.compile(
            "(" + "|".join(re.escape(c) for c in self.control_tokens) + ")"
        )
        self._byte_ids = [self.ids[t] for t in _BYTE_TOKENS]
        self._word_cache = {}

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self.ids["[pad]"]

    def token_id(self, token: str) -> int:
        try:
            return self.ids[token]
        except KeyError:
            raise TokenizerError(f"unknown token: {token!r}") from None

    def is_control_id(self, idx: int) -> bool:
        return self.tokens[idx] in set(self.control_tokens)

    # -- encoding ---------------------------------------------------------

    def _bpe(self, symbols: list[str]) -> list[str]:
        while len(symbols) > 1:
            best_rank, best_i = None, None
            for i in range(len(symbols) - 1):
                rank = self._merge_ranks.get((symbols[i], symbols[i + 1]))
                if rank is not None and (best_rank is None or rank < best_rank):
                    best_rank, best_i = rank, i
            if best_i is None:
                break
            symbols = (
                symbols[:best_i]
                + [symbols[best_i] + symbols[best_i + 1]]
                + symbols[best_i + 2 :]
            )
        return symbols

    def _encode_fragment(self, fragment: str, word_start: bool) -> list[int]:
        symbols = ([WORD_MARK] if word_start else []) + list(fragment)
        out: list[int] = []
        for sym in self._bpe(symbols):
            idx = self.ids.get(sym)
            if idx is not None:
                out.append(idx)
            else:
                out.extend(self._byte_ids[b] for b in sym.encode("utf-8"))
        return out

    def _encode_word(self, word: str) -> tuple[int, ...]:
        cached = self._word_cache.get(word)
        if cached is not None:
            return cached
        parts = self._control_re.split(word)
        ids: list[int] = []
        at_start = True
        for part in parts:
            if part == "" :
                continue
            if part in self.ids and part in set(self.control_tokens):
                ids.append(self.ids[part])
                at_start = False
            else:
                ids.extend(self._encode_fragment(part, word_start=at_start))
                at_start = False
        if not ids:  # empty word: a bare boundary marker (preserves runs of spaces)
            ids = self._encode_fragment("", word_start=True)
        self._word_cache[word] = tuple(ids)
        return self._word_cache[word]

    def encode(self, text: str) -> list[int]:
        if text == "":
            return []
        out: list[int] = []
        for word in text.split(" "):
            out.extend(self._encode_word(word))
        return out

    def decode(self, ids: Sequence[int]) -> str:
        control = set(self.control_tokens)
        pieces: list[str] = []
        byte_buf: list[int] = []
        byte_set = set(_BYTE_TOKENS)

        def flush_bytes():
            if byte_buf:
                pieces.append(bytes(byte_buf).decode("utf-8", errors="replace"))
                byte_buf.clear()

        first = True
        for idx in ids:
            tok = self.tokens[idx]
            if tok in byte_set:
                byte_buf.append(int(tok[3:5], 16))
                continue
            flush_bytes()
            if tok in control:
                pieces.append(tok if first else " " + tok)
            elif tok.startswith(WORD_MARK):
                body = tok[len(WORD_MARK) :]
                pieces.append(body if first else " " + body)
            else:
                pieces.append(tok)
            first = False
        flush_bytes()
        return "".join(pieces)

    # -- persistence ------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "tokens": self.tokens,
            "merges": [list(m) for m in self.merges],
            "control_tokens": list(self.control_tokens),
        }

    def save(self, path: Path | str) -> None:
        Path(path).write_text(json.dumps(self.to_json(), ensure_ascii=False), encoding="utf-8")

    @classmethod
    def load(cls, path: Path | str) -> "Vocabulary":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            tokens=obj["tokens"],
            merges=[tuple(m) for m in obj["merges"]],
            control_tokens=tuple(obj["control_tokens"]),
        )


def train_vocabulary(
    corpus: Iterable[str],
    target_size: int,
    control: Sequence[str] = DEFAULT_CONTROL_TOKENS,
) -> Vocabulary:
    """Learn byte-pair merges from a text stream.

    The final vocabulary is exactly ``target_size`` tokens: control symbols,
    the 256 byte-fallback tokens, the corpus character alphabet, and merged
    symbols in learned order. Fully deterministic; frequency ties break
    lexicographically.
    """
    control = tuple(control)
    control_re = re.compile("(" + "|".join(re.escape(c) for c in control) + ")")
    control_set = set(control)

    word_freq: Counter[str] = Counter()
    for text in corpus:
        for word in text.split(" "):
            for part in control_re.split(word):
                if part and part not in control_set:
                    word_freq[part] += 1

    alphabet = sorted({ch for w in word_freq for ch in w} | {WORD_MARK})
    base = list(control) + list(_BYTE_TOKENS) + [c for c in alphabet if c not in control_set]
    base = list(dict.fromkeys(base))
    if target_size < len(base):
        raise TokenizerError(
            f"target_size {target_size} below minimum {len(base)} "
            "(control symbols + byte alphabet + corpus characters)"
        )

    # word -> list of current symbols, weighted by frequency
    words: list[tuple[list[str], int]] = [
        ([WORD_MARK] + list(w), f) for w, f in sorted(word_freq.items())
    ]
    merges: list[tuple[str, str]] = []
    tokens = list(base)
    existing = set(tokens)

    while len(tokens) < target_size:
        pair_freq: Counter[tuple[str, str]] = Counter()
        for symbols, f in words:
            for a, b in zip(symbols, symbols[1:]):
                pair_freq[(a, b)] += f
        candidates = [
            (pair, f) for pair, f in pair_freq.items() if (pair[0] + pair[1]) not in existing
        ]
        if not candidates:
            raise TokenizerError(
                f"corpus too small to reach target_size {target_size}; "
                f"achievable size is {len(tokens)}"
            )
        best = min(candidates, key=lambda item: (-item[1], item[0]))[0]
        merged = best[0] + best[1]
        merges.append(best)
        tokens.append(merged)
        existing.add(merged)
        for symbols, _ in words:
            i = 0
            while i < len(symbols) - 1:
                if symbols[i] == best[0] and symbols[i + 1] == best[1]:
                    symbols[i : i + 2] = [merged]
                else:
                    i += 1

    return Vocabulary(tokens=tokens, merges=merges, control_tokens=control)


# -- separation set --------------------------------------------------------

# Common standard-type method names; the construction recipe covers grammar
# keywords and builtins, but code-specific usage also shows up for these.
DEFAULT_EXTRA_TOKENS = (
    "join", "split", "strip", "append", "extend", "insert", "remove", "pop",
    "get", "items", "keys", "values", "update", "add", "format", "replace",
    "startswith", "endswith", "lower", "upper", "read", "write", "close",
)


def default_keywords() -> list[str]:
    return sorted(set(keyword.kwlist) | set(keyword.softkwlist))


def default_builtins() -> list[str]:
    return sorted(n for n in dir(_builtins) if not n.startswith("_"))


@dataclass
class SeparationSet:
    token_ids: frozenset[int]

    def __contains__(self, idx: int) -> bool:
        return idx in self.token_ids

    def __len__(self) -> int:
        return len(self.token_ids)

    def sorted_ids(self) -> list[int]:
        return sorted(self.token_ids)

    def save(self, path: Path | str) -> None:
        Path(path).write_text(json.dumps(self.sorted_ids()), encoding="utf-8")

    @classmethod
    def load(cls, path: Path | str) -> "SeparationSet":
        return cls(frozenset(json.loads(Path(path).read_text(encoding="utf-8"))))


def build_separation_set(
    vocab: Vocabulary,
    keywords: Sequence[str] | None = None,
    builtins: Sequence[str] | None = None,
    extra: Sequence[str] = DEFAULT_EXTRA_TOKENS,
) -> SeparationSet:
    """Flag vocabulary tokens whose surface form is a language-specific word.

    A token qualifies iff, after stripping the word-boundary marker, it
    exactly equals a keyword, builtin, or extra entry. Control tokens are
    excluded. Keywords that the vocabulary splits into several pieces are
    simply absent (their sub-pieces are never separated).
    """
    keywords = default_keywords() if keywords is None else list(keywords)
    builtins_ = default_builtins() if builtins is None else list(builtins)
    if not keywords or not builtins_:
        raise TokenizerError("keyword and builtin lists must be non-empty")
    wanted = set(keywords) | set(builtins_) | set(extra)
    control = set(vocab.control_tokens)
    ids = set()
    for idx, tok in enumerate(vocab.tokens):
        if tok in control:
            continue
        surface = tok[len(WORD_MARK):] if tok.startswith(WORD_MARK) else tok
        if surface in wanted:
            ids.add(idx)
    return SeparationSet(frozenset(ids))
