"""Tokenized, modality-labeled instances and fixed-length packed samples.

Every token carries a role (control marker, docstring, signature, code body)
and a modality (NL for the docstring side, CODE for everything else). Roles
survive packing, so training objectives can rebuild loss masks and prefix
boundaries from a stored dataset without re-tokenizing.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import FormattedPair
from .tokenizer import Vocabulary

# modalities
NL = 0
CODE = 1

# token roles
ROLE_PAD = 0
ROLE_SOS = 1
ROLE_DESCR = 2
ROLE_DOC = 3
ROLE_PYTHON = 4
ROLE_SIG = 5
ROLE_CODE = 6
ROLE_EOC = 7

_NL_ROLES = (ROLE_DESCR, ROLE_DOC)


class DataError(Exception):
    pass


def _role_modality(role: int) -> int:
    return NL if role in _NL_ROLES else CODE


@dataclass
class Instance:
    ids: np.ndarray
    modality: np.ndarray
    roles: np.ndarray
    style: str

    def __len__(self) -> int:
        return len(self.ids)

    def _span(self, role: int) -> tuple[int, int]:
        idx = np.flatnonzero(self.roles == role)
        if len(idx) == 0:
            return (0, 0)
        return (int(idx[0]), int(idx[-1]) + 1)

    @property
    def doc_span(self) -> tuple[int, int]:
        return self._span(ROLE_DOC)

    @property
    def sig_span(self) -> tuple[int, int]:
        return self._span(ROLE_SIG)

    @property
    def code_span(self) -> tuple[int, int]:
        return self._span(ROLE_CODE)

    def copy(self) -> "Instance":
        return Instance(self.ids.copy(), self.modality.copy(), self.roles.copy(), self.style)


def _style_words(pair: FormattedPair) -> list[tuple[str, int]]:
    doc = [(w, ROLE_DOC) for w in pair.docstring.split(" ")]
    sig = [(w, ROLE_SIG) for w in pair.signature.split(" ")]
    code = [(w, ROLE_CODE) for w in pair.code.split(" ")]
    if pair.format_style == "pangu":
        return (
            [("[descr]", ROLE_DESCR)] + doc + [("[python]", ROLE_PYTHON)]
            + sig + code + [("[eoc]", ROLE_EOC)]
        )
    return (
        [("[sos]", ROLE_SOS)] + sig + [("[descr]", ROLE_DESCR)] + doc
        + [("[python]", ROLE_PYTHON)] + code + [("[eoc]", ROLE_EOC)]
    )


def tokenize_pair(pair: FormattedPair, vocab: Vocabulary) -> Instance:
    """Encode a formatted pair word-by-word, labeling every token.

    Word-wise encoding is identical to encoding the rendered text in one go,
    because words are the tokenizer's segmentation unit.
    """
    ids: list[int] = []
    roles: list[int] = []
    for word, role in _style_words(pair):
        word_ids = vocab.encode(word)
        ids.extend(word_ids)
        roles.extend([role] * len(word_ids))
    roles_arr = np.array(roles, dtype=np.int64)
    modality = np.array([_role_modality(r) for r in roles], dtype=np.int64)
    return Instance(
        ids=np.array(ids, dtype=np.int64),
        modality=modality,
        roles=roles_arr,
        style=pair.format_style,
    )


@dataclass
class PackedSample:
    ids: np.ndarray          # (L,)
    position_ids: np.ndarray  # reset to 0 at each segment start
    segment_ids: np.ndarray   # -1 on padding
    modality: np.ndarray
    roles: np.ndarray         # ROLE_PAD on padding
    style: str

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def pad_len(self) -> int:
        return int(np.sum(self.segment_ids < 0))

    @property
    def num_segments(self) -> int:
        return int(self.segment_ids.max()) + 1 if (self.segment_ids >= 0).any() else 0


def _pack_one(instances: list[Instance], context: int, pad_id: int, style: str) -> PackedSample:
    ids = np.full(context, pad_id, dtype=np.int64)
    position_ids = np.zeros(context, dtype=np.int64)
    segment_ids = np.full(context, -1, dtype=np.int64)
    modality = np.full(context, CODE, dtype=np.int64)
    roles = np.full(context, ROLE_PAD, dtype=np.int64)
    cursor = 0
    for seg, inst in enumerate(instances):
        n = len(inst)
        sl = slice(cursor, cursor + n)
        ids[sl] = inst.ids
        position_ids[sl] = np.arange(n)
        segment_ids[sl] = seg
        modality[sl] = inst.modality
        roles[sl] = inst.roles
        cursor += n
    return PackedSample(ids, position_ids, segment_ids, modality, roles, style)


def pack(
    instances: Sequence[Instance], context: int, pad_id: int
) -> list[PackedSample]:
    """Greedy sequential packing: append while it fits, otherwise start a new
    sample with the instance that did not fit."""
    samples: list[PackedSample] = []
    current: list[Instance] = []
    used = 0
    style = instances[0].style if instances else "pangu"
    for inst in instances:
        if len(inst) > context:
            raise DataError(f"instance of length {len(inst)} exceeds context {context}")
        if used + len(inst) > context:
            samples.append(_pack_one(current, context, pad_id, style))
            current, used = [], 0
        current.append(inst)
        used += len(inst)
    if current:
        samples.append(_pack_one(current, context, pad_id, style))
    return samples


def instances_from_pairs(
    pairs: Iterable[FormattedPair],
    vocab: Vocabulary,
    context: int,
) -> tuple[list[Instance], int]:
    """Tokenize pairs, dropping (and counting) instances longer than the context."""
    kept: list[Instance] = []
    dropped = 0
    for pair in pairs:
        inst = tokenize_pair(pair, vocab)
        if len(inst) > context:
            dropped += 1
            continue
        kept.append(inst)
    return kept, dropped


def vocab_hash(vocab: Vocabulary) -> str:
    payload = json.dumps(vocab.to_json(), sort_keys=True).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()[:16]


def save_packed(
    path: Path | str,
    samples: Sequence[PackedSample],
    context: int,
    vhash: str,
    style: str,
    seed: int | None = None,
) -> None:
    header = {"context": context, "vocab_hash": vhash, "style": style, "seed": seed,
              "num_samples": len(samples)}
    np.savez_compressed(
        path,
        header=np.frombuffer(json.dumps(header).encode("utf-8"), dtype=np.uint8),
        ids=np.stack([s.ids for s in samples]),
        position_ids=np.stack([s.position_ids for s in samples]),
        segment_ids=np.stack([s.segment_ids for s in samples]),
        modality=np.stack([s.modality for s in samples]),
        roles=np.stack([s.roles for s in samples]),
    )


def load_packed(path: Path | str) -> tuple[list[PackedSample], dict]:
    with np.load(path) as data:
        header = json.loads(bytes(data["header"]).decode("utf-8"))
        samples = [
            PackedSample(
                ids=data["ids"][i],
                position_ids=data["position_ids"][i],
                segment_ids=data["segment_ids"][i],
                modality=data["modality"][i],
                roles=data["roles"][i],
                style=header["style"],
            )
            for i in range(data["ids"].shape[0])
        ]
    return samples, header


def instance_as_sample(inst: Instance) -> PackedSample:
    """View a single instance as an unpadded one-segment packed sample."""
    n = len(inst)
    return PackedSample(
        ids=inst.ids.copy(),
        position_ids=np.arange(n, dtype=np.int64),
        segment_ids=np.zeros(n, dtype=np.int64),
        modality=inst.modality.copy(),
        roles=inst.roles.copy(),
        style=inst.style,
    )
