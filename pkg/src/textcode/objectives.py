"""The four modality-relative training objectives.

Each objective is a (loss-mask, attention-regime, input-transform) triple:

* ``text_code_clm``   — next-token loss on the whole sequence, causal.
* ``code_clm``        — loss only on code-body targets (plus the end marker).
* ``corrupt_code_clm``— code_clm over an input whose docstring tokens are
  randomly masked/replaced/kept with 0.8/0.1/0.1 chance.
* ``prefix_code_clm`` — code_clm with bidirectional attention over the
  docstring prefix (signature included for pycodegpt-style inputs); no loss
  on the prefix.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import torch

from .data import (
    CODE,
    Instance,
    PackedSample,
    ROLE_CODE,
    ROLE_DESCR,
    ROLE_DOC,
    ROLE_EOC,
    ROLE_PAD,
    ROLE_SIG,
    ROLE_SOS,
    instance_as_sample,
)
from .model import CodeLM, build_attention_mask, target_modality_for
from .tokenizer import Vocabulary

OBJECTIVES = ("text_code_clm", "code_clm", "corrupt_code_clm", "prefix_code_clm")

_CLI_NAMES = {
    "text-code": "text_code_clm",
    "code": "code_clm",
    "corrupt-code": "corrupt_code_clm",
    "prefix-code": "prefix_code_clm",
}


class ObjectiveError(Exception):
    pass


def objective_from_flag(flag: str) -> str:
    name = _CLI_NAMES.get(flag, flag)
    if name not in OBJECTIVES:
        raise ObjectiveError(f"unknown objective: {flag}")
    return name


@dataclass
class ObjectiveKind:
    name: str
    corruption_prob: float = 0.15
    branch_probs: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def __post_init__(self):
        if self.name not in OBJECTIVES:
            raise ObjectiveError(f"unknown objective: {self.name}")
        if not 0.0 <= self.corruption_prob <= 1.0:
            raise ObjectiveError("corruption_prob must be in [0, 1]")
        if abs(sum(self.branch_probs) - 1.0) > 1e-12:
            raise ObjectiveError("branch probabilities must sum to 1")

    @property
    def regime(self) -> str:
        return "prefix_bidirectional" if self.name == "prefix_code_clm" else "causal"


SampleLike = Union[Instance, PackedSample]


def _as_sample(x: SampleLike) -> PackedSample:
    return instance_as_sample(x) if isinstance(x, Instance) else x


def build_loss_mask(x: SampleLike, kind: ObjectiveKind) -> np.ndarray:
    """Per-token {0,1}: 1 marks tokens that carry a prediction-loss term.

    A marked token at position j is scored from the logits at j-1 of its own
    segment; the first token of a segment is never marked.
    """
    sample = _as_sample(x)
    roles = sample.roles
    seg = sample.segment_ids
    if kind.name == "text_code_clm":
        mask = (roles != ROLE_PAD).astype(np.int64)
        first = np.ones_like(seg, dtype=bool)
        first[1:] = seg[1:] != seg[:-1]
        mask[first] = 0
    else:
        mask = np.isin(roles, (ROLE_CODE, ROLE_EOC)).astype(np.int64)
    return mask


_PREFIX_ROLES = {
    "pangu": (ROLE_DESCR, ROLE_DOC),
    "pycodegpt": (ROLE_SOS, ROLE_SIG, ROLE_DESCR, ROLE_DOC),
}


def prefix_flags(x: SampleLike) -> np.ndarray:
    """Boolean per-token flags marking the bidirectional-attention prefix.

    The prefix is everything before the code-start marker: the docstring for
    pangu-style inputs, the signature and docstring for pycodegpt-style.
    """
    sample = _as_sample(x)
    return np.isin(sample.roles, _PREFIX_ROLES[sample.style])


@dataclass
class CorruptionPlan:
    indices: list[int] = field(default_factory=list)
    replacement: list[tuple[str, int]] = field(default_factory=list)  # (branch, new id)

    def __len__(self) -> int:
        return len(self.indices)


def corruptable_ids(vocab: Vocabulary) -> np.ndarray:
    control = set(vocab.control_tokens)
    return np.array([i for i, t in enumerate(vocab.tokens) if t not in control], dtype=np.int64)


def corrupt_ids(
    ids: np.ndarray,
    roles: np.ndarray,
    kind: ObjectiveKind,
    rng: np.random.Generator,
    vocab: Vocabulary,
    candidates: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, CorruptionPlan]:
    """Corrupt docstring positions per the mask/random/keep branch split."""
    if candidates is None:
        candidates = corruptable_ids(vocab)
    mask_id = vocab.token_id("[MASK]")
    new_ids = ids.copy()
    plan = CorruptionPlan()
    doc_positions = np.flatnonzero(roles == ROLE_DOC)
    selected = doc_positions[rng.random(len(doc_positions)) < kind.corruption_prob]
    p_mask, p_random, _ = kind.branch_probs
    for pos in selected:
        u = rng.random()
        if u < p_mask:
            branch, new = "mask", mask_id
        elif u < p_mask + p_random:
            branch, new = "random", int(candidates[rng.integers(len(candidates))])
        else:
            branch, new = "keep", int(ids[pos])
        new_ids[pos] = new
        plan.indices.append(int(pos))
        plan.replacement.append((branch, new))
    return new_ids, plan


def corrupt_docstring(
    instance: Instance,
    kind: ObjectiveKind,
    rng: np.random.Generator,
    vocab: Vocabulary,
    candidates: Optional[np.ndarray] = None,
) -> tuple[Instance, CorruptionPlan]:
    if kind.name != "corrupt_code_clm":
        raise ObjectiveError("corrupt_docstring applies to corrupt_code_clm only")
    new_ids, plan = corrupt_ids(instance.ids, instance.roles, kind, rng, vocab, candidates)
    out = instance.copy()
    out.ids = new_ids
    return out, plan


def prepare_batch(
    samples: Sequence[PackedSample],
    kind: ObjectiveKind,
    vocab: Optional[Vocabulary] = None,
    rng: Optional[np.random.Generator] = None,
    candidates: Optional[np.ndarray] = None,
) -> dict[str, torch.Tensor]:
    """Stack equal-length samples into model-ready tensors for one objective."""
    ids = np.stack([s.ids for s in samples])
    if kind.name == "corrupt_code_clm" and kind.corruption_prob > 0:
        if vocab is None or rng is None:
            raise ObjectiveError("corruption requires a vocabulary and rng")
        for i, s in enumerate(samples):
            ids[i], _ = corrupt_ids(ids[i], s.roles, kind, rng, vocab, candidates)
    seg = torch.from_numpy(np.stack([s.segment_ids for s in samples]))
    pf = None
    if kind.regime == "prefix_bidirectional":
        pf = torch.from_numpy(np.stack([prefix_flags(s) for s in samples]))
    return {
        "ids": torch.from_numpy(ids),
        "modality": torch.from_numpy(np.stack([s.modality for s in samples])),
        "position_ids": torch.from_numpy(np.stack([s.position_ids for s in samples])),
        "attn_allowed": build_attention_mask(seg, kind.regime, pf),
        "target_modality": torch.from_numpy(np.stack([target_modality_for(s) for s in samples])),
        "loss_mask": torch.from_numpy(np.stack([build_loss_mask(s, kind) for s in samples])),
    }


def loss_from_logits(
    logits: torch.Tensor, ids: torch.Tensor, loss_mask: torch.Tensor
) -> torch.Tensor:
    """Mean NLL of masked target tokens, each scored from the previous
    position's logits."""
    if loss_mask.sum() == 0:
        raise ObjectiveError("loss mask selects no positions")
    logp = torch.log_softmax(logits, dim=-1)
    pred = logp[:, :-1, :]
    targets = ids[:, 1:]
    mask = loss_mask[:, 1:].bool()
    picked = pred.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return -(picked[mask]).mean()


def loss(
    model: CodeLM,
    sample: SampleLike | Sequence[PackedSample],
    kind: ObjectiveKind,
    vocab: Optional[Vocabulary] = None,
    rng: Optional[np.random.Generator] = None,
    candidates: Optional[np.ndarray] = None,
) -> torch.Tensor:
    """Scalar objective loss for one sample or a stacked batch."""
    if isinstance(sample, (Instance, PackedSample)):
        samples = [_as_sample(sample)]
    else:
        samples = [_as_sample(s) for s in sample]
    batch = prepare_batch(samples, kind, vocab, rng, candidates)
    logits = model(
        batch["ids"], batch["modality"], batch["position_ids"],
        batch["attn_allowed"], batch["target_modality"],
    )
    return loss_from_logits(logits, batch["ids"], batch["loss_mask"])
