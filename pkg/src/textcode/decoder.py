"""Autoregressive generation: prompt assembly per style, greedy and
temperature/nucleus sampling, stop handling, prefix-bidirectional attention
over the prompt for checkpoints trained that way.

Prompts end with the code-start marker (pycodegpt style) or the signature
(pangu style), optionally followed by already-given solution lines for
incremental evaluation. Every generated token is embedded and scored through
the CODE pathway.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .corpus import clean_docstring
from .data import (
    CODE,
    NL,
    ROLE_CODE,
    ROLE_DESCR,
    ROLE_DOC,
    ROLE_PYTHON,
    ROLE_SIG,
    ROLE_SOS,
)
from .model import CodeLM, build_attention_mask
from .tokenizer import Vocabulary


class DecodeError(Exception):
    pass


@dataclass
class Prompt:
    description: str
    signature: str
    style: str = "pangu"
    prepended_code: str = ""  # marker-normalized partial solution

    def __post_init__(self):
        if not self.description.strip():
            raise DecodeError("prompt description must be non-empty")


@dataclass
class DecodeConfig:
    temperature: float = 0.95
    nucleus_p: float = 0.8
    max_new_tokens: int = 128
    num_samples: int = 1
    seed: int = 0
    greedy: bool = False

    def __post_init__(self):
        if self.temperature <= 0:
            raise DecodeError("temperature must be positive")
        if not 0 < self.nucleus_p <= 1:
            raise DecodeError("nucleus p must be in (0, 1]")
        if self.num_samples < 1:
            raise DecodeError("num_samples must be >= 1")


@dataclass
class RenderedPrompt:
    ids: np.ndarray
    modality: np.ndarray
    roles: np.ndarray
    prefix_len: int
    text: str


def render_prompt(prompt: Prompt, vocab: Vocabulary) -> RenderedPrompt:
    """Tokenize a prompt in the model's training format, up to the code-start
    marker (plus any prepended solution lines)."""
    desc = clean_docstring(prompt.description)
    if not desc:
        raise DecodeError("prompt description is empty after cleanup")
    if prompt.style == "pangu":
        words = (
            [("[descr]", ROLE_DESCR)]
            + [(w, ROLE_DOC) for w in desc.split(" ")]
            + [("[python]", ROLE_PYTHON)]
            + [(w, ROLE_SIG) for w in prompt.signature.split(" ")]
        )
    elif prompt.style == "pycodegpt":
        words = (
            [("[sos]", ROLE_SOS)]
            + [(w, ROLE_SIG) for w in prompt.signature.split(" ")]
            + [("[descr]", ROLE_DESCR)]
            + [(w, ROLE_DOC) for w in desc.split(" ")]
            + [("[python]", ROLE_PYTHON)]
        )
    else:
        raise DecodeError(f"unknown style: {prompt.style}")
    if prompt.prepended_code:
        words += [(w, ROLE_CODE) for w in prompt.prepended_code.split(" ")]
    ids: list[int] = []
    roles: list[int] = []
    for word, role in words:
        for idx in vocab.encode(word):
            ids.append(idx)
            roles.append(role)
    roles_arr = np.array(roles, dtype=np.int64)
    modality = np.where(np.isin(roles_arr, (ROLE_DESCR, ROLE_DOC)), NL, CODE).astype(np.int64)
    text = " ".join(w for w, _ in words)
    return RenderedPrompt(
        ids=np.array(ids, dtype=np.int64),
        modality=modality,
        roles=roles_arr,
        prefix_len=len(ids),
        text=text,
    )


def nucleus_set(probs: np.ndarray, p: float) -> np.ndarray:
    """Smallest probability-sorted index set with cumulative mass >= p
    (boundary token included; ties broken by ascending id)."""
    order = np.lexsort((np.arange(len(probs)), -probs))
    cum = np.cumsum(probs[order])
    cut = int(np.searchsorted(cum, p, side="left")) + 1
    return np.sort(order[:cut])


def sample_next(
    logits: np.ndarray, cfg: DecodeConfig, rng: Optional[np.random.Generator]
) -> int:
    if not np.all(np.isfinite(logits)):
        raise DecodeError("non-finite logits")
    if cfg.greedy:
        return int(np.argmax(logits))
    scaled = logits.astype(np.float64) / cfg.temperature
    scaled -= scaled.max()
    probs = np.exp(scaled)
    probs /= probs.sum()
    keep = nucleus_set(probs, cfg.nucleus_p)
    kept = probs[keep]
    kept /= kept.sum()
    return int(keep[rng.choice(len(keep), p=kept)])


def sample_rng(seed: int, task_id: str, sample_index: int) -> np.random.Generator:
    """Independent per-sample substream so any one sample is reproducible."""
    task_key = int.from_bytes(task_id.encode("utf-8")[-8:] or b"\0", "big")
    return np.random.default_rng([seed, task_key, sample_index])


@dataclass
class Completion:
    token_ids: list[int]
    marker_text: str
    stopped: bool


def _generate_one(
    model: CodeLM,
    rendered: RenderedPrompt,
    vocab: Vocabulary,
    cfg: DecodeConfig,
    rng: Optional[np.random.Generator],
    regime: str,
) -> Completion:
    eoc = vocab.token_id("[eoc]")
    context = model.cfg.context
    if len(rendered.ids) >= context and cfg.max_new_tokens > 0:
        raise DecodeError("prompt fills the model context; nothing can be generated")
    ids = list(rendered.ids)
    modality = list(rendered.modality)
    generated: list[int] = []
    stopped = False
    prefix = rendered.prefix_len if regime == "prefix_bidirectional" else 0
    with torch.no_grad():
        for _ in range(cfg.max_new_tokens):
            length = len(ids)
            seg = torch.zeros((1, length), dtype=torch.long)
            pf = None
            if regime == "prefix_bidirectional":
                flags = torch.zeros((1, length), dtype=torch.bool)
                flags[0, :prefix] = True
                pf = flags
            allowed = build_attention_mask(seg, regime, pf)
            ids_t = torch.tensor([ids], dtype=torch.long)
            mod_t = torch.tensor([modality], dtype=torch.long)
            pos_t = torch.arange(length, dtype=torch.long).unsqueeze(0)
            tmod = torch.full((1, length), CODE, dtype=torch.long)
            logits = model(ids_t, mod_t, pos_t, allowed, tmod)
            nxt = sample_next(logits[0, -1].numpy(), cfg, rng)
            if nxt == eoc:
                stopped = True
                break
            generated.append(nxt)
            ids.append(nxt)
            modality.append(CODE)
            if len(ids) >= context:
                break
    return Completion(
        token_ids=generated,
        marker_text=vocab.decode(generated).lstrip(" "),
        stopped=stopped,
    )


def generate(
    model: CodeLM,
    prompt: Prompt,
    vocab: Vocabulary,
    cfg: DecodeConfig,
    task_id: str = "",
    regime: str = "causal",
) -> list[Completion]:
    """Generate ``num_samples`` completions; the stop token is never included
    in the returned text."""
    model.eval()
    rendered = render_prompt(prompt, vocab)
    out = []
    for i in range(cfg.num_samples):
        rng = None if cfg.greedy else sample_rng(cfg.seed, task_id or prompt.signature, i)
        out.append(_generate_one(model, rendered, vocab, cfg, rng, regime))
    return out
