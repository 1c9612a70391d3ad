"""Decoder-only transformer with modality-relative embedding layouts.

Three layouts: ``shared`` (one table), ``pes`` (overlay rows for a separation
set of language-specific tokens, used at CODE positions), and ``fes`` (a full
second table for CODE positions). Separation is applied to an already-trained
shared model by copying rows, so the separated model is forward-identical at
copy time. Attention supports causal, prefix-bidirectional, and packed
segment-blocked regimes; the output head is tied to the embedding table of
the *target* position's modality by default.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .data import CODE, PackedSample
from .tokenizer import SeparationSet

SEPARATION_MODES = ("shared", "pes", "fes")
REGIMES = ("causal", "prefix_bidirectional")


class ModelError(Exception):
    pass


@dataclass
class ModelConfig:
    layers: int = 2
    model_dim: int = 64
    ffn_dim: int = 256
    heads: int = 4
    context: int = 256
    vocab_size: int = 512
    separation: str = "shared"
    tie_output: bool = True
    init_std: float = 0.02

    def __post_init__(self):
        if self.model_dim % self.heads != 0:
            raise ModelError("model_dim must be divisible by heads")
        if self.separation not in SEPARATION_MODES:
            raise ModelError(f"unknown separation mode: {self.separation}")
        if self.context < 1:
            raise ModelError("context must be >= 1")


PRESETS = {
    "toy": dict(layers=2, model_dim=64, ffn_dim=256, heads=4, context=256),
    "small": dict(layers=4, model_dim=128, ffn_dim=512, heads=4, context=512),
}


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.heads = cfg.heads
        self.head_dim = cfg.model_dim // cfg.heads
        self.ln1 = nn.LayerNorm(cfg.model_dim)
        self.qkv = nn.Linear(cfg.model_dim, 3 * cfg.model_dim)
        self.proj = nn.Linear(cfg.model_dim, cfg.model_dim)
        self.ln2 = nn.LayerNorm(cfg.model_dim)
        self.fc1 = nn.Linear(cfg.model_dim, cfg.ffn_dim)
        self.fc2 = nn.Linear(cfg.ffn_dim, cfg.model_dim)

    def forward(self, x: torch.Tensor, mask_add: torch.Tensor) -> torch.Tensor:
        b, l, d = x.shape
        h = self.ln1(x)
        q, k, v = self.qkv(h).split(d, dim=-1)
        q = q.view(b, l, self.heads, self.head_dim).transpose(1, 2)
        k = k.view(b, l, self.heads, self.head_dim).transpose(1, 2)
        v = v.view(b, l, self.heads, self.head_dim).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / (self.head_dim ** 0.5)
        att = att + mask_add
        att = torch.softmax(att, dim=-1)
        out = (att @ v).transpose(1, 2).reshape(b, l, d)
        x = x + self.proj(out)
        h2 = self.ln2(x)
        return x + self.fc2(torch.nn.functional.gelu(self.fc1(h2)))


class CodeLM(nn.Module):
    def __init__(self, cfg: ModelConfig, separation_set: Optional[SeparationSet] = None):
        super().__init__()
        self.cfg = cfg
        if cfg.separation == "pes" and separation_set is None:
            raise ModelError("pes separation requires a separation set")
        self.base_embed = nn.Embedding(cfg.vocab_size, cfg.model_dim)
        self.pos_embed = nn.Embedding(cfg.context, cfg.model_dim)
        if cfg.separation == "fes":
            self.overlay_embed = nn.Embedding(cfg.vocab_size, cfg.model_dim)
            self.register_buffer("sep_ids", torch.empty(0, dtype=torch.long))
        elif cfg.separation == "pes":
            sep_ids = torch.tensor(separation_set.sorted_ids(), dtype=torch.long)
            if len(sep_ids) and int(sep_ids.max()) >= cfg.vocab_size:
                raise ModelError("separation set id out of vocabulary range")
            self.overlay_embed = nn.Embedding(max(len(sep_ids), 1), cfg.model_dim)
            self.register_buffer("sep_ids", sep_ids)
        else:
            self.overlay_embed = None
            self.register_buffer("sep_ids", torch.empty(0, dtype=torch.long))
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.layers))
        self.ln_f = nn.LayerNorm(cfg.model_dim)
        self.head = None if cfg.tie_output else nn.Linear(cfg.model_dim, cfg.vocab_size, bias=False)

    # -- embedding tables ---------------------------------------------------

    def embedding_matrices(self) -> tuple[torch.Tensor, torch.Tensor]:
        """(NL table, CODE table), each vocab_size x model_dim."""
        base = self.base_embed.weight
        if self.cfg.separation == "shared":
            return base, base
        if self.cfg.separation == "fes":
            return base, self.overlay_embed.weight
        if len(self.sep_ids) == 0:
            return base, base
        code = base.index_copy(0, self.sep_ids, self.overlay_embed.weight)
        return base, code

    def embedding_row_count(self) -> int:
        n = self.base_embed.num_embeddings
        if self.cfg.separation == "fes":
            n += self.overlay_embed.num_embeddings
        elif self.cfg.separation == "pes":
            n += len(self.sep_ids)
        return n

    def embed(
        self, ids: torch.Tensor, modality: torch.Tensor, position_ids: torch.Tensor
    ) -> torch.Tensor:
        if int(ids.max()) >= self.cfg.vocab_size or int(ids.min()) < 0:
            raise ModelError("token id out of range")
        e_nl, e_code = self.embedding_matrices()
        x = torch.where((modality == CODE).unsqueeze(-1), e_code[ids], e_nl[ids])
        return x + self.pos_embed(position_ids)

    # -- forward --------------------------------------------------------------

    def forward(
        self,
        ids: torch.Tensor,
        modality: torch.Tensor,
        position_ids: torch.Tensor,
        attn_allowed: torch.Tensor,
        target_modality: torch.Tensor,
    ) -> torch.Tensor:
        """Per-position logits over the vocabulary.

        ``attn_allowed`` is a boolean (B, L, L) matrix of permitted key
        positions per query; ``target_modality`` selects the output table per
        position (the modality of the token being predicted there).
        """
        x = self.embed(ids, modality, position_ids)
        neg = torch.finfo(x.dtype).min
        mask_add = torch.where(
            attn_allowed.unsqueeze(1), torch.zeros((), dtype=x.dtype), torch.full((), neg, dtype=x.dtype)
        )
        for i, block in enumerate(self.blocks):
            x = block(x, mask_add)
            if not torch.isfinite(x).all():
                raise ModelError(f"non-finite activation after layer {i}")
        x = self.ln_f(x)
        if self.head is not None:
            return self.head(x)
        e_nl, e_code = self.embedding_matrices()
        logits_nl = x @ e_nl.t()
        logits_code = x @ e_code.t()
        return torch.where((target_modality == CODE).unsqueeze(-1), logits_code, logits_nl)


def init_model(
    cfg: ModelConfig, seed: int = 0, separation_set: Optional[SeparationSet] = None
) -> CodeLM:
    """Deterministic initialization: normal(0, init_std) weights, standard
    LayerNorm/bias init, in named-parameter order."""
    model = CodeLM(cfg, separation_set)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, param in model.named_parameters():
            if "ln" in name and name.endswith("weight"):
                param.fill_(1.0)
            elif name.endswith("bias"):
                param.zero_()
            else:
                param.normal_(0.0, cfg.init_std, generator=gen)
    return model


def separate_embeddings(
    model: CodeLM, mode: str, separation_set: Optional[SeparationSet] = None
) -> CodeLM:
    """Re-layout a shared-embedding model: overlay rows copy the base rows.

    Forward outputs of the separated model equal the shared model on any
    input at copy time.
    """
    if model.cfg.separation != "shared":
        raise ModelError("separate_embeddings expects a shared-mode model")
    if mode == "shared":
        new = CodeLM(model.cfg, None)
        new.load_state_dict(model.state_dict())
        return new
    if mode not in ("pes", "fes"):
        raise ModelError(f"unknown separation mode: {mode}")
    if mode == "pes" and separation_set is None:
        raise ModelError("pes separation requires a separation set")
    cfg = ModelConfig(**{**asdict(model.cfg), "separation": mode})
    new = CodeLM(cfg, separation_set)
    with torch.no_grad():
        for name, param in model.named_parameters():
            dict(new.named_parameters())[name].copy_(param)
        if mode == "fes":
            new.overlay_embed.weight.copy_(model.base_embed.weight)
        elif len(new.sep_ids):
            new.overlay_embed.weight.copy_(model.base_embed.weight[new.sep_ids])
    return new


# -- attention masks ---------------------------------------------------------


def build_attention_mask(
    segment_ids: torch.Tensor,
    kind: str = "causal",
    prefix_flags: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Boolean allowed-attention matrix for one sample.

    Causal: j <= i within the same segment. Prefix-bidirectional: prefix
    positions additionally attend forward within the prefix of their own
    segment. Padding attends only to itself and is attended by nobody else.
    """
    if kind not in REGIMES:
        raise ModelError(f"unknown attention regime: {kind}")
    seg = segment_ids
    length = seg.shape[-1]
    live = seg >= 0
    same = (seg.unsqueeze(-1) == seg.unsqueeze(-2)) & live.unsqueeze(-1) & live.unsqueeze(-2)
    idx = torch.arange(length, device=seg.device)
    causal = idx.unsqueeze(-1) >= idx.unsqueeze(-2)
    allowed = same & causal
    if kind == "prefix_bidirectional":
        if prefix_flags is None:
            raise ModelError("prefix_bidirectional requires prefix flags")
        pf = prefix_flags.bool()
        allowed = allowed | (same & pf.unsqueeze(-1) & pf.unsqueeze(-2))
    eye = torch.eye(length, dtype=torch.bool, device=seg.device)
    return allowed | eye


def target_modality_for(sample: PackedSample) -> np.ndarray:
    """Modality of the token each position predicts; CODE at segment ends
    (generation always continues in code)."""
    mod = sample.modality
    seg = sample.segment_ids
    out = np.full_like(mod, CODE)
    same = (seg[1:] == seg[:-1]) & (seg[1:] >= 0)
    out[:-1] = np.where(same, mod[1:], CODE)
    return out


def forward_sample(
    model: CodeLM,
    sample: PackedSample,
    kind: str = "causal",
    prefix_flags: Optional[np.ndarray] = None,
) -> torch.Tensor:
    """Convenience single-sample forward; returns (L, vocab) logits."""
    dtype = next(model.parameters()).dtype
    ids = torch.from_numpy(np.asarray(sample.ids)).unsqueeze(0)
    modality = torch.from_numpy(np.asarray(sample.modality)).unsqueeze(0)
    pos = torch.from_numpy(np.asarray(sample.position_ids)).unsqueeze(0)
    seg = torch.from_numpy(np.asarray(sample.segment_ids)).unsqueeze(0)
    pf = None if prefix_flags is None else torch.from_numpy(np.asarray(prefix_flags)).unsqueeze(0)
    allowed = build_attention_mask(seg, kind, pf)
    tmod = torch.from_numpy(target_modality_for(sample)).unsqueeze(0)
    logits = model(ids, modality, pos, allowed, tmod)
    return logits[0]


# -- checkpoint io ------------------------------------------------------------

_MAGIC = b"TXCK"


def write_sections(path: Path | str, header: dict, arrays: dict[str, np.ndarray]) -> None:
    """Self-describing binary: magic, JSON header, named little-endian blobs."""
    sections = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype == np.float32:
            dtype = "<f4"
        elif arr.dtype == np.float64:
            dtype = "<f8"
        elif arr.dtype == np.int64:
            dtype = "<i8"
        else:
            raise ModelError(f"unsupported section dtype: {arr.dtype}")
        blob = arr.astype(dtype).tobytes()
        sections.append(
            {"name": name, "shape": list(arr.shape), "dtype": dtype, "offset": offset,
             "nbytes": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    head = json.dumps({"header": header, "sections": sections}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)


def read_sections(path: Path | str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ModelError(f"not a checkpoint file: {path}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        meta = json.loads(fh.read(hlen).decode("utf-8"))
        base = fh.tell()
        arrays = {}
        for sec in meta["sections"]:
            fh.seek(base + sec["offset"])
            buf = fh.read(sec["nbytes"])
            arrays[sec["name"]] = np.frombuffer(buf, dtype=sec["dtype"]).reshape(sec["shape"]).copy()
    return meta["header"], arrays


def save_checkpoint(
    path: Path | str,
    model: CodeLM,
    meta: Optional[dict] = None,
    extra_arrays: Optional[dict[str, np.ndarray]] = None,
) -> None:
    header = {
        "config": asdict(model.cfg),
        "separation_ids": [int(i) for i in model.sep_ids.tolist()],
        "meta": meta or {},
    }
    arrays = {
        f"param.{name}": p.detach().cpu().numpy().astype(np.float32)
        for name, p in model.named_parameters()
    }
    if extra_arrays:
        arrays.update(extra_arrays)
    write_sections(path, header, arrays)


def load_checkpoint(path: Path | str) -> tuple[CodeLM, dict, dict[str, np.ndarray]]:
    """Returns (model, meta, extra arrays not belonging to the model)."""
    header, arrays = read_sections(path)
    cfg = ModelConfig(**header["config"])
    sep = SeparationSet(frozenset(header["separation_ids"])) if cfg.separation == "pes" else None
    model = CodeLM(cfg, sep)
    state = {}
    extra = {}
    for name, arr in arrays.items():
        if name.startswith("param."):
            state[name[len("param."):]] = torch.from_numpy(arr)
        else:
            extra[name] = arr
    expected = set(dict(model.named_parameters()))
    if set(state) != expected:
        raise ModelError("checkpoint parameter names do not match the model config")
    model.load_state_dict(state, strict=False)
    return model, header["meta"], extra
