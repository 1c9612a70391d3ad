"""Optimization loop: Adam with decoupled weight decay, cosine schedule with
linear warm-up, global-norm gradient clipping, checkpoint cadence.

Two phases share this loop: initial shared-embedding training ("agnostic")
and continued pair-only training with a chosen objective and embedding
layout ("relative"). The step counter and schedule restart per phase.
Determinism: data order and corruption draws are derived from
(seed, epoch, step), so an interrupted run resumed from a checkpoint
reproduces the uninterrupted trajectory bit-exactly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .data import Instance, pack
from .model import CodeLM, load_checkpoint, save_checkpoint
from .objectives import ObjectiveKind, corruptable_ids, loss as objective_loss
from .tokenizer import Vocabulary


class TrainerError(Exception):
    pass


class DivergenceError(TrainerError):
    pass


@dataclass
class OptimizerConfig:
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.01
    max_lr: float = 1e-3
    min_lr: float = 1e-4
    warmup_fraction: float = 0.01
    clip_norm: float = 1.0
    epsilon: float = 1e-8

    def __post_init__(self):
        if not 0 < self.min_lr <= self.max_lr:
            raise TrainerError("require 0 < min_lr <= max_lr")
        if self.clip_norm <= 0:
            raise TrainerError("clip_norm must be positive")


@dataclass
class TrainConfig:
    epochs: int = 1
    batch_size: int = 8
    context: int = 256
    seed: int = 0
    phase: str = "relative"
    max_steps: Optional[int] = None
    checkpoint_every: Optional[int] = None
    checkpoint_dir: Optional[str] = None
    log_path: Optional[str] = None


def lr_at(step: int, total_steps: int, cfg: OptimizerConfig) -> float:
    """Linear ramp 0 -> max_lr over the warm-up window, then cosine decay to
    min_lr at total_steps."""
    if total_steps <= 0:
        raise TrainerError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise TrainerError(f"step {step} outside [0, {total_steps}]")
    warmup = cfg.warmup_fraction * total_steps
    if warmup > 0 and step < warmup:
        return cfg.max_lr * step / warmup
    if total_steps == warmup:
        return cfg.max_lr
    t = (step - warmup) / (total_steps - warmup)
    return cfg.min_lr + 0.5 * (cfg.max_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * t))


def clip_gradients(grads: Sequence[torch.Tensor], clip_norm: float) -> float:
    """Scale gradients in place so the global L2 norm is at most clip_norm;
    returns the pre-clip norm."""
    total = 0.0
    for g in grads:
        if not torch.isfinite(g).all():
            raise DivergenceError("non-finite gradient")
        total += float((g.double() ** 2).sum())
    norm = math.sqrt(total)
    if norm > clip_norm and norm > 0:
        scale = clip_norm / norm
        for g in grads:
            g.mul_(scale)
    return norm


class AdamW:
    """Adam with decoupled weight decay (decay applied to the weights, not
    folded into the gradient)."""

    def __init__(self, params: dict[str, torch.Tensor], cfg: OptimizerConfig):
        self.cfg = cfg
        self.params = params
        self.step_count = 0
        self.m = {k: torch.zeros_like(p) for k, p in params.items()}
        self.v = {k: torch.zeros_like(p) for k, p in params.items()}

    @torch.no_grad()
    def step(self, lr: float) -> None:
        self.step_count += 1
        b1, b2 = self.cfg.beta1, self.cfg.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            if self.cfg.weight_decay:
                p.mul_(1.0 - lr * self.cfg.weight_decay)
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            mhat = m / bc1
            vhat = v / bc2
            p.add_(mhat / (vhat.sqrt() + self.cfg.epsilon), alpha=-lr)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"opt.step": np.array([self.step_count], dtype=np.int64)}
        for k in self.params:
            out[f"opt.m.{k}"] = self.m[k].detach().cpu().numpy().astype(np.float32)
            out[f"opt.v.{k}"] = self.v[k].detach().cpu().numpy().astype(np.float32)
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.step_count = int(arrays["opt.step"][0])
        for k in self.params:
            self.m[k] = torch.from_numpy(arrays[f"opt.m.{k}"].copy())
            self.v[k] = torch.from_numpy(arrays[f"opt.v.{k}"].copy())


def _epoch_batches(
    instances: list[Instance],
    train_cfg: TrainConfig,
    pad_id: int,
    epoch: int,
) -> list[list]:
    rng = np.random.default_rng([train_cfg.seed, epoch])
    order = rng.permutation(len(instances))
    shuffled = [instances[i] for i in order]
    samples = pack(shuffled, train_cfg.context, pad_id)
    return [
        samples[i : i + train_cfg.batch_size]
        for i in range(0, len(samples), train_cfg.batch_size)
    ]


def train(
    model: CodeLM,
    instances: list[Instance],
    kind: ObjectiveKind,
    vocab: Vocabulary,
    opt_cfg: OptimizerConfig,
    train_cfg: TrainConfig,
    meta: Optional[dict] = None,
    resume_from: Optional[str] = None,
) -> tuple[CodeLM, list[dict]]:
    """Run the optimization loop; returns the model and the per-step log."""
    if not instances:
        raise TrainerError("no training instances")
    params = dict(model.named_parameters())
    opt = AdamW(params, opt_cfg)
    candidates = corruptable_ids(vocab)
    pad_id = vocab.pad_id

    steps_per_epoch = len(_epoch_batches(instances, train_cfg, pad_id, epoch=0))
    total_steps = steps_per_epoch * train_cfg.epochs
    if train_cfg.max_steps is not None:
        total_steps = min(total_steps, train_cfg.max_steps)
    if total_steps == 0:
        raise TrainerError("dataset produces zero steps")

    start_step = 0
    if resume_from is not None:
        resumed, resumed_meta, extra = load_checkpoint(resume_from)
        model.load_state_dict(resumed.state_dict())
        params = dict(model.named_parameters())
        opt = AdamW(params, opt_cfg)
        opt.load_state_arrays(extra)
        start_step = int(resumed_meta.get("step", opt.step_count))

    history: list[dict] = []
    ckpt_dir = Path(train_cfg.checkpoint_dir) if train_cfg.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    meta = dict(meta or {})
    meta.update({"objective": kind.name, "phase": train_cfg.phase,
                 "separation": model.cfg.separation})
    last_ckpt: Optional[Path] = None

    def write_ckpt(step: int) -> Path:
        path = ckpt_dir / f"ckpt_{train_cfg.phase}_{step}.ckpt"
        save_checkpoint(path, model, {**meta, "step": step}, opt.state_arrays())
        return path

    log_fh = None
    log_writer = None
    if train_cfg.log_path:
        log_fh = open(train_cfg.log_path, "w", newline="")
        log_writer = csv.writer(log_fh)
        log_writer.writerow(["step", "lr", "loss", "grad_norm"])

    global_step = 0
    try:
        for epoch in range(train_cfg.epochs):
            batches = _epoch_batches(instances, train_cfg, pad_id, epoch)
            for batch_idx, batch in enumerate(batches):
                global_step += 1
                if global_step > total_steps:
                    if ckpt_dir:
                        write_ckpt(global_step - 1)
                    return model, history
                if global_step <= start_step:
                    continue
                rng = np.random.default_rng([train_cfg.seed, epoch, batch_idx, 7])
                model.zero_grad(set_to_none=True)
                step_loss = objective_loss(model, batch, kind, vocab, rng, candidates)
                loss_value = float(step_loss.detach())
                if not math.isfinite(loss_value):
                    raise DivergenceError(
                        f"non-finite loss at step {global_step}"
                        + (f"; last checkpoint {last_ckpt}" if last_ckpt else "")
                    )
                step_loss.backward()
                grads = [p.grad for p in params.values() if p.grad is not None]
                norm = clip_gradients(grads, opt_cfg.clip_norm)
                lr = lr_at(global_step, total_steps, opt_cfg)
                opt.step(lr)
                history.append(
                    {"step": global_step, "lr": lr, "loss": loss_value, "grad_norm": norm}
                )
                if log_writer:
                    log_writer.writerow([global_step, lr, loss_value, norm])
                if (
                    ckpt_dir
                    and train_cfg.checkpoint_every
                    and global_step % train_cfg.checkpoint_every == 0
                ):
                    last_ckpt = write_ckpt(global_step)
        if ckpt_dir:
            last_ckpt = write_ckpt(global_step)
    finally:
        if log_fh:
            log_fh.close()
    return model, history
