"""Command-line entry point wiring the pipeline end to end:

extract -> train-tokenizer -> build-sepset -> pack -> train -> generate ->
evaluate -> analyze, plus ``grid`` which runs the full 4-objective x
3-separation continued-training matrix from one shared baseline checkpoint
and emits a consolidated report.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from .analysis import AnalysisError, nearest_neighbors, project_2d
from .corpus import CorpusError, FilterRules
from .data import (
    DataError,
    instances_from_pairs,
    load_packed,
    pack as pack_instances,
    save_packed,
    vocab_hash,
)
from .decoder import DecodeConfig, DecodeError, Prompt, generate
from .evaluator import (
    EvalError,
    LocalExecutor,
    SandboxExecutor,
    augment_incremental,
    contamination_check,
    evaluate as run_evaluate,
    load_problems,
)
from .model import (
    ModelConfig,
    ModelError,
    PRESETS,
    init_model,
    load_checkpoint,
    save_checkpoint,
    separate_embeddings,
)
from .objectives import OBJECTIVES, ObjectiveKind, ObjectiveError, objective_from_flag
from .tokenizer import (
    SeparationSet,
    TokenizerError,
    Vocabulary,
    build_separation_set,
    train_vocabulary,
)
from .trainer import DivergenceError, OptimizerConfig, TrainConfig, TrainerError, train

USAGE_ERROR = 1
DATA_ERROR = 2
RUNTIME_ERROR = 3

_DATA_ERRORS = (
    CorpusError, TokenizerError, DataError, EvalError, DecodeError,
    AnalysisError, ObjectiveError, FileNotFoundError, json.JSONDecodeError,
)
_RUNTIME_ERRORS = (DivergenceError, TrainerError, ModelError, OSError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:12]


def _load_vocab(path: str) -> Vocabulary:
    return Vocabulary.load(path)


def _check_hash(expected: str, actual: str, what: str, force: bool) -> None:
    if expected and actual and expected != actual and not force:
        raise DataError(
            f"{what} hash mismatch ({expected} != {actual}); pass --force to override"
        )


# -- commands -----------------------------------------------------------------


def cmd_extract(args) -> int:
    stats = corpus_mod.PipelineStats()
    pairs = corpus_mod.extract_pairs(
        args.root, args.style, FilterRules(), workers=args.workers, stats=stats
    )
    n = corpus_mod.write_pairs_jsonl(pairs, args.out)
    stats_path = args.stats or str(Path(args.out).with_suffix(".stats.json"))
    Path(stats_path).write_text(json.dumps(stats.to_json(), indent=2))
    print(f"extracted {n} pairs -> {args.out} (stats: {stats_path})")
    return 0


def cmd_train_tokenizer(args) -> int:
    pairs = corpus_mod.read_pairs_jsonl(args.pairs)
    if not pairs:
        raise DataError(f"no pairs in {args.pairs}")
    vocab = train_vocabulary((corpus_mod.render_pair(p) for p in pairs), args.size)
    vocab.save(args.out)
    print(f"vocabulary of {vocab.size} tokens (hash {vocab_hash(vocab)}) -> {args.out}")
    return 0


def cmd_build_sepset(args) -> int:
    vocab = _load_vocab(args.vocab)
    extra = args.extra.split(",") if args.extra else None
    kwargs = {} if extra is None else {"extra": tuple(extra)}
    sepset = build_separation_set(vocab, **kwargs)
    sepset.save(args.out)
    print(f"separation set of {len(sepset)} token ids -> {args.out}")
    return 0


def cmd_pack(args) -> int:
    vocab = _load_vocab(args.vocab)
    pairs = corpus_mod.read_pairs_jsonl(args.pairs)
    instances, dropped = instances_from_pairs(pairs, vocab, args.context)
    if not instances:
        raise DataError("no instances fit in the context")
    rng = np.random.default_rng(args.seed)
    order = rng.permutation(len(instances))
    shuffled = [instances[i] for i in order]
    samples = pack_instances(shuffled, args.context, vocab.pad_id)
    style = instances[0].style
    save_packed(args.out, samples, args.context, vocab_hash(vocab), style, args.seed)
    print(f"packed {len(instances)} instances ({dropped} dropped) into "
          f"{len(samples)} samples -> {args.out}")
    return 0


def _model_config(args, vocab: Vocabulary) -> ModelConfig:
    preset = dict(PRESETS[args.preset])
    if getattr(args, "context", None):
        preset["context"] = args.context
    return ModelConfig(vocab_size=vocab.size, separation=args.separation, **preset)


def cmd_train(args) -> int:
    vocab = _load_vocab(args.vocab)
    vhash = vocab_hash(vocab)
    pairs = corpus_mod.read_pairs_jsonl(args.pairs)
    sepset = SeparationSet.load(args.sepset) if args.sepset else None
    if args.separation == "pes" and sepset is None:
        raise UsageError("--separation pes requires --sepset")
    kind = ObjectiveKind(objective_from_flag(args.objective),
                         corruption_prob=args.corruption_prob)

    if args.init_from:
        base, base_meta, _ = load_checkpoint(args.init_from)
        _check_hash(base_meta.get("vocab_hash", ""), vhash, "vocabulary", args.force)
        if base.cfg.separation == "shared" and args.separation != "shared":
            model = separate_embeddings(base, args.separation, sepset)
        elif base.cfg.separation == args.separation:
            model = base
        else:
            raise DataError(
                f"checkpoint separation {base.cfg.separation!r} incompatible with "
                f"requested {args.separation!r}"
            )
    else:
        model = init_model(_model_config(args, vocab), seed=args.seed, separation_set=sepset)

    instances, dropped = instances_from_pairs(pairs, vocab, model.cfg.context)
    if not instances:
        raise DataError("no training instances fit in the context")
    opt_cfg = OptimizerConfig(max_lr=args.max_lr, min_lr=args.min_lr,
                              clip_norm=args.clip_norm)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_cfg = TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, context=model.cfg.context,
        seed=args.seed, phase=args.phase, max_steps=args.max_steps,
        checkpoint_every=args.checkpoint_every, checkpoint_dir=str(out_dir),
        log_path=str(out_dir / "loss_log.csv"),
    )
    meta = {"vocab_hash": vhash, "config_hash": _config_hash(asdict(model.cfg))}
    model, history = train(model, instances, kind, vocab, opt_cfg, train_cfg, meta=meta)
    final = out_dir / f"ckpt_{args.phase}_final.ckpt"
    save_checkpoint(final, model, {**meta, "objective": kind.name, "phase": args.phase,
                                   "separation": model.cfg.separation,
                                   "step": history[-1]["step"] if history else 0})
    print(f"trained {len(history)} steps (final loss "
          f"{history[-1]['loss']:.4f}) -> {final}" if history else f"no steps -> {final}")
    return 0


def _completion_records(model, meta, vocab, problems, args):
    kind_name = meta.get("objective", "")
    regime = "prefix_bidirectional" if kind_name == "prefix_code_clm" else "causal"
    cfg = DecodeConfig(
        temperature=args.t, nucleus_p=args.p, max_new_tokens=args.max_new_tokens,
        num_samples=args.n, seed=args.seed, greedy=args.greedy,
    )
    for prob in problems:
        prompt_set = (
            augment_incremental(prob) if args.mode == "incremental"
            else augment_incremental(prob)[:1]
        )
        for aug in prompt_set:
            prompt = Prompt(
                description=aug.description, signature=aug.signature,
                style=args.style, prepended_code=aug.prepended_code,
            )
            task_key = f"{aug.task_id}#{aug.lines_given}"
            completions = generate(model, prompt, vocab, cfg, task_id=task_key, regime=regime)
            for i, comp in enumerate(completions):
                yield {
                    "task_id": aug.task_id,
                    "lines_given": aug.lines_given,
                    "sample_index": i,
                    "completion": comp.marker_text,
                    "stopped": comp.stopped,
                }


def cmd_generate(args) -> int:
    vocab = _load_vocab(args.vocab)
    model, meta, _ = load_checkpoint(args.ckpt)
    _check_hash(meta.get("vocab_hash", ""), vocab_hash(vocab), "vocabulary", args.force)
    problems = load_problems(args.problems)
    n = 0
    with open(args.out, "w", encoding="utf-8") as fh:
        for record in _completion_records(model, meta, vocab, problems, args):
            fh.write(json.dumps(record) + "\n")
            n += 1
    print(f"wrote {n} samples -> {args.out}")
    return 0


def _read_samples(path: str) -> list[dict]:
    samples = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                samples.append(json.loads(line))
    return samples


def cmd_evaluate(args) -> int:
    problems = load_problems(args.problems, validate=args.validate_references)
    samples = _read_samples(args.samples)
    ks = [int(k) for k in args.k.split(",")]
    executor = (
        SandboxExecutor(args.sandbox_cmd.split(), timeout_seconds=args.timeout)
        if args.sandbox_cmd
        else LocalExecutor(timeout_seconds=args.timeout)
    )
    report = run_evaluate(
        problems, samples, ks, mode=args.mode, executor=executor, workers=args.workers,
        metadata={"problems": args.problems, "samples": args.samples},
    )
    Path(args.out).write_text(json.dumps(report.to_json(), indent=2))
    for k in ks:
        print(f"pass@{k} ({args.mode}): {report.pass_at[k]:.4f}")
    print(f"report -> {args.out}")
    return 0


def cmd_contamination(args) -> int:
    problems = load_problems(args.problems)
    pairs = corpus_mod.read_pairs_jsonl(args.pairs)
    matches = contamination_check(problems, pairs)
    print(json.dumps({"matches": [{"task_id": t, "pair_index": i} for t, i in matches]}))
    return 0


def cmd_analyze(args) -> int:
    vocab = _load_vocab(args.vocab)
    model, _, _ = load_checkpoint(args.ckpt)
    report = nearest_neighbors(model, vocab, args.token, args.space, args.topk)
    out = report.to_json()
    ids = [vocab.ids[report.query]] + [vocab.ids[t] for t, _ in report.neighbors]
    out["projection"] = project_2d(model, vocab, ids, args.space, seed=args.seed)
    Path(args.out).write_text(json.dumps(out, indent=2))
    print(f"{len(report.neighbors)} neighbors of {report.query!r} in {args.space} "
          f"space -> {args.out}")
    return 0


def cmd_grid(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab = _load_vocab(args.vocab)
    vhash = vocab_hash(vocab)
    pairs = corpus_mod.read_pairs_jsonl(args.pairs)
    problems = load_problems(args.problems)
    sepset = SeparationSet.load(args.sepset) if args.sepset else build_separation_set(vocab)
    preset = dict(PRESETS[args.preset])
    if args.context:
        preset["context"] = args.context
    cfg = ModelConfig(vocab_size=vocab.size, separation="shared", **preset)
    instances, _ = instances_from_pairs(pairs, vocab, cfg.context)
    if not instances:
        raise DataError("no training instances fit in the context")
    opt_cfg = OptimizerConfig(max_lr=args.max_lr, min_lr=args.min_lr, clip_norm=args.clip_norm)
    meta = {"vocab_hash": vhash, "config_hash": _config_hash(asdict(cfg))}
    manifest = {"checkpoints": {}, "reports": {}}

    # shared baseline: plain next-token training on the whole sequence
    base_dir = out_dir / "baseline"
    base_dir.mkdir(exist_ok=True)
    baseline = init_model(cfg, seed=args.seed)
    baseline, _ = train(
        baseline, instances, ObjectiveKind("text_code_clm"), vocab, opt_cfg,
        TrainConfig(epochs=args.baseline_epochs, batch_size=args.batch_size,
                    context=cfg.context, seed=args.seed, phase="agnostic",
                    checkpoint_dir=str(base_dir)),
        meta=meta,
    )
    base_path = base_dir / "ckpt_agnostic_final.ckpt"
    save_checkpoint(base_path, baseline, {**meta, "phase": "agnostic",
                                          "objective": "text_code_clm",
                                          "separation": "shared"})
    manifest["checkpoints"]["baseline"] = str(base_path)

    ks = [int(k) for k in args.k.split(",")]
    executor = LocalExecutor(timeout_seconds=args.timeout)
    rows = []
    cells = [(obj, sep) for obj in OBJECTIVES for sep in ("shared", "pes", "fes")]
    for objective, separation in cells:
        cell = f"{objective}-{separation}"
        cell_dir = out_dir / cell
        cell_dir.mkdir(exist_ok=True)
        model = separate_embeddings(baseline, separation, sepset if separation == "pes" else None) \
            if separation != "shared" else separate_embeddings(baseline, "shared")
        kind = ObjectiveKind(objective)
        model, history = train(
            model, instances, kind, vocab, opt_cfg,
            TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                        context=cfg.context, seed=args.seed, phase="relative",
                        max_steps=args.max_steps, checkpoint_dir=str(cell_dir)),
            meta=meta,
        )
        ckpt = cell_dir / "ckpt_relative_final.ckpt"
        save_checkpoint(ckpt, model, {**meta, "phase": "relative", "objective": objective,
                                      "separation": separation,
                                      "step": history[-1]["step"] if history else 0})
        manifest["checkpoints"][cell] = str(ckpt)

        gen_args = argparse.Namespace(
            t=args.t, p=args.p, max_new_tokens=args.max_new_tokens, n=args.n,
            seed=args.seed, greedy=False, mode="standard", style=args.style,
        )
        samples = list(_completion_records(model, {"objective": objective}, vocab,
                                           problems, gen_args))
        report = run_evaluate(problems, samples, ks, mode="standard",
                              executor=executor, workers=args.workers,
                              metadata={"cell": cell})
        (cell_dir / "report.json").write_text(json.dumps(report.to_json(), indent=2))
        manifest["reports"][cell] = str(cell_dir / "report.json")
        row = {"objective": objective, "separation": separation,
               "final_loss": history[-1]["loss"] if history else float("nan")}
        row.update({f"pass@{k}": report.pass_at[k] for k in ks})
        rows.append(row)
        print(f"[{cell}] " + "  ".join(f"pass@{k}={report.pass_at[k]:.3f}" for k in ks))

    table_path = out_dir / "grid_report.csv"
    with open(table_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    manifest["table"] = str(table_path)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    print(f"grid complete: {len(rows)} cells + baseline -> {out_dir}")
    return 0


# -- parser ---------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="textcode")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="extract docstring/code pairs from a source tree")
    p.add_argument("--root", required=True)
    p.add_argument("--style", choices=corpus_mod.STYLES, default="pangu")
    p.add_argument("--out", required=True)
    p.add_argument("--stats")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train-tokenizer", help="learn a subword vocabulary")
    p.add_argument("--pairs", required=True)
    p.add_argument("--size", type=int, default=32000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_tokenizer)

    p = sub.add_parser("build-sepset", help="build the language-token separation set")
    p.add_argument("--vocab", required=True)
    p.add_argument("--extra", help="comma-separated extra surface forms")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_sepset)

    p = sub.add_parser("pack", help="tokenize and pack pairs into fixed-length samples")
    p.add_argument("--pairs", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--context", type=int, default=1024)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pack)

    p = sub.add_parser("train", help="run one training phase")
    p.add_argument("--pairs", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--objective", default="text-code")
    p.add_argument("--separation", choices=("shared", "pes", "fes"), default="shared")
    p.add_argument("--sepset")
    p.add_argument("--preset", choices=sorted(PRESETS), default="toy")
    p.add_argument("--context", type=int)
    p.add_argument("--init-from", dest="init_from")
    p.add_argument("--phase", default="relative")
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-lr", type=float, default=1e-3)
    p.add_argument("--min-lr", type=float, default=1e-4)
    p.add_argument("--clip-norm", type=float, default=1.0)
    p.add_argument("--corruption-prob", type=float, default=0.15)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="sample completions for a problem file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--problems", required=True)
    p.add_argument("--style", choices=corpus_mod.STYLES, default="pangu")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--p", type=float, default=0.8)
    p.add_argument("--t", type=float, default=0.95)
    p.add_argument("--max-new-tokens", type=int, default=128)
    p.add_argument("--greedy", action="store_true")
    p.add_argument("--mode", choices=("standard", "incremental"), default="standard")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score samples with pass@k")
    p.add_argument("--problems", required=True)
    p.add_argument("--samples", required=True)
    p.add_argument("--k", default="1,10,100")
    p.add_argument("--mode", choices=("standard", "incremental"), default="standard")
    p.add_argument("--timeout", type=float, default=10.0)
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--sandbox-cmd", help="command implementing the sandbox runner protocol")
    p.add_argument("--validate-references", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("contamination", help="check problems against training docstrings")
    p.add_argument("--problems", required=True)
    p.add_argument("--pairs", required=True)
    p.set_defaults(func=cmd_contamination)

    p = sub.add_parser("analyze", help="embedding nearest neighbors + 2D projection")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--token", required=True)
    p.add_argument("--space", choices=("nl", "code"), default="code")
    p.add_argument("--topk", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("grid", help="full objective x separation matrix from one baseline")
    p.add_argument("--pairs", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--problems", required=True)
    p.add_argument("--sepset")
    p.add_argument("--preset", choices=sorted(PRESETS), default="toy")
    p.add_argument("--context", type=int)
    p.add_argument("--style", choices=corpus_mod.STYLES, default="pangu")
    p.add_argument("--baseline-epochs", type=int, default=1)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-lr", type=float, default=1e-3)
    p.add_argument("--min-lr", type=float, default=1e-4)
    p.add_argument("--clip-norm", type=float, default=1.0)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--k", default="1,5,10")
    p.add_argument("--p", type=float, default=0.8)
    p.add_argument("--t", type=float, default=0.95)
    p.add_argument("--max-new-tokens", type=int, default=64)
    p.add_argument("--timeout", type=float, default=10.0)
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_grid)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return DATA_ERROR
    except _RUNTIME_ERRORS as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
