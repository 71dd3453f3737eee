"""Command-line entry point: ``corrpool <command> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Every command
prints its resolved configuration (including the seed) to stderr before
running, so stdout carries only results.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from corrpool.checkpoint import load_checkpoint, save_checkpoint
from corrpool.core.rng import SeededRng
from corrpool.diagnostics import toy_gradcheck
from corrpool.downstream import TASKS, DownstreamModel
from corrpool.errors import CorrPoolError, ParameterError
from corrpool.formats import (
    read_manifest,
    read_scores,
    read_stack,
    read_trials,
    write_logits,
    write_metric_log,
    write_scores,
)
from corrpool.layerwise import LayerWeights, aggregate, format_weights_table
from corrpool.metrics import Trial, accuracy, eer, fuse_logits
from corrpool.pooling import PoolingMethod, draw_channel_dropout, pool
from corrpool.synth import SynthSpec, generate_synthetic
from corrpool.training import (
    TrainConfig,
    embed,
    infer_labels,
    load_examples,
    predict_logits,
    score_trials,
    train,
)

GRADCHECK_LIMIT = 1e-4
POOLING_CHOICES = ("mean", "meanstd", "statistics", "stats", "corr", "correlation")


def _percent(x: float) -> str:
    return f"{100.0 * x:.2f}%"


def _announce(command: str, config: dict) -> None:
    print(f"# {command} " + json.dumps(config, sort_keys=True, default=str), file=sys.stderr)


def _load_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParameterError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ParameterError(f"{path}: expected a JSON object")
    return data


# ---------------------------------------------------------------- commands


def cmd_gen_synth(args) -> int:
    data = _load_json(args.spec) if args.spec else {}
    if args.seed is not None:
        data["seed"] = args.seed
    spec = SynthSpec.from_dict(data)
    _announce("gen-synth", spec.to_dict())
    paths = generate_synthetic(spec, args.out)
    for name in sorted(paths):
        print(f"{name}\t{paths[name]}")
    return 0


def _train_config(args) -> TrainConfig:
    data = _load_json(args.config) if args.config else {}
    overrides = {
        "task": args.task,
        "pooling": args.pooling,
        "dropout": args.dropout,
        "seed": args.seed,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "learning_rate": args.lr,
        "patience": args.patience,
    }
    data.update({k: v for k, v in overrides.items() if v is not None})
    if args.freeze_layer_weights:
        data["freeze_layer_weights"] = True
    return TrainConfig.from_dict(data)


def cmd_train(args) -> int:
    config = _train_config(args)
    _announce("train", config.to_dict())
    entries = read_manifest(args.manifest)
    labels = infer_labels(entries)
    train_set = load_examples(entries, labels)
    val_set, val_trials = None, None
    if args.val_manifest:
        val_entries = read_manifest(args.val_manifest)
        val_labels = labels if config.task != "sv" else infer_labels(val_entries)
        val_set = load_examples(val_entries, val_labels)
    if args.val_trials:
        if val_set is None:
            raise ParameterError("--val-trials needs --val-manifest")
        val_trials = read_trials(args.val_trials, {ex.utt_id for ex in val_set})

    first = train_set[0].stack
    model = DownstreamModel.build(config.task, config.head_config(first.dim), first.num_layers, labels, config.seed)
    if args.init_layer_weights:
        source = load_checkpoint(args.init_layer_weights).model.weights
        if source.num_layers != model.weights.num_layers:
            raise ParameterError(
                f"layer weights have {source.num_layers} layers, data has {model.weights.num_layers}")
        model.weights.logits.assign(source.logits.data)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resume = None
    if args.resume:
        ckpt = load_checkpoint(out / "last.ckpt")
        if ckpt.state is None:
            raise ParameterError("last.ckpt holds no training state")
        model = ckpt.model
        resume = ckpt.state
        # a run that stopped only because it hit its epoch budget may be extended
        stalled = config.patience is not None and resume.epochs_since_best >= config.patience
        if resume.epoch < config.epochs and not stalled:
            resume.finished = False

    def on_epoch(m, state, cfg):
        save_checkpoint(out / "last.ckpt", m, cfg, state)
        write_metric_log(out / "metrics.tsv", state.log)

    result = train(model, train_set, config, val_set, val_trials, resume=resume, on_epoch=on_epoch)
    save_checkpoint(out / "best.ckpt", result.model, config)
    metric = result.state.best_metric
    name = "EER" if config.task == "sv" else "accuracy"
    print(f"best epoch {result.best_epoch}\t{name} {_percent(metric)}")
    return 0


def cmd_evaluate(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.model
    entries = read_manifest(args.manifest)
    scores_path = Path(args.scores) if args.scores else Path(args.ckpt).with_suffix(
        f".{Path(args.manifest).stem}.scores.tsv")
    _announce("evaluate", {
        "ckpt": args.ckpt, "manifest": args.manifest, "trials": args.trials, "scores": str(scores_path),
        "task": model.task, "pooling": model.config.pooling,
        "seed": ckpt.config.seed if ckpt.config else None,
    })
    if model.task == "sv":
        if not args.trials:
            raise ParameterError("SV evaluation needs --trials")
        examples = load_examples(entries, infer_labels(entries))
        trials = read_trials(args.trials, {ex.utt_id for ex in examples})
        rows = score_trials(embed(model, examples), trials)
        write_scores(scores_path, rows)
        print(f"EER {_percent(eer([Trial(*r) for r in rows]))}")
        return 0
    examples = load_examples(entries, model.labels)
    logits = predict_logits(model, examples)
    write_logits(scores_path, [(ex.utt_id, row, model.labels[ex.label]) for ex, row in zip(examples, logits)],
                 model.labels)
    print(f"accuracy {_percent(accuracy(logits, [ex.label for ex in examples]))}")
    return 0


def cmd_pool(args) -> int:
    method = PoolingMethod.parse(args.pooling)
    _announce("pool", {"pooling": method.value, "stack": args.stack, "layer": args.layer, "ckpt": args.ckpt,
                       "dropout": args.dropout, "seed": args.seed, "epsilon": args.epsilon})
    stack = read_stack(args.stack)
    if args.layer is not None:
        if not 0 <= args.layer < stack.num_layers:
            raise ParameterError(f"--layer {args.layer} outside [0, {stack.num_layers})")
        frames = stack.layers[args.layer]
    else:
        weights = (load_checkpoint(args.ckpt).model.weights if args.ckpt
                   else LayerWeights.uniform(stack.num_layers))
        if weights.num_layers != stack.num_layers:
            raise ParameterError(f"checkpoint has {weights.num_layers} layer weights, stack has {stack.num_layers}")
        frames = aggregate(stack, weights).data
    mask = None
    if args.dropout > 0:
        mask = draw_channel_dropout(stack.dim, args.dropout, SeededRng(args.seed))
    vec = pool(frames, method, mask, args.epsilon).data
    text = "\n".join(repr(float(v)) for v in vec) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_fuse(args) -> int:
    _announce("fuse", {"scores": args.scores, "out": args.out, "seed": None})
    files = [read_scores(p) for p in args.scores]
    kinds = {f.is_classification for f in files}
    if len(kinds) != 1:
        raise ParameterError("cannot fuse classification logits with verification scores")
    fused = fuse_logits([f.values for f in files])
    ref = files[0]
    if ref.is_classification:
        for path, f in zip(args.scores[1:], files[1:]):
            if f.classes != ref.classes:
                raise ParameterError(f"{path}: class list differs from {args.scores[0]}")
        keys = list(fused)
        index = {c: i for i, c in enumerate(ref.classes)}
        acc = accuracy(np.stack([fused[k] for k in keys]), [index[ref.labels[k]] for k in keys])
        if args.out:
            write_logits(args.out, [(k, fused[k], ref.labels[k]) for k in keys], ref.classes)
        print(f"accuracy {_percent(acc)}")
        return 0
    rows = [(k, float(fused[k][0]), ref.labels[k] == "target") for k in fused]
    if args.out:
        write_scores(args.out, rows)
    print(f"EER {_percent(eer([Trial(*r) for r in rows]))}")
    return 0


def cmd_gradcheck(args) -> int:
    _announce("gradcheck", {"task": args.task, "pooling": PoolingMethod.parse(args.pooling).value,
                            "dropout": args.dropout, "seed": args.seed, "epsilon": args.epsilon})
    err = toy_gradcheck(args.task, args.pooling, args.dropout, args.seed, epsilon=args.epsilon)
    print(f"max relative error {err:.3e}")
    if err > GRADCHECK_LIMIT:
        print(f"error: gradient check failed ({err:.3e} > {GRADCHECK_LIMIT:.0e})", file=sys.stderr)
        return 1
    return 0


def cmd_export_weights(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    _announce("export-weights", {"ckpt": args.ckpt, "out": args.out,
                                 "seed": ckpt.config.seed if ckpt.config else None})
    table = format_weights_table(ckpt.model.weights)
    if args.out:
        Path(args.out).write_text(table, encoding="utf-8")
    else:
        sys.stdout.write(table)
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="corrpool", description="Pooling of frozen multi-layer features.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen-synth", help="write a synthetic dataset")
    p.add_argument("--spec", help="JSON file with SynthSpec fields (defaults apply when omitted)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override the spec's seed")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="train a downstream head")
    p.add_argument("--task", choices=TASKS, help="sid, er or sv")
    p.add_argument("--pooling", choices=POOLING_CHOICES, help="pooling method")
    p.add_argument("--dropout", type=float, help="channel dropout probability (correlation pooling)")
    p.add_argument("--manifest", required=True, help="training manifest")
    p.add_argument("--val-manifest", help="validation manifest (default: the training manifest)")
    p.add_argument("--val-trials", help="validation trial list (required for sv)")
    p.add_argument("--config", help="JSON file with TrainConfig fields; flags override it")
    p.add_argument("--out", required=True, help="output directory for best.ckpt, last.ckpt, metrics.tsv")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--epochs", type=int, help="number of epochs")
    p.add_argument("--batch-size", type=int, help="utterances per update")
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--patience", type=int, help="stop after this many epochs without improvement")
    p.add_argument("--init-layer-weights", metavar="CKPT", help="start from this checkpoint's layer weights")
    p.add_argument("--freeze-layer-weights", action="store_true", help="keep the layer weights fixed")
    p.add_argument("--resume", action="store_true", help="continue from OUT/last.ckpt")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a manifest with a trained checkpoint")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--manifest", required=True, help="evaluation manifest")
    p.add_argument("--trials", help="trial list (sv only)")
    p.add_argument("--scores", help="score file to write (default: next to the checkpoint)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("pool", help="pool one stack file and print the vector")
    p.add_argument("--pooling", required=True, choices=POOLING_CHOICES, help="pooling method")
    p.add_argument("--stack", required=True, help="stack file")
    p.add_argument("--layer", type=int, help="pool this layer only instead of the weighted sum")
    p.add_argument("--ckpt", help="take layer weights from this checkpoint (default: uniform)")
    p.add_argument("--dropout", type=float, default=0.0, help="channel dropout probability")
    p.add_argument("--seed", type=int, default=0, help="seed for the dropout mask")
    p.add_argument("--epsilon", type=float, default=1e-8, help="standard-deviation floor")
    p.add_argument("--out", help="write here instead of stdout")
    p.set_defaults(func=cmd_pool)

    p = sub.add_parser("fuse", help="average the scores or logits of several runs")
    p.add_argument("--scores", nargs="+", required=True, help="two or more score files")
    p.add_argument("--out", help="fused score file")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("gradcheck", help="finite-difference check of a toy model")
    p.add_argument("--task", choices=TASKS, default="sid", help="sid, er or sv")
    p.add_argument("--pooling", choices=POOLING_CHOICES, default="correlation", help="pooling method")
    p.add_argument("--dropout", type=float, default=0.0, help="fixed channel dropout mask probability")
    p.add_argument("--seed", type=int, default=0, help="seed for the toy instance")
    p.add_argument("--epsilon", type=float, default=1e-6, help="finite-difference step")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-weights", help="print the learned layer weights")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--out", help="write here instead of stdout")
    p.set_defaults(func=cmd_export_weights)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (CorrPoolError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
