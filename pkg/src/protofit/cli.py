"""Command-line entry points: train, eval, interpret, synth.

Every TrainConfig field is exposed as a flag; flags override values from the
``--config`` file. Exit codes: 0 success, 1 runtime error (typed message on
stderr), 2 configuration error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

from .core import CLASSIFICATION, TrainConfig
from .dataio import (
    Checkpoint,
    config_from_strings,
    generate_synthetic,
    load_checkpoint,
    load_dataset,
    parse_config_file,
    save_checkpoint,
    save_dataset,
)
from .encoder import Encoder
from .errors import ConfigInvalid, ProtofitError, UnknownId
from .inference import examples_within, nearest_examples
from .training import evaluate, history_lines, train

CHECKPOINT_NAME = "checkpoint.pfit"
HISTORY_NAME = "history.tsv"

_BOOL_FIELDS = {"indicator_logits", "train_variances", "train_encoder", "regression_creation"}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    for f in fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name in _BOOL_FIELDS:
            parser.add_argument(flag, default=None, choices=["true", "false"])
        elif f.type == "int":
            parser.add_argument(flag, type=int, default=None)
        else:
            parser.add_argument(flag, type=float, default=None)


def _build_config(args) -> TrainConfig:
    values: dict[str, str] = {}
    if args.config is not None:
        values = parse_config_file(args.config)
    for f in fields(TrainConfig):
        flag_value = getattr(args, f.name, None)
        if flag_value is not None:
            values[f.name] = str(flag_value)
    return config_from_strings(values)


def _build_cli_encoder(args, dataset) -> Encoder | None:
    if args.encoder == "frozen_table":
        return None  # training builds the identity table itself
    if args.encoder == "projection":
        out_dim = args.encoder_dim or dataset.dim
        return Encoder.with_projection(dataset.ids, dataset.features, out_dim, seed=args.seed or 0)
    hidden = tuple(int(h) for h in args.encoder_hidden.split(",") if h)
    out_dim = args.encoder_dim or dataset.dim
    return Encoder.mlp(dataset.dim, hidden, out_dim, seed=args.seed or 0)


def cmd_train(args) -> int:
    config = _build_config(args)
    dataset = load_dataset(args.train)
    val = load_dataset(args.val) if args.val else None
    encoder = _build_cli_encoder(args, dataset)
    result = train(dataset, config, encoder=encoder, val_dataset=val)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out_dir / CHECKPOINT_NAME, result.checkpoint)
    with open(out_dir / HISTORY_NAME, "w", encoding="ascii") as fh:
        fh.write("\n".join(history_lines(result.history)) + "\n")

    final_loss = result.history[-1].loss if result.history else float("nan")
    summary = (
        f"summary: steps={len(result.history)} epochs={result.epochs_run} "
        f"final_loss={final_loss!r} K={len(result.store)} "
        f"created={result.diagnostics['created']} pruned={result.diagnostics['pruned']} "
        f"clamped={result.diagnostics['clamp_events']}"
    )
    if result.best_metric is not None:
        summary += f" best_val_metric={result.best_metric!r}"
    print(summary)
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    metrics = evaluate(dataset, ckpt.store, ckpt.encoder,
                       indicator_logits=ckpt.config.indicator_logits)
    print(f"mode: {metrics['mode']}")
    print(f"examples: {metrics['count']}")
    if "accuracy" in metrics:
        print(f"accuracy: {metrics['accuracy']:.6f}")
        per_class = " ".join(
            f"{c}:{acc:.6f}" for c, acc in sorted(metrics["per_class_accuracy"].items())
        )
        print(f"per_class_accuracy: {per_class}")
    else:
        print(f"mse: {metrics['mse']:.6f}")
    print(f"prototypes: {metrics['num_prototypes']}")
    print(f"mean_importance_entropy: {metrics['mean_importance_entropy']:.6f}")
    return 0


def cmd_interpret(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    store = ckpt.store
    examples = dataset.examples(ckpt.encoder)

    if args.prototype == "all":
        pids = [int(p) for p in store.ids]
    else:
        pid = int(args.prototype)
        if not store.has(pid):
            raise UnknownId(f"no prototype with id {pid}")
        pids = [pid]

    for pid in pids:
        proto = store.get(pid)
        print(f"prototype {pid} class={proto.home_class} created_step={proto.created_step} "
              f"sigma={proto.variance:.6f}")
        if store.mode == CLASSIFICATION:
            lg = " ".join(f"{v:.6f}" for v in proto.logits)
            print(f"  logits: {lg}")
        else:
            print(f"  output: {proto.logits:.6f}")
        nearest = nearest_examples(proto, examples, args.top)
        listed = "; ".join(f"id={i} dist={d:.6f}" for i, d in nearest)
        print(f"  nearest-{args.top}: {listed}")
        inside = examples_within(proto, examples, args.tau)
        print(f"  within_tau={args.tau}: {len(inside)} examples")
        if store.mode == CLASSIFICATION and nearest:
            labels = {ex.id: ex.label for ex in examples}
            purity = sum(1 for i, _ in nearest if labels[i] == proto.home_class) / len(nearest)
            print(f"  top-{args.top}_purity: {purity:.6f}")
    return 0


def cmd_synth(args) -> int:
    dataset = generate_synthetic(
        args.classes,
        args.modes_per_class,
        args.separation,
        args.dim,
        args.count,
        args.seed,
        blob_std=args.blob_std,
        layout=args.layout,
    )
    save_dataset(args.out, dataset)
    print(f"wrote {len(dataset)} examples to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protofit",
                                     description="Dynamic-capacity prototype head")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="fit a head on a dataset file")
    p_train.add_argument("--config", default=None, help="key = value config file")
    p_train.add_argument("--train", required=True, help="training dataset path")
    p_train.add_argument("--val", default=None, help="validation dataset (enables early stopping)")
    p_train.add_argument("--out", required=True, help="output directory")
    p_train.add_argument("--encoder", default="frozen_table",
                         choices=["frozen_table", "projection", "mlp"])
    p_train.add_argument("--encoder-dim", type=int, default=None)
    p_train.add_argument("--encoder-hidden", default="16")
    _add_config_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="report metrics of a checkpoint on a dataset")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.set_defaults(func=cmd_eval)

    p_int = sub.add_parser("interpret", help="project prototypes onto nearby examples")
    p_int.add_argument("--checkpoint", required=True)
    p_int.add_argument("--data", required=True)
    p_int.add_argument("--prototype", default="all", help="prototype id or 'all'")
    p_int.add_argument("-m", "--top", type=int, default=10)
    p_int.add_argument("--tau", type=float, default=1.0)
    p_int.set_defaults(func=cmd_interpret)

    p_synth = sub.add_parser("synth", help="generate a synthetic blob dataset")
    p_synth.add_argument("--classes", type=int, default=2)
    p_synth.add_argument("--modes-per-class", type=int, default=2)
    p_synth.add_argument("--separation", type=float, default=10.0)
    p_synth.add_argument("--dim", type=int, default=2)
    p_synth.add_argument("--count", type=int, default=400)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--blob-std", type=float, default=1.0)
    p_synth.add_argument("--layout", default="random", choices=["random", "xor"])
    p_synth.add_argument("--out", required=True)
    p_synth.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ProtofitError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
