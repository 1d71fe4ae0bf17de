"""Command-line surface: corpus stats, training, evaluation, and probing.

Configuration comes from built-in desk-scale defaults, overridden by a
``key=value`` config file, overridden by ``--set key=value`` flags, overridden
by the named flags (``--steps``, ``--seed``).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import torch

from .corpus import corpus_stats, load_corpus
from .evaluation import windowed_score
from .model import ByteTransformer, ModelConfig
from .probe import layer_sweep, load_word_pairs
from .training import (
    TrainConfig,
    desk_model_config,
    desk_train_config,
    init_optimizer,
    load_checkpoint,
    run_training,
)


@dataclass
class Command:
    verb: str
    config_path: str | None
    overrides: dict[str, str]
    options: argparse.Namespace


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bytelm",
        description="Byte-level language model toolkit: train, score, and probe.",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    stats = sub.add_parser("stats", help="sentence/word/byte accounting of a corpus")
    stats.add_argument("--data", nargs="+", required=True, metavar="PATH")

    train = sub.add_parser("train", help="train a model and write checkpoints")
    train.add_argument("--config", metavar="PATH", help="key=value config file")
    train.add_argument("--data", nargs="+", required=True, metavar="PATH")
    train.add_argument("--steps", type=int, help="override total_steps")
    train.add_argument("--seed", type=int, help="override seed")
    train.add_argument("--out", default="model.ckpt", metavar="CKPT")
    train.add_argument(
        "--set",
        dest="assignments",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override any config key (repeatable)",
    )
    train.add_argument("--log-every", type=int, default=50)
    train.add_argument("--checkpoint-every", type=int, default=0)
    train.add_argument("--threads", type=int, default=0)

    evaluate = sub.add_parser("eval", help="strided scoring of a corpus")
    evaluate.add_argument("--checkpoint", required=True, metavar="CKPT")
    evaluate.add_argument("--data", nargs="+", required=True, metavar="PATH")
    evaluate.add_argument("--stride", type=int, default=1)
    evaluate.add_argument(
        "--context", type=int, help="window size (default: min(512, model context))"
    )
    evaluate.add_argument("--threads", type=int, default=0)

    probe = sub.add_parser("probe", help="layer sweep over word-similarity files")
    probe.add_argument("--checkpoint", required=True, metavar="CKPT")
    probe.add_argument("--pairs", nargs="+", required=True, metavar="PATH")
    probe.add_argument("--layers", default="all", help="'all' or comma-separated 1-based indices")
    probe.add_argument("--out", default="layer_sweep.csv", metavar="CSV")
    probe.add_argument("--threads", type=int, default=0)

    return parser


def parse_args(argv) -> Command:
    options = build_parser().parse_args(argv)
    overrides: dict[str, str] = {}
    for assignment in getattr(options, "assignments", []):
        if "=" not in assignment:
            raise ValueError(f"--set expects KEY=VALUE, got {assignment!r}")
        key, value = assignment.split("=", 1)
        overrides[key.strip()] = value.strip()
    if getattr(options, "steps", None) is not None:
        overrides["total_steps"] = str(options.steps)
    if getattr(options, "seed", None) is not None:
        overrides["seed"] = str(options.seed)
    return Command(
        verb=options.verb,
        config_path=getattr(options, "config", None),
        overrides=overrides,
        options=options,
    )


def read_config_file(path: str | Path) -> dict[str, str]:
    """utf-8 key=value lines; '#' starts a comment."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def build_configs(
    file_values: dict[str, str], overrides: dict[str, str]
) -> tuple[ModelConfig, TrainConfig]:
    """Apply file values then overrides on top of the desk-scale defaults."""
    model_values = asdict(desk_model_config())
    train_values = asdict(desk_train_config())
    for source in (file_values, overrides):
        for key, raw in source.items():
            if key in model_values:
                target = model_values
            elif key in train_values:
                target = train_values
            else:
                known = sorted([*model_values, *train_values])
                raise ValueError(f"unknown config key {key!r}; known keys: {known}")
            target[key] = int(raw) if isinstance(target[key], int) else float(raw)
    model_config = ModelConfig(**model_values)
    model_config.validate()
    train_config = TrainConfig(**train_values)
    train_config.validate()
    return model_config, train_config


def _apply_threads(options) -> int:
    threads = int(getattr(options, "threads", 0) or 0)
    if threads > 0:
        torch.set_num_threads(threads)
    return max(threads, 1)


def _run_stats(command: Command) -> int:
    stats = corpus_stats(load_corpus(command.options.data))
    print(stats.format_line())
    print(stats.to_record())
    return 0


def _run_train(command: Command) -> int:
    _apply_threads(command.options)
    file_values = read_config_file(command.config_path) if command.config_path else {}
    model_config, train_config = build_configs(file_values, command.overrides)
    corpus = load_corpus(command.options.data)
    model = ByteTransformer(model_config, seed=train_config.seed)
    opt = init_optimizer(model)
    run_training(
        model,
        opt,
        corpus,
        train_config,
        log_every=command.options.log_every,
        checkpoint_every=command.options.checkpoint_every,
        checkpoint_path=command.options.out,
    )
    print(f"wrote checkpoint {command.options.out} at step {opt.step}")
    return 0


def _run_eval(command: Command) -> int:
    threads = _apply_threads(command.options)
    checkpoint = load_checkpoint(command.options.checkpoint)
    model = checkpoint.build_model()
    corpus = load_corpus(command.options.data)
    stream = corpus.joined_bytes()
    context = command.options.context
    if context is None:
        context = min(512, model.config.context_len)
    report = windowed_score(
        model, stream, context, command.options.stride, threads=threads
    )
    report = report.with_word_count(corpus_stats(stream).words)
    print(report.format_line())
    print(report.to_record())
    return 0


def _run_probe(command: Command) -> int:
    _apply_threads(command.options)
    checkpoint = load_checkpoint(command.options.checkpoint)
    model = checkpoint.build_model()
    datasets = [load_word_pairs(path) for path in command.options.pairs]
    requested = command.options.layers
    layers = (
        "all" if requested == "all" else [int(piece) for piece in requested.split(",") if piece]
    )
    table = layer_sweep(model, datasets, layers)
    table.write_csv(command.options.out)
    print(f"wrote {command.options.out} ({len(table.rows)} rows)")
    return 0


_VERBS = {
    "stats": _run_stats,
    "train": _run_train,
    "eval": _run_eval,
    "probe": _run_probe,
}


def run(command: Command) -> int:
    try:
        return _VERBS[command.verb](command)
    except Exception as exc:  # CLI boundary: any module error becomes one cause line
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main(argv=None) -> int:
    try:
        command = parse_args(sys.argv[1:] if argv is None else argv)
    except ValueError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return run(command)


if __name__ == "__main__":
    sys.exit(main())
