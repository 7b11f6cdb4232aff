"""Command line entry point: ``latentdist <command> [options]``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from ..datagen import DatasetFormatError, generate, inject_noise, load_dataset, sample_batch, save_dataset
from ..model import BranchSet, CheckpointError, MissingHeadsError, load_checkpoint, save_checkpoint
from ..trainer import TrainConfig, evaluate, train, write_metric_log
from .config import (
    REFERENCE_DATA,
    ConfigError,
    build_synthetic_spec,
    build_train_config,
    format_config,
    parse_float_list,
    parse_int_list,
    read_config,
)
from .experiments import ExperimentSpec, run_ablation, run_noise_benchmark
from .montecarlo import MCSimilaritySpec, mc_verify_similarity
from .reports import confidence_report, inspect_latent

__all__ = ["main", "build_parser"]

PROG = "latentdist"
_TRAIN_KEYS = [f.name for f in dataclasses.fields(TrainConfig) if f.name != "seed"]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"{self.prog}: error: {message}\n")


class CLIError(Exception):
    pass


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("synthetic data")
    for key in REFERENCE_DATA:
        g.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None, metavar="V")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    for key in _TRAIN_KEYS:
        g.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None, metavar="V")


def _common(p: argparse.ArgumentParser, seed_required: bool) -> None:
    p.add_argument("--config", type=Path, help="key = value file; flags override it")
    p.add_argument("--seed", type=int, required=seed_required)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog=PROG, description="Latent-distribution mining with pairwise confidence estimation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset file")
    _common(p, True)
    _add_data_flags(p)
    p.add_argument("--noise", type=float, default=0.0, help="fraction of training labels to flip")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", help="train a model and write checkpoint + metric log")
    _common(p, True)
    _add_data_flags(p)
    _add_train_flags(p)
    p.add_argument("--data", type=Path, help="dataset file (synthesised from the config when omitted)")
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("eval", help="accuracy of a checkpoint on a dataset split")
    _common(p, False)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--against", choices=("annotation", "true"), default="annotation")

    for name, help_text in (("noise-bench", "baseline vs full model over noise ratios and seeds"),
                            ("ablate", "all eight component combinations at one noise ratio")):
        p = sub.add_parser(name, help=help_text)
        _common(p, False)
        _add_data_flags(p)
        _add_train_flags(p)
        p.add_argument("--seeds", help="comma-separated seeds")
        p.add_argument("--out", type=Path, required=True)
        p.add_argument("--jobs", type=int, default=1)
        if name == "noise-bench":
            p.add_argument("--ratios", default="0.1,0.2,0.3")
        else:
            p.add_argument("--ratio", type=float, default=0.3)

    p = sub.add_parser("inspect", help="mined latent distributions vs the true posterior")
    _common(p, False)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("confidence", help="confidence scores and in-batch ranks")
    _common(p, True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--batches", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=72)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("mc-verify", help="Monte-Carlo check of expected class similarity")
    _common(p, True)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--samples", type=int, default=100_000)

    p = sub.add_parser("strip", help="drop auxiliary heads and the confidence module")
    _common(p, False)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    return parser


def _settings(args: argparse.Namespace, keys: Sequence[str]) -> dict[str, Any]:
    values: dict[str, Any] = dict(read_config(args.config)) if args.config else {}
    for key in keys:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    return values


def _data_and_train(args) -> tuple[dict[str, Any], Any, TrainConfig | None]:
    values = _settings(args, list(REFERENCE_DATA) + _TRAIN_KEYS)
    spec = build_synthetic_spec(values)
    cfg = build_train_config(values) if hasattr(args, "max_epoch") else None
    return values, spec, cfg


def _resolved_header(**sections: Any) -> str:
    flat: dict[str, Any] = {}
    for name, obj in sections.items():
        if dataclasses.is_dataclass(obj):
            flat.update({f"{name}.{k}": v for k, v in dataclasses.asdict(obj).items()})
        elif isinstance(obj, dict):
            flat.update({f"{name}.{k}": v for k, v in obj.items()})
        else:
            flat[name] = obj
    return format_config(flat)


def _load_full(path: Path) -> BranchSet:
    return load_checkpoint(path, require_full=True)


def cmd_gen_data(args) -> int:
    _, spec, _ = _data_and_train(args)
    dataset = inject_noise(generate(spec), args.noise, args.seed)
    save_dataset(dataset, args.out)
    print(f"wrote {len(dataset.train)} train / {len(dataset.test)} test samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    _, spec, cfg = _data_and_train(args)
    cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.data is not None:
        dataset = load_dataset(args.data)
        source: Any = str(args.data)
    else:
        dataset = inject_noise(generate(spec), args.noise, args.seed)
        source = spec
    model, records = train(dataset, cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, args.out / "model.ckpt")
    write_metric_log(records, args.out / "metrics.jsonl")
    (args.out / "config.txt").write_text(_resolved_header(data=source, train=cfg, noise=args.noise))
    last = records[-1]
    test = "n/a" if last.test_acc is None else f"{last.test_acc:.4f}"
    print(f"epochs={last.epoch} train_acc={last.train_acc:.4f} test_acc={test} -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.model)
    dataset = load_dataset(args.data)
    split = dataset.train if args.split == "train" else dataset.test
    print(f"accuracy = {evaluate(model, split, args.against):.6f}")
    return 0


def _experiment(args, ratios: tuple[float, ...], ablation_ratio: float) -> ExperimentSpec:
    values, spec, cfg = _data_and_train(args)
    if args.seeds:
        seeds = parse_int_list(args.seeds)
    elif args.seed is not None:
        seeds = (args.seed,)
    elif "seeds" in values:
        seeds = parse_int_list(values["seeds"])
    else:
        raise CLIError("--seeds (or --seed) is required")
    overrides = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(TrainConfig)
                 if f.name not in ("seed", "use_latent", "use_sp", "use_confidence")}
    return ExperimentSpec(spec, ratios, seeds, overrides, ablation_ratio, args.out, args.jobs)


def cmd_noise_bench(args) -> int:
    table = run_noise_benchmark(_experiment(args, parse_float_list(args.ratios), 0.3))
    print(table.to_text(), end="")
    return 0 if all(c.error is None for c in table.cells) else 1


def cmd_ablate(args) -> int:
    table = run_ablation(_experiment(args, (args.ratio,), args.ratio))
    print(table.to_text(), end="")
    return 0 if all(c.error is None for c in table.cells) else 1


def cmd_inspect(args) -> int:
    model = _load_full(args.model)
    dataset = load_dataset(args.data)
    split = dataset.train if args.split == "train" else dataset.test
    report = inspect_latent(model, split)
    rows = list(report.rows())
    cols = list(rows[0]) if rows else []
    summary = {"mean_kl": report.mean_kl, "argmax_agreement": report.argmax_agreement,
               "flipped_recovery": report.flipped_recovery, "degenerate": report.degenerate_count}
    lines = [_resolved_header(model=str(args.model), data=str(args.data), split=args.split,
                              summary=summary).rstrip("\n"), "\t".join(cols)]
    lines += ["\t".join(str(r[c]) for c in cols) for r in rows]
    args.out.write_text("\n".join(lines) + "\n")
    for k, v in summary.items():
        print(f"{k} = {v}")
    return 0


def cmd_confidence(args) -> int:
    model = _load_full(args.model)
    dataset = load_dataset(args.data)
    rng = np.random.default_rng(args.seed)
    batches = [sample_batch(dataset.train, args.batch_size, dataset.num_classes, rng) for _ in range(args.batches)]
    report = confidence_report(model, batches, dataset.train.flipped)
    cols = ["batch", "position", "sample_index", "annotation", "alpha", "rank", "flipped"]
    summary = {"mean_alpha_flipped": report.mean_alpha_flipped, "mean_alpha_clean": report.mean_alpha_clean}
    lines = [_resolved_header(model=str(args.model), data=str(args.data), seed=args.seed, batches=args.batches,
                              batch_size=args.batch_size, summary=summary).rstrip("\n"), "\t".join(cols)]
    for r in report.records:
        lines.append("\t".join(repr(v) if isinstance(v, float) else str(int(v) if isinstance(v, bool) else v)
                               for v in (getattr(r, c) for c in cols)))
    args.out.write_text("\n".join(lines) + "\n")
    for k, v in summary.items():
        print(f"{k} = {v}")
    return 0


def cmd_mc_verify(args) -> int:
    result = mc_verify_similarity(MCSimilaritySpec(args.alpha, args.sigma, args.dim, args.samples, args.seed))
    print(f"empirical = {result.empirical:.6f}")
    print(f"predicted = {result.predicted:.6f}")
    print(f"gap = {result.gap:.6f}")
    return 0


def cmd_strip(args) -> int:
    model = load_checkpoint(args.model)
    stripped = model.strip() if isinstance(model, BranchSet) else model
    save_checkpoint(stripped, args.out)
    print(f"wrote deployment model ({len(stripped.params)} tensors) to {args.out}")
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "noise-bench": cmd_noise_bench,
    "ablate": cmd_ablate,
    "inspect": cmd_inspect,
    "confidence": cmd_confidence,
    "mc-verify": cmd_mc_verify,
    "strip": cmd_strip,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except (CLIError, ConfigError, DatasetFormatError, CheckpointError, MissingHeadsError, ValueError, OSError) as exc:
        print(f"{PROG} {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
