"""Noise-robustness benchmark and component ablation at desk scale."""

from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from ..datagen import SyntheticSpec, generate, inject_noise
from ..trainer import TrainConfig, train
from .config import REFERENCE_TRAIN, format_config

__all__ = [
    "ExperimentSpec",
    "CellResult",
    "ResultTable",
    "ABLATION_ORDER",
    "run_cell",
    "run_noise_benchmark",
    "run_ablation",
]

log = logging.getLogger(__name__)

# (latent distribution, similarity preserving, confidence) in reporting order
ABLATION_ORDER: tuple[tuple[bool, bool, bool], ...] = (
    (False, False, False),
    (True, False, False),
    (False, True, False),
    (False, False, True),
    (True, True, False),
    (False, True, True),
    (True, False, True),
    (True, True, True),
)


@dataclass(frozen=True)
class ExperimentSpec:
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    ratios: tuple[float, ...] = (0.1, 0.2, 0.3)
    seeds: tuple[int, ...] = (1, 2, 3)
    train_overrides: dict[str, Any] = field(default_factory=lambda: dict(REFERENCE_TRAIN))
    ablation_ratio: float = 0.3
    output_dir: Path | None = None
    jobs: int = 1

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if any(not 0.0 <= r <= 1.0 for r in (*self.ratios, self.ablation_ratio)):
            raise ValueError("noise ratios must lie in [0, 1]")

    def train_config(self, seed: int, switches: tuple[bool, bool, bool]) -> TrainConfig:
        lat, sp, conf = switches
        return TrainConfig(**{**self.train_overrides, "seed": seed, "use_latent": lat,
                              "use_sp": sp, "use_confidence": conf})

    def resolved(self) -> dict[str, Any]:
        out = {f"data.{k}": v for k, v in dataclasses.asdict(self.data).items()}
        base = dataclasses.asdict(TrainConfig(**self.train_overrides))
        for k in ("seed", "use_latent", "use_sp", "use_confidence"):
            base.pop(k)
        out.update({f"train.{k}": v for k, v in base.items()})
        out.update({"ratios": self.ratios, "seeds": self.seeds, "ablation_ratio": self.ablation_ratio})
        return out


@dataclass
class CellResult:
    variant: str
    ratio: float
    seed: int
    test_acc: float | None = None
    flipped_recovery: float | None = None
    mean_alpha: float | None = None
    error: str | None = None


@dataclass
class ResultTable:
    """Rows of (variant, ratio) aggregated over seeds; population std."""

    title: str
    cells: list[CellResult]
    config: dict[str, Any]

    def rows(self) -> list[dict[str, Any]]:
        grouped: dict[tuple[str, float], list[CellResult]] = {}
        for c in self.cells:
            grouped.setdefault((c.variant, c.ratio), []).append(c)
        rows = []
        for (variant, ratio), cells in grouped.items():
            accs = [c.test_acc for c in cells if c.error is None]
            rows.append({
                "variant": variant,
                "ratio": ratio,
                "mean_acc": float(np.mean(accs)) if accs else None,
                "std_acc": float(np.std(accs)) if accs else None,
                "runs": len(accs),
                "failed": len(cells) - len(accs),
                "per_seed": ",".join("fail" if c.error else repr(c.test_acc) for c in cells),
            })
        return rows

    def mean(self, variant: str, ratio: float) -> float | None:
        for r in self.rows():
            if r["variant"] == variant and r["ratio"] == ratio:
                return r["mean_acc"]
        raise KeyError((variant, ratio))

    def to_tsv(self) -> str:
        rows = self.rows()
        cols = ["variant", "ratio", "mean_acc", "std_acc", "runs", "failed", "per_seed"]
        lines = [format_config(self.config).rstrip("\n"), "\t".join(cols)]
        for r in rows:
            lines.append("\t".join("" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else str(r[c]))
                                   for c in cols))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        header = ["variant", "noise", "accuracy (%)", "runs"]
        body = []
        for r in self.rows():
            acc = "failed" if r["mean_acc"] is None else f"{100 * r['mean_acc']:.2f} +/- {100 * r['std_acc']:.2f}"
            body.append([r["variant"], f"{100 * r['ratio']:.0f}%", acc, f"{r['runs']}"])
        widths = [max(len(x) for x in col) for col in zip(header, *body)]
        fmt = lambda row: "  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip()  # noqa: E731
        lines = [self.title, format_config(self.config).rstrip("\n"), fmt(header), fmt(["-" * w for w in widths])]
        lines += [fmt(row) for row in body]
        return "\n".join(lines) + "\n"

    def write(self, directory: Path, stem: str) -> None:
        directory.mkdir(parents=True, exist_ok=True)
        (directory / f"{stem}.tsv").write_text(self.to_tsv())
        (directory / f"{stem}.txt").write_text(self.to_text())


def _variant_name(switches: tuple[bool, bool, bool]) -> str:
    if switches == (False, False, False):
        return "baseline"
    if switches == (True, True, True):
        return "full"
    names = [n for n, on in zip(("latent", "sp", "confidence"), switches) if on]
    return "+".join(names)


def run_cell(data: SyntheticSpec, ratio: float, seed: int, config: TrainConfig, variant: str,
             metric_log: Path | None = None) -> CellResult:
    """Train one model on freshly noised data; failures are captured, not raised."""
    try:
        dataset = inject_noise(generate(data), ratio, seed)
        _, records = train(dataset, config)
        if metric_log is not None:
            metric_log.parent.mkdir(parents=True, exist_ok=True)
            metric_log.write_text("".join(r.to_json() + "\n" for r in records))
        last = records[-1]
        return CellResult(variant, ratio, seed, last.test_acc, last.flipped_recovery, last.mean_alpha)
    except Exception as exc:  # one bad cell must not sink the table
        log.exception("cell %s ratio=%s seed=%s failed", variant, ratio, seed)
        return CellResult(variant, ratio, seed, error=f"{type(exc).__name__}: {exc}")


def _run_cells(spec: ExperimentSpec, jobs: list[tuple]) -> list[CellResult]:
    if spec.jobs <= 1:
        return [run_cell(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=spec.jobs) as pool:
        futures = [pool.submit(run_cell, *job) for job in jobs]
        return [f.result() for f in futures]


def _log_path(spec: ExperimentSpec, variant: str, ratio: float, seed: int) -> Path | None:
    if spec.output_dir is None:
        return None
    return Path(spec.output_dir) / "logs" / f"{variant}_r{ratio:g}_s{seed}.jsonl"


def run_noise_benchmark(spec: ExperimentSpec) -> ResultTable:
    jobs = []
    for ratio in spec.ratios:
        for switches in ((False, False, False), (True, True, True)):
            name = _variant_name(switches)
            for seed in spec.seeds:
                jobs.append((spec.data, ratio, seed, spec.train_config(seed, switches), name,
                             _log_path(spec, name, ratio, seed)))
    table = ResultTable("noise benchmark: test accuracy, mean +/- std over seeds",
                        _run_cells(spec, jobs), spec.resolved())
    if spec.output_dir is not None:
        table.write(Path(spec.output_dir), "noise_bench")
    return table


def run_ablation(spec: ExperimentSpec) -> ResultTable:
    ratio = spec.ablation_ratio
    jobs = []
    for switches in ABLATION_ORDER:
        name = _variant_name(switches)
        for seed in spec.seeds:
            jobs.append((spec.data, ratio, seed, spec.train_config(seed, switches), name,
                         _log_path(spec, name, ratio, seed)))
    table = ResultTable("component ablation: test accuracy, mean +/- std over seeds",
                        _run_cells(spec, jobs), spec.resolved())
    if spec.output_dir is not None:
        table.write(Path(spec.output_dir), "ablation")
    return table
