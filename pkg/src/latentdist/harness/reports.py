"""Per-sample inspection of mined latent distributions and confidence scores."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..datagen import Batch, Split, oracle_latent
from ..model import BranchSet

__all__ = [
    "KL_FLOOR",
    "kl_divergence",
    "LatentRecord",
    "LatentReport",
    "inspect_latent",
    "ConfidenceRecord",
    "ConfidenceReport",
    "rank_descending",
    "confidence_report",
]

KL_FLOOR = 1e-12


def kl_divergence(p, q, floor: float = KL_FLOOR) -> float:
    """KL(p || q) with q floored at ``floor``; terms with p = 0 contribute 0."""
    p = np.asarray(p, dtype=float)
    q = np.maximum(np.asarray(q, dtype=float), floor)
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / q[nz])))


@dataclass
class LatentRecord:
    index: int
    annotation: int
    true_class: int
    flipped: bool
    mined: np.ndarray
    oracle: np.ndarray
    degenerate: bool
    kl: float | None
    argmax_class: int
    agrees: bool


@dataclass
class LatentReport:
    records: list[LatentRecord]
    mean_kl: float | None
    argmax_agreement: float
    flipped_recovery: float | None
    degenerate_count: int

    def rows(self):
        for r in self.records:
            yield {
                "index": r.index,
                "annotation": r.annotation,
                "true_class": r.true_class,
                "flipped": int(r.flipped),
                "mined": ",".join(repr(float(v)) for v in r.mined),
                "oracle": ",".join(repr(float(v)) for v in r.oracle),
                "kl": "" if r.kl is None else repr(r.kl),
                "argmax_class": r.argmax_class,
                "agrees": int(r.agrees),
                "degenerate": int(r.degenerate),
            }


def inspect_latent(model: BranchSet, split: Split) -> LatentReport:
    if split.posterior is None:
        raise ValueError("latent inspection needs ground-truth posteriors")
    mined = model.latent_distribution(split.X, split.y)
    records = []
    for i in range(len(split)):
        s = split.sample(i)
        oracle, degenerate = oracle_latent(s)
        pos = int(np.argmax(mined[i]))
        cls = pos + (pos >= s.annotation)
        oracle_cls = int(np.argmax(oracle))
        oracle_cls += oracle_cls >= s.annotation
        records.append(LatentRecord(
            index=i,
            annotation=s.annotation,
            true_class=s.true_class,
            flipped=s.flipped,
            mined=mined[i],
            oracle=oracle,
            degenerate=degenerate,
            kl=None if degenerate else kl_divergence(oracle, mined[i]),
            argmax_class=cls,
            agrees=cls == oracle_cls,
        ))
    kls = [r.kl for r in records if r.kl is not None]
    flipped = [r for r in records if r.flipped]
    return LatentReport(
        records=records,
        mean_kl=float(np.mean(kls)) if kls else None,
        argmax_agreement=float(np.mean([r.agrees for r in records if not r.degenerate])) if kls else 0.0,
        flipped_recovery=float(np.mean([r.argmax_class == r.true_class for r in flipped])) if flipped else None,
        degenerate_count=sum(r.degenerate for r in records),
    )


@dataclass
class ConfidenceRecord:
    batch: int
    position: int
    sample_index: int
    annotation: int
    alpha: float
    rank: int
    flipped: bool


@dataclass
class ConfidenceReport:
    records: list[ConfidenceRecord] = field(default_factory=list)

    def _mean(self, flipped: bool) -> float | None:
        vals = [r.alpha for r in self.records if r.flipped == flipped]
        return float(np.mean(vals)) if vals else None

    @property
    def mean_alpha_flipped(self) -> float | None:
        return self._mean(True)

    @property
    def mean_alpha_clean(self) -> float | None:
        return self._mean(False)


def rank_descending(alpha) -> np.ndarray:
    """Ranks 1..N by descending score; equal scores keep sample order."""
    alpha = np.asarray(alpha)
    order = np.argsort(-alpha, kind="stable")
    ranks = np.empty(len(alpha), dtype=int)
    ranks[order] = np.arange(1, len(alpha) + 1)
    return ranks


def confidence_report(model: BranchSet, batches: list[Batch], flipped: np.ndarray) -> ConfidenceReport:
    """Score every batch; ``flipped`` is indexed by the batches' sample indices."""
    report = ConfidenceReport()
    for b, batch in enumerate(batches):
        alpha = model.confidence(batch.X, batch.y)
        ranks = rank_descending(alpha)
        for pos, idx in enumerate(batch.indices):
            report.records.append(ConfidenceRecord(
                batch=b, position=pos, sample_index=int(idx), annotation=int(batch.y[pos]),
                alpha=float(alpha[pos]), rank=int(ranks[pos]), flipped=bool(flipped[idx]),
            ))
    return report
