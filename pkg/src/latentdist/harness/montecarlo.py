"""Monte-Carlo check of the expected class similarity used by the confidence module.

For class members spread around a unit center ``c`` at Gaussian angular
offsets ``theta`` and a query feature ``f`` at angle ``alpha`` from ``c``,
the mean inner product <x, f> should equal cos(alpha) * E[cos(theta)].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = ["MCSimilaritySpec", "MCResult", "mc_verify_similarity"]


@dataclass(frozen=True)
class MCSimilaritySpec:
    alpha: float
    sigma: float
    dim: int = 32
    samples: int = 100_000
    seed: int = 0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if self.dim < 2:
            raise ValueError("dim must be >= 2")


@dataclass(frozen=True)
class MCResult:
    empirical: float
    predicted: float
    gap: float
    mean_cos_theta: float


def _truncated_normal(rng: np.random.Generator, sigma: float, size: int) -> np.ndarray:
    out = rng.normal(0.0, sigma, size)
    bad = np.abs(out) > math.pi
    while bad.any():
        out[bad] = rng.normal(0.0, sigma, int(bad.sum()))
        bad = np.abs(out) > math.pi
    return out


def _unit_orthogonal(rng: np.random.Generator, c: np.ndarray, count: int) -> np.ndarray:
    u = rng.standard_normal((count, c.size))
    u -= np.outer(u @ c, c)
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def mc_verify_similarity(spec: MCSimilaritySpec) -> MCResult:
    rng = np.random.default_rng(spec.seed)
    c = rng.standard_normal(spec.dim)
    c /= np.linalg.norm(c)
    v = _unit_orthogonal(rng, c, 1)[0]
    f = math.cos(spec.alpha) * c + math.sin(spec.alpha) * v

    theta = _truncated_normal(rng, spec.sigma, spec.samples)
    u = _unit_orthogonal(rng, c, spec.samples)
    x = np.cos(theta)[:, None] * c + np.sin(theta)[:, None] * u

    empirical = float(np.mean(x @ f))
    mean_cos = float(np.mean(np.cos(theta)))
    predicted = math.cos(spec.alpha) * mean_cos
    return MCResult(empirical, predicted, abs(empirical - predicted), mean_cos)
