"""Loss terms of the latent-distribution training objective and its ramp weights.

All functions take :class:`~latentdist.diffcore.Tensor` inputs for the
differentiable arguments and plain arrays for labels and constants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .model import ClassIndexMap

__all__ = [
    "RampSchedule",
    "branch_ce",
    "aux_ce",
    "sharpen",
    "soft_l2",
    "similarity_matrix",
    "sp_mask",
    "msp_loss",
    "weighted_ce",
    "ramp_up",
    "ramp_down",
    "total_loss",
]

DEFAULT_SHARPEN_T = 1.2
DEFAULT_OMEGA = 0.5
DEFAULT_BETA = 6
DEFAULT_GAMMA = 1e3


def _cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    onehot = np.eye(logits.shape[1])[targets]
    picked = dc.sum(dc.mul(dc.row_log_softmax(logits), Tensor(onehot)))
    return dc.mul(picked, -1.0 / len(targets))


def branch_ce(labels, logits: Tensor, branch_class: int, num_classes: int) -> Tensor:
    """Mean CE of one auxiliary head over the samples routed to it.

    ``labels`` must not contain ``branch_class``; positions follow
    :class:`ClassIndexMap`.
    """
    labels = np.asarray(labels)
    if np.any(labels == branch_class):
        raise ValueError(f"a sample annotated {branch_class} was routed to its own auxiliary branch")
    if len(labels) == 0:
        return Tensor(0.0)
    return _cross_entropy(logits, ClassIndexMap(branch_class, num_classes).positions(labels))


def aux_ce(labels, aux_logits, drop_empty: bool = False) -> Tensor:
    """Average over branches of each head's CE on the batch minus its own class.

    ``aux_logits[k]`` are head ``k``'s logits for the full batch; rows
    annotated ``k`` are removed before the loss. A head with nothing left
    contributes 0 and, unless ``drop_empty``, still counts in the average.
    """
    labels = np.asarray(labels)
    C = len(aux_logits)
    terms = []
    for k, logits in enumerate(aux_logits):
        keep = labels != k
        if not keep.any():
            continue
        terms.append(branch_ce(labels[keep], dc.masked_select(logits, keep), k, C))
    denom = len(terms) if drop_empty else C
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = dc.add(total, t)
    return dc.mul(total, 1.0 / denom)


def sharpen(dist, T: float) -> np.ndarray:
    """Raise entries to 1/T and renormalise each row (T > 1 flattens)."""
    if not T > 0:
        raise ValueError(f"sharpen temperature must be positive, got {T}")
    p = np.asarray(dist.value if isinstance(dist, Tensor) else dist, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("distribution has negative entries")
    # work in the log domain so tiny probabilities survive 1/T < 1 exponents
    with np.errstate(divide="ignore"):
        logp = np.log(p) / T
    peak = np.max(logp, axis=-1, keepdims=True)
    if np.any(~np.isfinite(peak)):
        raise ValueError("cannot sharpen an all-zero distribution")
    w = np.exp(logp - peak)
    return w / np.sum(w, axis=-1, keepdims=True)


def _negative_layout(latent: np.ndarray, labels: np.ndarray, num_classes: int):
    """Scatter (N, C-1) latent rows into (N, C) with a zero at each annotation."""
    N = len(labels)
    if latent.shape != (N, num_classes - 1):
        raise dc.ShapeError(f"latent distribution shape {latent.shape} != ({N}, {num_classes - 1})")
    mask = np.ones((N, num_classes))
    mask[np.arange(N), labels] = 0.0
    full = np.zeros((N, num_classes))
    full[mask.astype(bool)] = latent.ravel()
    return full, mask


def soft_l2(target_probs: Tensor, latent, labels, renormalize: bool = False) -> Tensor:
    """Mean squared gap between target probabilities and the latent distribution.

    Only the C-1 non-annotated positions of every row enter the sum, which
    is divided by N(C-1). The target probabilities are used as they are
    (their negative entries do not sum to one) unless ``renormalize``.
    """
    labels = np.asarray(labels)
    N, C = target_probs.shape
    latent = np.asarray(latent.value if isinstance(latent, Tensor) else latent)
    full, mask = _negative_layout(latent, labels, C)
    probs = target_probs
    if renormalize:
        neg = dc.mul(probs, Tensor(mask))
        inv_mass = dc.exp(dc.mul(dc.log(dc.sum(neg, axis=1)), -1.0))
        probs = dc.mul(neg, inv_mass)
    diff = dc.mul(dc.sub(probs, Tensor(full)), Tensor(mask))
    return dc.mul(dc.frobenius_norm_sq(diff), 1.0 / (N * (C - 1)))


def similarity_matrix(features: Tensor) -> Tensor:
    """Row-normalised Gram matrix: row j is f_j . F^T scaled to unit L2 norm."""
    gram = dc.matmul(features, dc.transpose(features))
    return dc.row_l2_normalize(gram)


def sp_mask(labels, cls: int) -> np.ndarray:
    """Binary N x N mask that zeroes every pair touching a sample annotated ``cls``."""
    keep = np.asarray(labels) != cls
    return np.outer(keep, keep).astype(np.float64)


def msp_loss(A_target: Tensor, A_aux, labels) -> Tensor:
    """Masked multi-branch similarity-preserving loss.

    ``A_aux[i]`` is the similarity matrix of auxiliary head ``i`` on the
    whole batch; pairs involving class ``i`` are masked out, and each term
    is scaled by 1 / N_i^2 with N_i the number of samples not annotated i.
    """
    labels = np.asarray(labels)
    C = len(A_aux)
    total = None
    for i, A_i in enumerate(A_aux):
        if A_i.shape != A_target.shape:
            raise dc.ShapeError("similarity matrices must share one shape")
        n_i = int(np.sum(labels != i))
        if n_i == 0:
            raise ValueError(f"every sample is annotated {i}; masked term undefined")
        mask = Tensor(sp_mask(labels, i))
        diff = dc.sub(dc.mul(mask, A_target), dc.mul(mask, A_i))
        term = dc.mul(dc.frobenius_norm_sq(diff), 1.0 / n_i**2)
        total = term if total is None else dc.add(total, term)
    return dc.mul(total, 1.0 / C)


def weighted_ce(logits: Tensor, alpha, labels) -> Tensor:
    """CE after scaling each sample's whole logit vector by its confidence.

    ``alpha`` is an (N, 1) tensor, or None for the unweighted loss.
    """
    labels = np.asarray(labels)
    scaled = logits if alpha is None else dc.mul(alpha, logits)
    return _cross_entropy(scaled, labels)


def _check_beta(beta) -> None:
    if beta < 1:
        raise ValueError(f"epoch threshold must be >= 1, got {beta}")


def ramp_up(epoch: float, beta: float) -> float:
    _check_beta(beta)
    return math.exp(-((1.0 - epoch / beta) ** 2)) if epoch <= beta else 1.0


def ramp_down(epoch: float, beta: float) -> float:
    _check_beta(beta)
    return 1.0 if epoch <= beta else math.exp(-((1.0 - beta / epoch) ** 2))


@dataclass(frozen=True)
class RampSchedule:
    beta: int = DEFAULT_BETA

    def __post_init__(self):
        _check_beta(self.beta)

    def up(self, epoch: float) -> float:
        return ramp_up(epoch, self.beta)

    def down(self, epoch: float) -> float:
        return ramp_down(epoch, self.beta)


def total_loss(l_wce, l_soft, l_sp, l_aux, epoch: float, beta: float = DEFAULT_BETA,
               omega: float = DEFAULT_OMEGA, gamma: float = DEFAULT_GAMMA):
    """w_u(e) * (L_wce + omega L_soft + gamma L_sp) + w_d(e) * L_aux.

    Works on tensors or plain floats.
    """
    target_part = dc.add(dc.add(l_wce, dc.mul(l_soft, omega)), dc.mul(l_sp, gamma))
    out = dc.add(dc.mul(target_part, ramp_up(epoch, beta)), dc.mul(l_aux, ramp_down(epoch, beta)))
    if not any(isinstance(v, Tensor) for v in (l_wce, l_soft, l_sp, l_aux)):
        return out.item()
    return out
