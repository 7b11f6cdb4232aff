"""Training loop: class-covering batches, loss assembly, Adam updates, metric logging."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import diffcore as dc
from . import losses as L
from .datagen import Batch, Dataset, Split, sample_batch
from .model import (
    BranchSet,
    estimate_confidence,
    load_checkpoint,
    predict_latent_distribution,
    save_checkpoint,
)

__all__ = [
    "TrainConfig",
    "MetricRecord",
    "StepResult",
    "Adam",
    "NonFiniteLossError",
    "training_step",
    "train",
    "evaluate",
    "flipped_recovery_rate",
    "learning_rate",
    "save_checkpoint",
    "load_checkpoint",
    "write_metric_log",
    "read_metric_log",
]

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    sharpen_t: float = L.DEFAULT_SHARPEN_T
    omega: float = L.DEFAULT_OMEGA
    gamma: float = L.DEFAULT_GAMMA
    beta: int = L.DEFAULT_BETA
    max_epoch: int = 40
    iters_per_epoch: int | None = None
    batch_size: int = 72
    lr: float = 1e-3
    lr_decay_epochs: tuple[int, ...] = (10, 20)
    lr_decay_factor: float = 0.1
    weight_decay: float = 1e-4
    uncertainty_weight_decay: bool = True
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    hidden_dim: int = 32
    head_dim: int = 16
    seed: int = 0
    checked: bool = False
    use_latent: bool = True
    use_sp: bool = True
    use_confidence: bool = True
    confidence_grad_to_features: bool = True
    soft_renormalize: bool = False

    def __post_init__(self):
        if not self.sharpen_t > 0:
            raise ValueError("sharpen_t must be positive")
        if self.max_epoch < 1:
            raise ValueError("max_epoch must be >= 1")
        if self.beta < 1:
            raise ValueError("beta must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    @property
    def ablation_label(self) -> str:
        return "".join("1" if s else "0" for s in (self.use_latent, self.use_sp, self.use_confidence))


@dataclass
class MetricRecord:
    epoch: int
    iteration: int
    lr: float
    loss_wce: float
    loss_soft: float
    loss_sp: float
    loss_aux: float
    loss_total: float
    train_acc: float
    test_acc: float | None
    mean_alpha: float | None
    flipped_recovery: float | None

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=False)


@dataclass
class StepResult:
    total: dc.Tensor
    components: dict[str, float]
    alpha: np.ndarray | None = None
    latent: np.ndarray | None = None


class Adam:
    """Adam with coupled (L2-style) weight decay; parameters without a gradient are skipped."""

    def __init__(self, params: dict[str, dc.Tensor], betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, no_decay: Iterable[str] = ()):
        self.params = params
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.no_decay = set(no_decay)
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.steps = {k: 0 for k in params}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and name not in self.no_decay:
                g = g + self.weight_decay * p.value
            self.steps[name] += 1
            t = self.steps[name]
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / (1 - self.beta1**t)
            v_hat = self.v[name] / (1 - self.beta2**t)
            p.value = p.value - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def learning_rate(config: TrainConfig, epoch: int) -> float:
    drops = sum(1 for m in config.lr_decay_epochs if epoch > m)
    return config.lr * config.lr_decay_factor**drops


def training_step(model: BranchSet, X: np.ndarray, y: np.ndarray, config: TrainConfig,
                  epoch: int) -> StepResult:
    """Forward pass of one batch; returns the total loss graph and component values.

    Disabled components are the constant 0 and contribute no gradient.
    """
    C = model.num_classes
    y = np.asarray(y)
    h = model.trunk_forward(X)
    f_target, z_target = model.branch_features(0, h)
    aux = [model.branch_features(k + 1, h) for k in range(C)]

    l_aux = L.aux_ce(y, [z for _, z in aux])

    latent = None
    l_soft = dc.Tensor(0.0)
    if config.use_latent:
        latent = predict_latent_distribution([z for _, z in aux], y).value
        sharp = L.sharpen(latent, config.sharpen_t)
        l_soft = L.soft_l2(dc.row_softmax(z_target), sharp, y, renormalize=config.soft_renormalize)

    l_sp = dc.Tensor(0.0)
    if config.use_sp:
        A_target = L.similarity_matrix(f_target)
        l_sp = L.msp_loss(A_target, [L.similarity_matrix(f) for f, _ in aux], y)

    alpha = None
    if config.use_confidence:
        feats = f_target if config.confidence_grad_to_features else dc.stop_gradient(f_target)
        alpha = estimate_confidence(feats, y, model.uncertainty, C)
    l_wce = L.weighted_ce(z_target, alpha, y)

    total = L.total_loss(l_wce, l_soft, l_sp, l_aux, epoch, config.beta, config.omega, config.gamma)
    components = {
        "loss_wce": l_wce.item(),
        "loss_soft": l_soft.item(),
        "loss_sp": l_sp.item(),
        "loss_aux": l_aux.item(),
        "loss_total": total.item(),
    }
    return StepResult(total, components, None if alpha is None else alpha.value[:, 0].copy(), latent)


def _check_finite(components: dict[str, float], epoch: int, iteration: int) -> None:
    bad = [k for k, v in components.items() if not math.isfinite(v)]
    if bad:
        raise NonFiniteLossError(f"non-finite {', '.join(bad)} at epoch {epoch}, iteration {iteration}")


def evaluate(model, split: Split, against: str = "annotation") -> float:
    """Accuracy of the target head's argmax (ties to the lowest class index)."""
    if len(split) == 0:
        raise ValueError("cannot evaluate on an empty split")
    truth = split.y if against == "annotation" else split.true_class
    pred = np.argmax(model.target_logits(split.X), axis=1)
    return float(np.mean(pred == truth))


def flipped_recovery_rate(model: BranchSet, split: Split) -> float | None:
    """Fraction of flipped samples whose mined latent argmax is the hidden true class."""
    idx = np.flatnonzero(split.flipped)
    if len(idx) == 0:
        return None
    y = split.y[idx]
    latent = model.latent_distribution(split.X[idx], y)
    pos = np.argmax(latent, axis=1)
    predicted = pos + (pos >= y)
    return float(np.mean(predicted == split.true_class[idx]))


def train(dataset: Dataset, config: TrainConfig,
          on_record: Callable[[MetricRecord], None] | None = None) -> tuple[BranchSet, list[MetricRecord]]:
    """Run the full schedule; one MetricRecord per epoch."""
    C = dataset.num_classes
    if config.batch_size < C:
        raise ValueError(f"batch size {config.batch_size} < number of classes {C}")
    model = BranchSet(C, dataset.feature_dim, config.hidden_dim, config.head_dim, seed=config.seed)
    no_decay = () if config.uncertainty_weight_decay else [k for k in model.params if k.startswith("uncertainty.")]
    opt = Adam(model.params, config.adam_betas, config.adam_eps, config.weight_decay, no_decay)
    iters = config.iters_per_epoch or math.ceil(len(dataset.train) / config.batch_size)
    batch_rng = np.random.default_rng([config.seed, 4])
    records: list[MetricRecord] = []
    iteration = 0
    for epoch in range(1, config.max_epoch + 1):
        lr = learning_rate(config, epoch)
        sums: dict[str, float] = {}
        alphas = []
        for _ in range(iters):
            batch: Batch = sample_batch(dataset.train, config.batch_size, C, batch_rng)
            with dc.checked_mode(config.checked):
                result = training_step(model, batch.X, batch.y, config, epoch)
            iteration += 1
            if config.checked:
                _check_finite(result.components, epoch, iteration)
            elif not math.isfinite(result.components["loss_total"]):
                log.warning("non-finite loss at epoch %d iteration %d", epoch, iteration)
            opt.zero_grad()
            dc.backward(result.total)
            opt.step(lr)
            for k, v in result.components.items():
                sums[k] = sums.get(k, 0.0) + v
            if result.alpha is not None:
                alphas.append(result.alpha)
        record = MetricRecord(
            epoch=epoch,
            iteration=iteration,
            lr=lr,
            **{k: v / iters for k, v in sums.items()},
            train_acc=evaluate(model, dataset.train),
            test_acc=evaluate(model, dataset.test) if len(dataset.test) else None,
            mean_alpha=float(np.mean(np.concatenate(alphas))) if alphas else None,
            flipped_recovery=flipped_recovery_rate(model, dataset.train),
        )
        records.append(record)
        log.debug("epoch %d: %s", epoch, record)
        if on_record is not None:
            on_record(record)
    opt.zero_grad()
    return model, records


def write_metric_log(records: Iterable[MetricRecord], path: str | Path) -> None:
    Path(path).write_text("".join(r.to_json() + "\n" for r in records))


def read_metric_log(path: str | Path) -> list[MetricRecord]:
    return [MetricRecord(**json.loads(line)) for line in Path(path).read_text().splitlines() if line.strip()]
