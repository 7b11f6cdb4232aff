"""Latent label-distribution mining with pairwise confidence estimation.

Training uses one auxiliary (C-1)-way head per class to mine where a
sample's evidence points besides its annotation, a confidence module fed
by in-batch similarity statistics, and a similarity-preserving penalty
across heads. Only the trunk and target head are kept for deployment.
"""

from .datagen import Dataset, SyntheticSpec, generate, inject_noise, sample_batch
from .estimator import LatentDistributionClassifier
from .model import BranchSet, TargetModel, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, evaluate, train

__all__ = [
    "BranchSet",
    "Dataset",
    "LatentDistributionClassifier",
    "SyntheticSpec",
    "TargetModel",
    "TrainConfig",
    "evaluate",
    "generate",
    "inject_noise",
    "load_checkpoint",
    "sample_batch",
    "save_checkpoint",
    "train",
]

__version__ = "0.1.0"
