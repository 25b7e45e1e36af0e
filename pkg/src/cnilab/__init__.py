"""Colored noise injection: learned low-rank Gaussian noise for adversarial robustness."""
from .attacks import (
    AttackConfig,
    BlackBoxModel,
    blackbox_attack,
    fgsm,
    nes_gradient_estimate,
    pgd,
    project_linf,
    transfer_attack,
)
from .data import Dataset, gen_synthetic, load_idx, save_idx
from .estimator import NoiseInjectedClassifier
from .noise import ColoredNoiseParams, InjectionSite, covariance, forward_with_noise, init_noise, sample
from .rng import SeedStreams
from .sweep import RunReport, SweepSpec, emit_report, read_report, run_sweep
from .tensor import Tensor, backward, finite_difference_grad
from .training import Checkpoint, TrainConfig, evaluate, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "AttackConfig",
    "BlackBoxModel",
    "Checkpoint",
    "ColoredNoiseParams",
    "Dataset",
    "InjectionSite",
    "NoiseInjectedClassifier",
    "RunReport",
    "SeedStreams",
    "SweepSpec",
    "Tensor",
    "TrainConfig",
    "backward",
    "blackbox_attack",
    "covariance",
    "emit_report",
    "evaluate",
    "fgsm",
    "finite_difference_grad",
    "forward_with_noise",
    "gen_synthetic",
    "init_noise",
    "load_checkpoint",
    "load_idx",
    "nes_gradient_estimate",
    "pgd",
    "project_linf",
    "read_report",
    "run_sweep",
    "sample",
    "save_checkpoint",
    "save_idx",
    "train",
    "transfer_attack",
]
