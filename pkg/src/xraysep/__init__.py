"""Separation of mixed X-ray images of double-sided paintings with connected
auto-encoders, built on a small numpy reverse-mode differentiation core."""

from .engine import (Case, OutcomeCase, SeparationResult, TrainConfig, TrainingAborted,
                     classify_outcome, fit_and_separate, mse_eval, run_trials, separate,
                     separate_baseline, sweep, train, train_baseline)
from .losses import LossBreakdown, LossOptions, LossWeights, loss_total
from .model import forward_graph, init_baseline, init_weights
from .pipeline import TripleDataset, extract_patches, mix_images, patch_count, stitch_patches
from .tensor import GradTape, NonFiniteError, Tensor

__version__ = "0.1.0"

__all__ = [
    "Case", "GradTape", "LossBreakdown", "LossOptions", "LossWeights", "NonFiniteError",
    "OutcomeCase", "SeparationResult", "Tensor", "TrainConfig", "TrainingAborted", "TripleDataset",
    "classify_outcome", "extract_patches", "fit_and_separate", "forward_graph", "init_baseline",
    "init_weights", "loss_total", "mix_images", "mse_eval", "patch_count", "run_trials", "separate",
    "separate_baseline", "stitch_patches", "sweep", "train", "train_baseline",
]
