"""Adaptive multiview ICA: noisy group ICA with learned noise levels."""

from .model import (
    GradientBundle,
    ModelParams,
    MultiViewDataset,
    SingularMatrixError,
    loss_gradients,
    neg_log_likelihood,
    smoothed_density,
    unmix,
    weighted_mean_sources,
)
from .optim_em import EmConfig, fit_em
from .optim_mle import FitResult, OptimizerConfig, fit_mle
from .posterior import mmse_sources
from .synth import SynthConfig, generate_dataset

__version__ = "0.1.0"
