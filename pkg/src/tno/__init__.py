"""Temporal neural operator toolkit.

From-scratch reverse-mode autodiff and NN kernels, the temporal-neural-
operator architecture with its ablation variants, finite-difference PDE data
generation, two-phase training, and a rollout evaluation harness.
"""

from .tensor import Tape, Tensor, backward, hadamard, masked_mse, xavier_init
from .model import ForecastBundle, TNOConfig, TNOModel, count_parameters, tno_forward
from .data import BundleSample, CoefficientField, NormStats, Trajectory
from .training import TrainLog, TrainPlan, rollout, train_run
from .optim import AdamState, LRSchedule, adam_step, schedule_lr

__version__ = "0.1.0"

__all__ = [
    "AdamState", "BundleSample", "CoefficientField", "ForecastBundle", "LRSchedule",
    "NormStats", "Tape", "Tensor", "TNOConfig", "TNOModel", "TrainLog", "TrainPlan",
    "Trajectory", "adam_step", "backward", "count_parameters", "hadamard",
    "masked_mse", "rollout", "schedule_lr", "tno_forward", "train_run", "xavier_init",
]
