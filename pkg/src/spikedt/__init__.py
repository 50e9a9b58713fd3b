"""Spiking decision transformer engine.

Return-conditioned sequence modeling over spike-domain representations:
differentiable LIF kernels with surrogate gradients, phase-shifted
positional spike codes, dendritically-routed spiking self-attention, a
local three-factor plasticity rule for the action head, classic-control
environments with scripted data policies, and a four-mode ablation
harness with spike-based energy metering.
"""

from .data import ClipDataset, build_dataset, load_dataset, save_dataset
from .envs import ENV_SPECS, make_env
from .harness import TrainConfig, ablate, evaluate, sweep, train
from .model import ModelConfig, SpikingDT, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "ClipDataset",
    "build_dataset",
    "load_dataset",
    "save_dataset",
    "ENV_SPECS",
    "make_env",
    "TrainConfig",
    "ablate",
    "evaluate",
    "sweep",
    "train",
    "ModelConfig",
    "SpikingDT",
    "load_checkpoint",
    "save_checkpoint",
    "__version__",
]
