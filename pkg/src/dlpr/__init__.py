"""Learned phase retrieval from lensless intensity measurements.

Modules: ``optics`` (forward model), ``autodiff`` (reverse-mode engine),
``network`` (encoder/decoder and checkpoints), ``datasets``, ``training``,
``experiments`` and ``cli``.
"""

from dlpr.datasets import PerImageStandardizer
from dlpr.network import NetworkSpec, PhaseNet, load_checkpoint, save_checkpoint
from dlpr.optics import DiffractionSimulator, NoiseSpec, PropagationConfig, simulate_measurement
from dlpr.training import PhaseRetrievalRegressor, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "DiffractionSimulator",
    "NetworkSpec",
    "NoiseSpec",
    "PerImageStandardizer",
    "PhaseNet",
    "PhaseRetrievalRegressor",
    "PropagationConfig",
    "TrainConfig",
    "load_checkpoint",
    "save_checkpoint",
    "simulate_measurement",
    "train",
]
