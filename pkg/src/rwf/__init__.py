"""Energy-based associative routing layers for a small transformer, with a
single-pass class-incremental training and evaluation harness."""

from .backbone import ModelConfig, build_model, count_params, model_forward, predict
from .evaluation import ExperimentConfig, run_experiment
from .numerics import RngStream
from .routing import RoutingParams, free_energy, lipschitz_probe, route
from .stream import StreamConfig, make_synthetic_stream

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig",
    "ModelConfig",
    "RngStream",
    "RoutingParams",
    "StreamConfig",
    "build_model",
    "count_params",
    "free_energy",
    "lipschitz_probe",
    "make_synthetic_stream",
    "model_forward",
    "predict",
    "route",
    "run_experiment",
]
