"""Deterministic simulator for secure multi-modal federated learning with
schema negotiation, differentially private masked aggregation and
energy-aware client scheduling."""

from .config import ExperimentConfig, parse_config
from .core import ModelVector, RandomStream, RoundRecord
from .orchestrator.engine import Federation, run_experiment
from .orchestrator.methods import MethodConfig

__all__ = [
    "ExperimentConfig", "Federation", "MethodConfig", "ModelVector", "RandomStream",
    "RoundRecord", "parse_config", "run_experiment",
]
__version__ = "0.1.0"
