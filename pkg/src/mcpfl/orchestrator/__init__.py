"""Round orchestration, wire protocol, network model and evaluation.

The round engine lives in :mod:`mcpfl.orchestrator.engine`; it is not imported
here because it depends on :mod:`mcpfl.config`, which itself needs the method
and network types below.
"""

from .methods import METHODS, MethodConfig
from .metrics import accuracy, auc, evaluate, f1
from .network import NetworkConfig, NetworkModel
from .protocol import WireMessage, validate_round, validate_transcript

__all__ = [
    "METHODS", "MethodConfig", "accuracy", "auc", "evaluate", "f1",
    "NetworkConfig", "NetworkModel", "WireMessage", "validate_round", "validate_transcript",
]
