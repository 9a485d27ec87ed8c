"""Exception types shared across the simulator."""

from __future__ import annotations


class MCPFLError(Exception):
    """Base class for all simulator errors."""


class ConfigError(MCPFLError):
    """Invalid configuration; ``key`` names the offending dotted path when known."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class LayoutError(MCPFLError):
    pass


class SchemaViolation(MCPFLError):
    pass


class NegotiationRejected(MCPFLError):
    def __init__(self, client_id: int):
        super().__init__(f"client {client_id} shares no schema with the server")
        self.client_id = client_id


class SkipClient(MCPFLError):
    pass


class InfiniteEpsilon(MCPFLError):
    """Raised when the privacy loss is unbounded (sigma == 0)."""


class EncodingOverflow(MCPFLError):
    pass


class ProtocolError(MCPFLError):
    pass


class RoundAbort(MCPFLError):
    def __init__(self, missing: list[int]):
        super().__init__(f"round aborted, missing updates from {sorted(missing)}")
        self.missing = sorted(missing)


class EmptyRound(MCPFLError):
    pass


class UndefinedMetric(MCPFLError):
    """AUC requested on a test set that contains a single class."""
