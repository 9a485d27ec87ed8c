"""Simulated per-client links: latency, bandwidth and transfer times."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import RandomStream
from ..errors import ConfigError


@dataclass(frozen=True)
class NetworkConfig:
    bandwidth_min: float = 1.0
    bandwidth_max: float = 10.0
    latency_min: float = 10.0
    latency_max: float = 200.0
    link_ref: float = 10.0
    jitter: float = 0.2
    round_timeout_ms: float = 5000.0
    compute_ms_per_example: float = 0.5

    def validate(self) -> None:
        if not 0 < self.bandwidth_min <= self.bandwidth_max:
            raise ConfigError("network.bandwidth_min must be in (0, bandwidth_max]", "network.bandwidth_min")
        if not 0 < self.latency_min <= self.latency_max:
            raise ConfigError("network.latency_min must be in (0, latency_max]", "network.latency_min")
        if not self.link_ref > 0:
            raise ConfigError("network.link_ref must be > 0", "network.link_ref")
        if not 0 <= self.jitter < 1:
            raise ConfigError("network.jitter must be in [0, 1)", "network.jitter")
        if not self.round_timeout_ms > 0:
            raise ConfigError("network.round_timeout_ms must be > 0", "network.round_timeout_ms")
        if self.compute_ms_per_example < 0:
            raise ConfigError("network.compute_ms_per_example must be ≥ 0", "network.compute_ms_per_example")


@dataclass(frozen=True)
class NetworkModel:
    latency_ms: tuple
    bandwidth_mbps: tuple
    round_timeout_ms: float
    link_ref: float = 10.0
    jitter: float = 0.0
    compute_ms_per_example: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if any(v <= 0 for v in self.latency_ms) or any(v <= 0 for v in self.bandwidth_mbps):
            raise ConfigError("latencies and bandwidths must be positive")
        if self.round_timeout_ms <= 0:
            raise ConfigError("round timeout must be positive")

    @classmethod
    def sample(cls, n_clients: int, cfg: NetworkConfig, seed: int) -> "NetworkModel":
        gen = RandomStream(seed, "net:init").generator()
        bw = gen.uniform(cfg.bandwidth_min, cfg.bandwidth_max, n_clients)
        lat = gen.uniform(cfg.latency_min, cfg.latency_max, n_clients)
        return cls(
            latency_ms=tuple(float(v) for v in lat),
            bandwidth_mbps=tuple(float(v) for v in bw),
            round_timeout_ms=cfg.round_timeout_ms,
            link_ref=cfg.link_ref,
            jitter=cfg.jitter,
            compute_ms_per_example=cfg.compute_ms_per_example,
            seed=seed,
        )

    def bandwidth(self, k: int, round_: int) -> float:
        if self.jitter == 0:
            return self.bandwidth_mbps[k]
        u = RandomStream(self.seed, f"net:{round_}:{k}").uniform(1)[0]
        return self.bandwidth_mbps[k] * (1.0 - self.jitter + 2.0 * self.jitter * u)

    def link(self, k: int, round_: int) -> float:
        """Normalised link quality in [0, 1]."""
        return float(np.clip(self.bandwidth(k, round_) / self.link_ref, 0.0, 1.0))

    def transfer_ms(self, k: int, round_: int, n_bytes: int) -> float:
        return self.latency_ms[k] + n_bytes / 1e6 / self.bandwidth(k, round_) * 1000.0

    def compute_ms(self, n_examples: int, epochs: int) -> float:
        return n_examples * epochs * self.compute_ms_per_example
