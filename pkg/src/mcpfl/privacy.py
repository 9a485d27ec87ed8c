"""Update clipping, Gaussian perturbation and closed-form privacy accounting.

The accountant uses the simplified bound

    eps_total(R) = sqrt(2 R ln(1/delta)) * sensitivity / sigma

evaluated per client over the rounds it has actually contributed to.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

from .core import ModelVector, RandomStream, l2_norm
from .errors import ConfigError, InfiniteEpsilon

UNBOUNDED = math.inf


@dataclass(frozen=True)
class PrivacyConfig:
    clip_norm: float = 1.0
    sigma: float = 0.5
    dp_delta: float = 1e-5
    epsilon_max: float = UNBOUNDED

    def validate(self) -> None:
        if not self.clip_norm > 0:
            raise ConfigError("dp.clip_norm must be > 0", "dp.clip_norm")
        if self.sigma < 0:
            raise ConfigError("dp.sigma must be ≥ 0", "dp.sigma")
        if not 0.0 < self.dp_delta < 1.0:
            raise ConfigError("dp.delta must be in (0, 1)", "dp.delta")
        if not self.epsilon_max > 0:
            raise ConfigError("dp.epsilon_max must be > 0", "dp.epsilon_max")


@dataclass(frozen=True)
class BudgetState:
    rounds_participated: int = 0

    def epsilon_spent(self, cfg: PrivacyConfig) -> float:
        if self.rounds_participated == 0:
            return 0.0
        try:
            return epsilon_total(self.rounds_participated, cfg.dp_delta, cfg.clip_norm, cfg.sigma)
        except InfiniteEpsilon:
            return math.inf

    def charged(self) -> "BudgetState":
        return BudgetState(self.rounds_participated + 1)


class Gate(str, Enum):
    ALLOWED = "allowed"
    EXHAUSTED = "exhausted"


def clip(update: ModelVector, clip_norm: float) -> ModelVector:
    """Scale ``update`` down so that its L2 norm is at most ``clip_norm``."""
    if not clip_norm > 0:
        raise ValueError("clip_norm must be > 0")
    norm = l2_norm(update)
    if norm <= clip_norm:
        return update
    return update.scale(clip_norm / norm)


def perturb(update: ModelVector, sigma: float, stream: RandomStream) -> ModelVector:
    if sigma < 0:
        raise ValueError("sigma must be ≥ 0")
    if sigma == 0:
        return update
    noise = stream.gaussian(len(update))
    return update.with_values(update.values + sigma * noise)


def epsilon_total(R: int, dp_delta: float, sensitivity: float, sigma: float) -> float:
    if not 0.0 < dp_delta < 1.0:
        raise ValueError("dp_delta must be in (0, 1)")
    if R < 0:
        raise ValueError("R must be ≥ 0")
    if sigma == 0:
        raise InfiniteEpsilon("sigma = 0 gives no privacy")
    if sigma < 0:
        raise ValueError("sigma must be ≥ 0")
    return math.sqrt(2.0 * R * math.log(1.0 / dp_delta)) * sensitivity / sigma


def gate(budget: BudgetState, cfg: PrivacyConfig) -> Gate:
    """Admit a client only if one more round keeps it within ``epsilon_max``."""
    if math.isinf(cfg.epsilon_max):
        return Gate.ALLOWED
    try:
        eps = epsilon_total(budget.rounds_participated + 1, cfg.dp_delta, cfg.clip_norm, cfg.sigma)
    except InfiniteEpsilon:
        return Gate.EXHAUSTED
    return Gate.ALLOWED if eps <= cfg.epsilon_max else Gate.EXHAUSTED


def privatize(
    update: ModelVector, cfg: PrivacyConfig, stream: RandomStream, use_clip: bool = True
) -> ModelVector:
    """Clip then perturb; the clip step is skipped only for the naive baseline."""
    if use_clip:
        update = clip(update, cfg.clip_norm)
    return perturb(update, cfg.sigma, stream)

