"""Client energy/link/staleness state and the participation policies.

The energy-aware policy admits a client only when

    E - dE >= tau  and  link >= gamma  and  staleness <= eta

Baseline policies (``random_k``, ``all``) ignore that test.  Selected clients
then drop out mid-round with probability ``min(0.9, kappa * dE / E)``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .core import RandomStream
from .errors import ConfigError, EmptyRound

POLICIES = ("energy_aware", "random_k", "all")
MAX_DROP = 0.9


@dataclass(frozen=True)
class ClientProfile:
    id: int
    energy: float
    projected_depletion: float
    link: float
    staleness: int = 0
    recharge_rate: float = 0.0
    train_cost: float = 0.05
    comm_cost_per_mb: float = 0.01


@dataclass(frozen=True)
class SchedulerConfig:
    tau: float = 0.1
    gamma: float = 0.2
    eta: int = 3
    policy: str = "energy_aware"
    dropout_kappa: float = 0.5
    random_k: int = 10
    staleness_readmit: bool = False
    # rounds with fewer selected clients are not started at all
    min_roster: int = 10

    def validate(self) -> None:
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError("sched.tau must be in [0, 1]", "sched.tau")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("sched.gamma must be in [0, 1]", "sched.gamma")
        if self.eta < 0:
            raise ConfigError("sched.eta must be ≥ 0", "sched.eta")
        if self.policy not in POLICIES:
            raise ConfigError(f"sched.policy must be one of {POLICIES}", "sched.policy")
        if self.dropout_kappa < 0:
            raise ConfigError("sched.dropout_kappa must be ≥ 0", "sched.dropout_kappa")
        if self.random_k < 1:
            raise ConfigError("sched.random_k must be ≥ 1", "sched.random_k")
        if self.min_roster < 1:
            raise ConfigError("sched.min_roster must be ≥ 1", "sched.min_roster")


@dataclass(frozen=True)
class EnergyConfig:
    """Initial battery population and per-round cost model."""

    init_min: float = 0.3
    init_max: float = 1.0
    recharge_fraction: float = 0.5
    recharge_rate: float = 0.02
    train_cost: float = 0.05
    comm_cost_per_mb: float = 0.01

    def validate(self) -> None:
        if not 0.0 <= self.init_min <= self.init_max <= 1.0:
            raise ConfigError("energy.init_min <= energy.init_max must lie in [0, 1]", "energy.init_min")
        if not 0.0 <= self.recharge_fraction <= 1.0:
            raise ConfigError("energy.recharge_fraction must be in [0, 1]", "energy.recharge_fraction")
        for key in ("recharge_rate", "train_cost", "comm_cost_per_mb"):
            if getattr(self, key) < 0:
                raise ConfigError(f"energy.{key} must be ≥ 0", f"energy.{key}")


def init_profiles(
    n_clients: int, links: Sequence[float], cfg: EnergyConfig, seed: int
) -> list[ClientProfile]:
    gen = RandomStream(seed, "energy:init").generator()
    energy = gen.uniform(cfg.init_min, cfg.init_max, n_clients)
    chargers = set(gen.permutation(n_clients)[: int(round(cfg.recharge_fraction * n_clients))].tolist())
    return [
        ClientProfile(
            id=k,
            energy=float(energy[k]),
            projected_depletion=cfg.train_cost,
            link=float(links[k]),
            staleness=0,
            recharge_rate=cfg.recharge_rate if k in chargers else 0.0,
            train_cost=cfg.train_cost,
            comm_cost_per_mb=cfg.comm_cost_per_mb,
        )
        for k in range(n_clients)
    ]


def eligibility(p: ClientProfile, cfg: SchedulerConfig) -> int:
    if cfg.policy != "energy_aware":
        return 1
    fresh = p.staleness <= cfg.eta or (cfg.staleness_readmit and p.staleness > 2 * cfg.eta)
    ok = (p.energy - p.projected_depletion >= cfg.tau) and (p.link >= cfg.gamma) and fresh
    return int(ok)


def select_round(
    profiles: Sequence[ClientProfile], cfg: SchedulerConfig, stream: RandomStream
) -> dict[int, int]:
    """Return ``alpha`` flags for every client; raises :class:`EmptyRound` if none is picked."""
    if not profiles:
        raise ValueError("select_round needs at least one profile")
    ids = sorted(p.id for p in profiles)
    if cfg.policy == "energy_aware":
        alpha = {p.id: eligibility(p, cfg) for p in profiles}
    elif cfg.policy == "all":
        alpha = {k: 1 for k in ids}
    elif cfg.policy == "random_k":
        k = min(cfg.random_k, len(ids))
        chosen = set(stream.generator().choice(ids, size=k, replace=False).tolist())
        alpha = {i: int(i in chosen) for i in ids}
    else:
        raise ConfigError(f"unknown policy {cfg.policy!r}", "sched.policy")
    alpha = {k: alpha[k] for k in ids}
    if not any(alpha.values()):
        raise EmptyRound("no client satisfies the participation policy")
    return alpha


def drop_probability(p: ClientProfile, kappa: float) -> float:
    return min(MAX_DROP, kappa * p.projected_depletion / max(p.energy, 1e-6))


def simulate_participation(p: ClientProfile, cfg: SchedulerConfig, stream: RandomStream) -> str:
    """Return ``"completed"`` or ``"dropped"`` for a selected client."""
    u = stream.uniform(1)[0]
    return "dropped" if u < drop_probability(p, cfg.dropout_kappa) else "completed"


def step_energy(
    p: ClientProfile,
    participated: bool,
    bytes_sent: int,
    succeeded: bool | None = None,
    round_ran: bool = True,
) -> ClientProfile:
    """Advance one round of battery dynamics.

    ``participated`` means the client spent energy on training this round;
    ``succeeded`` (defaults to ``participated``) means its update was
    aggregated, which resets staleness.  The depletion estimate is an EMA of
    the energy spent per round, idle rounds counting as zero.  A round that
    never started (``round_ran=False``) recharges batteries but does not age
    anyone's staleness.
    """
    if succeeded is None:
        succeeded = participated
    spent = 0.0
    if participated:
        spent = p.train_cost + p.comm_cost_per_mb * bytes_sent / 1e6
    energy = float(np.clip(p.energy - spent + p.recharge_rate, 0.0, 1.0))
    depletion = 0.5 * p.projected_depletion + 0.5 * spent
    return replace(
        p,
        energy=energy,
        projected_depletion=depletion,
        staleness=0 if succeeded else p.staleness + int(round_ran),
    )


def roster_of(alpha: Mapping[int, int]) -> list[int]:
    return sorted(k for k, a in alpha.items() if a)
