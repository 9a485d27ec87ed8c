"""The method matrix: which pipeline stages each compared method switches on."""

from __future__ import annotations

from dataclasses import dataclass, replace

from ..datagen import MODALITIES
from ..errors import ConfigError

METHODS = ("fedavg", "fedprox", "multimodal_fl", "mcp_fusion", "naive_dp")


@dataclass(frozen=True)
class MethodConfig:
    method: str
    use_schema_negotiation: bool
    use_secagg: bool
    use_dp: bool
    use_energy_scheduler: bool
    modalities: tuple = MODALITIES
    proximal: bool = False
    clip_updates: bool = True
    baseline_policy: str = "random_k"
    label: str = ""

    def __post_init__(self):
        if not self.label:
            object.__setattr__(self, "label", self.method)

    @property
    def policy(self) -> str:
        return "energy_aware" if self.use_energy_scheduler else self.baseline_policy

    @classmethod
    def named(cls, name: str) -> "MethodConfig":
        """Build a canonical method; ``fedavg@emr`` selects the unimodal modality."""
        base, _, modality = name.partition("@")
        if base in ("fedavg", "fedprox"):
            modality = modality or "im"
            if modality not in MODALITIES:
                raise ConfigError(f"unknown modality in method {name!r}", "experiment.methods")
            return cls(
                base, False, False, False, False,
                modalities=(modality,), proximal=base == "fedprox", label=name,
            )
        if modality:
            raise ConfigError(f"method {base!r} takes no modality suffix", "experiment.methods")
        if base == "multimodal_fl":
            return cls(base, False, False, False, False)
        if base == "mcp_fusion":
            return cls(base, True, True, True, True)
        if base == "naive_dp":
            # multimodal FL plus unclipped Gaussian noise
            return cls(base, False, False, True, False, clip_updates=False)
        raise ConfigError(f"unknown method {name!r}", "experiment.methods")

    def ablate(self, label: str | None = None, **toggles) -> "MethodConfig":
        changed = replace(self, **toggles)
        suffix = ",".join(f"{k}={v}" for k, v in sorted(toggles.items()))
        return replace(changed, label=label or f"{self.label}[{suffix}]")

    def validate(self) -> None:
        if self.baseline_policy not in ("random_k", "all"):
            raise ConfigError("baseline policy must be random_k or all")
        if not self.modalities or any(m not in MODALITIES for m in self.modalities):
            raise ConfigError(f"bad modality list {self.modalities}")
        if self.label != self.method:
            return
        # the baseline policy is an experiment-wide setting, not a method toggle
        canonical = replace(MethodConfig.named(self.method), baseline_policy=self.baseline_policy)
        if self != canonical:
            raise ConfigError(f"method {self.method!r} has non-canonical toggles; give it a new label")
