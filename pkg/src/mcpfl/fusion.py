"""Schema registry, capability negotiation and the modality fusion map.

Fusion is validated concatenation: latents are laid out in the fixed global
modality order, absent modalities are zero-filled, and one presence flag per
agreed modality is appended at the end.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .datagen import MODALITIES
from .errors import NegotiationRejected, SchemaViolation


@dataclass(frozen=True, order=True)
class SchemaDescriptor:
    modality: str
    schema_version: int
    input_dim: int
    latent_dim: int

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise SchemaViolation(f"unknown modality {self.modality!r}")
        if self.schema_version < 1:
            raise SchemaViolation("schema_version must be >= 1")
        if self.input_dim <= 0 or self.latent_dim <= 0:
            raise SchemaViolation("input_dim and latent_dim must be positive")

    def to_dict(self) -> dict:
        return {
            "modality": self.modality,
            "schema_version": self.schema_version,
            "input_dim": self.input_dim,
            "latent_dim": self.latent_dim,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SchemaDescriptor":
        return cls(d["modality"], int(d["schema_version"]), int(d["input_dim"]), int(d["latent_dim"]))


@dataclass(frozen=True)
class CapabilitySet:
    client_id: int
    supported: frozenset

    def __post_init__(self):
        object.__setattr__(self, "supported", frozenset(self.supported))
        keys = [(d.modality, d.schema_version) for d in self.supported]
        if len(keys) != len(set(keys)):
            raise SchemaViolation(
                f"client {self.client_id} advertises duplicate (modality, version) pairs"
            )


def _ordered(descs: Iterable[SchemaDescriptor]) -> tuple[SchemaDescriptor, ...]:
    return tuple(sorted(descs, key=lambda d: (MODALITIES.index(d.modality), d.schema_version)))


@dataclass(frozen=True)
class FusionPlan:
    """Agreed modality layout for one client (or for the server's model).

    ``agreed`` always lists the server's descriptors in global order so that
    every client shares one parameter layout; ``absent`` names modalities the
    client could not match and must zero-impute.
    """

    agreed: tuple[SchemaDescriptor, ...]
    absent: frozenset = field(default_factory=frozenset)

    @property
    def modalities(self) -> tuple[str, ...]:
        return tuple(d.modality for d in self.agreed)

    @property
    def available(self) -> tuple[str, ...]:
        return tuple(m for m in self.modalities if m not in self.absent)

    @property
    def fused_dim(self) -> int:
        return sum(d.latent_dim for d in self.agreed) + len(self.agreed)

    def descriptor(self, modality: str) -> SchemaDescriptor:
        for d in self.agreed:
            if d.modality == modality:
                return d
        raise KeyError(modality)


class SchemaRegistry:
    """Server-side table of the schemas a federation requires."""

    def __init__(self, required: Iterable[SchemaDescriptor]):
        required = _ordered(required)
        if not required:
            raise SchemaViolation("registry needs at least one schema")
        if len({d.modality for d in required}) != len(required):
            raise SchemaViolation("one required schema per modality")
        self._required = required

    @property
    def required(self) -> tuple[SchemaDescriptor, ...]:
        return self._required

    def plan(self) -> FusionPlan:
        return FusionPlan(self._required)

    def negotiate(self, caps: CapabilitySet, strict: bool = False) -> FusionPlan:
        return negotiate(set(self._required), caps, strict=strict)


def negotiate(
    server_required: set, client_caps: CapabilitySet, strict: bool = False
) -> FusionPlan:
    """Match a client's capabilities against the server's required schemas.

    Matching is on ``(modality, schema_version)``.  By default a client that
    matches at least one modality is accepted and the rest are imputed; with
    ``strict`` any unmatched modality rejects the client.
    """
    if not server_required:
        raise SchemaViolation("server_required must be non-empty")
    required = _ordered(server_required)
    offered = {(d.modality, d.schema_version) for d in client_caps.supported}
    absent = set()
    for d in required:
        if (d.modality, d.schema_version) not in offered:
            absent.add(d.modality)
    if len(absent) == len(required) or (strict and absent):
        raise NegotiationRejected(client_caps.client_id)
    return FusionPlan(required, frozenset(absent))


def align(
    latents: Mapping[str, np.ndarray], presence: Mapping[str, int], plan: FusionPlan
) -> np.ndarray:
    """Fuse one example's latents into ``z`` of length ``plan.fused_dim``."""
    parts, flags = [], []
    for d in plan.agreed:
        present = bool(presence.get(d.modality, 0)) and d.modality not in plan.absent
        if present:
            lat = np.asarray(latents[d.modality], dtype=np.float64).reshape(-1)
            if lat.size != d.latent_dim:
                raise SchemaViolation(
                    f"{d.modality} latent has {lat.size} dims, schema says {d.latent_dim}"
                )
            parts.append(lat)
        else:
            parts.append(np.zeros(d.latent_dim))
        flags.append(1.0 if present else 0.0)
    return np.concatenate(parts + [np.asarray(flags)])


def align_batch(
    latents: Mapping[str, np.ndarray], presence: Mapping[str, np.ndarray], plan: FusionPlan
) -> np.ndarray:
    """Row-wise :func:`align` for an ``(n, latent_dim)`` matrix per modality."""
    n = None
    parts, flags = [], []
    for d in plan.agreed:
        lat = np.asarray(latents[d.modality], dtype=np.float64)
        if lat.ndim != 2 or lat.shape[1] != d.latent_dim:
            raise SchemaViolation(f"{d.modality} latents must be (n, {d.latent_dim})")
        n = lat.shape[0] if n is None else n
        if d.modality in plan.absent:
            pres = np.zeros(n)
        else:
            pres = np.asarray(presence[d.modality], dtype=np.float64)
        parts.append(lat * pres[:, None])
        flags.append(pres[:, None])
    return np.hstack(parts + flags)
