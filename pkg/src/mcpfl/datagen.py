"""Synthetic three-modality data with cross-modal label structure.

Each example has a shared latent factor ``u`` plus a private factor per
modality.  Every modality view is a fixed linear projection of its factors, so
the imaging and EMR views each reveal a different slice of the label signal and
only their combination recovers it.  The IoMT view is deliberately
under-determined (fewer features than factors).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import RandomStream
from .errors import ConfigError

MODALITIES = ("im", "emr", "iot")
SHARED_DIM = 8
PRIVATE_DIMS = {"im": 6, "emr": 6, "iot": 2}

# label variance split: shared factor / imaging-private / EMR-private
_SHARED_SHARE = 0.2
_PRIVATE_SHARE = 0.4


@dataclass(frozen=True)
class DataSpec:
    n_total: int = 4000
    dims: dict = field(default_factory=lambda: {"im": 32, "emr": 16, "iot": 8})
    interaction_weight: float = 0.25
    noise_std: float = 0.1
    missing_rate: dict = field(
        default_factory=lambda: {"im": 0.05, "emr": 0.05, "iot": 0.1}
    )
    seed: int = 0
    test_fraction: float = 0.2

    def validate(self) -> None:
        if self.n_total < 1:
            raise ConfigError("data.n_total must be ≥ 1", "data.n_total")
        for m in MODALITIES:
            if m not in self.dims or int(self.dims[m]) <= 0:
                raise ConfigError(f"data.dims.{m} must be > 0", f"data.dims.{m}")
            rate = self.missing_rate.get(m, 0.0)
            if not 0.0 <= rate <= 1.0:
                raise ConfigError(
                    f"data.missing_rate.{m} must be in [0, 1]", f"data.missing_rate.{m}"
                )
        if self.noise_std < 0:
            raise ConfigError("data.noise_std must be ≥ 0", "data.noise_std")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("data.test_fraction must be in (0, 1)", "data.test_fraction")


@dataclass
class MultiModalData:
    """Row-aligned per-modality feature blocks with presence flags and labels."""

    features: dict[str, np.ndarray]
    presence: dict[str, np.ndarray]
    labels: np.ndarray
    example_ids: np.ndarray

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def modalities(self) -> tuple[str, ...]:
        return tuple(m for m in MODALITIES if m in self.features)

    def counts(self) -> dict[str, int]:
        """Number of examples with each modality present (n_k^m)."""
        return {m: int(self.presence[m].sum()) for m in self.modalities}

    def subset(self, idx) -> "MultiModalData":
        idx = np.asarray(idx, dtype=np.int64)
        return MultiModalData(
            features={m: x[idx] for m, x in self.features.items()},
            presence={m: p[idx] for m, p in self.presence.items()},
            labels=self.labels[idx],
            example_ids=self.example_ids[idx],
        )

    def without(self, modalities) -> "MultiModalData":
        """Copy with the given modalities marked absent and zeroed."""
        feats = dict(self.features)
        pres = dict(self.presence)
        for m in modalities:
            if m in feats:
                feats[m] = np.zeros_like(feats[m])
                pres[m] = np.zeros_like(pres[m])
        return MultiModalData(feats, pres, self.labels, self.example_ids)


@dataclass
class ClientDataset(MultiModalData):
    client_id: int = -1


@dataclass(frozen=True)
class _Structure:
    shared_proj: dict
    private_proj: dict
    weights: dict


def _structure(spec: DataSpec) -> _Structure:
    gen = RandomStream(spec.seed, "data:structure").generator()
    shared_proj, private_proj, weights = {}, {}, {}
    for m in MODALITIES:
        d = int(spec.dims[m])
        k = PRIVATE_DIMS[m]
        norm = np.sqrt(SHARED_DIM + k)
        shared_proj[m] = gen.standard_normal((d, SHARED_DIM)) / norm
        private_proj[m] = gen.standard_normal((d, k)) / norm

    def unit(n):
        v = gen.standard_normal(n)
        return v / np.linalg.norm(v)

    # label coefficients in factor space, then pulled back to feature space
    # so that w_m . x_m reproduces them exactly whenever the view has full
    # column rank
    coef = {
        "im": np.concatenate(
            [np.sqrt(_SHARED_SHARE) * unit(SHARED_DIM), np.sqrt(_PRIVATE_SHARE) * unit(PRIVATE_DIMS["im"])]
        ),
        "emr": np.concatenate(
            [np.zeros(SHARED_DIM), np.sqrt(_PRIVATE_SHARE) * unit(PRIVATE_DIMS["emr"])]
        ),
    }
    for m in ("im", "emr"):
        mix = np.hstack([shared_proj[m], private_proj[m]])
        weights[m] = np.linalg.pinv(mix).T @ coef[m]
    return _Structure(shared_proj, private_proj, weights)


def generate(spec: DataSpec) -> MultiModalData:
    """Draw ``spec.n_total`` labelled examples; deterministic in ``spec``."""
    spec.validate()
    st = _structure(spec)
    n = spec.n_total
    gen = RandomStream(spec.seed, "data:examples").generator()
    u = gen.standard_normal((n, SHARED_DIM))
    features = {}
    for m in MODALITIES:
        v = gen.standard_normal((n, PRIVATE_DIMS[m]))
        features[m] = u @ st.shared_proj[m].T + v @ st.private_proj[m].T
    noise = gen.standard_normal(n) * spec.noise_std

    score = (
        features["im"] @ st.weights["im"]
        + features["emr"] @ st.weights["emr"]
        + spec.interaction_weight * features["im"][:, 0] * features["iot"][:, 0]
        + noise
    )
    labels = (score > 0).astype(np.int64)

    miss = RandomStream(spec.seed, "data:missing").generator()
    presence = {}
    for m in MODALITIES:
        present = miss.random(n) >= spec.missing_rate.get(m, 0.0)
        presence[m] = present
        features[m] = np.where(present[:, None], features[m], 0.0)
    return MultiModalData(features, presence, labels, np.arange(n, dtype=np.int64))


def train_test_split(data: MultiModalData, test_fraction: float, seed: int):
    """Shuffle once and cut off the last ``test_fraction`` as the global test set."""
    n = len(data)
    perm = RandomStream(seed, "data:split").generator().permutation(n)
    n_test = max(1, int(round(n * test_fraction))) if n > 1 else 0
    test_idx = np.sort(perm[:n_test])
    train_idx = np.sort(perm[n_test:])
    return data.subset(train_idx), data.subset(test_idx)


def partition(
    data: MultiModalData, n_clients: int, dirichlet_beta: float, seed: int
) -> list[ClientDataset]:
    """Label-skewed split: each class is spread over clients by a Dirichlet draw."""
    n = len(data)
    if n_clients < 1:
        raise ConfigError("n_clients must be ≥ 1", "experiment.n_clients")
    if n_clients > n:
        raise ConfigError(
            f"cannot split {n} examples over {n_clients} clients", "experiment.n_clients"
        )
    if dirichlet_beta <= 0:
        raise ConfigError("data.dirichlet_beta must be > 0", "data.dirichlet_beta")

    gen = RandomStream(seed, "data:partition").generator()
    buckets: list[list[int]] = [[] for _ in range(n_clients)]
    for cls in (0, 1):
        idx = np.flatnonzero(data.labels == cls)
        if idx.size == 0:
            continue
        idx = gen.permutation(idx)
        props = gen.dirichlet(np.full(n_clients, float(dirichlet_beta)))
        cuts = (np.cumsum(props)[:-1] * idx.size).astype(np.int64)
        for k, part in enumerate(np.split(idx, cuts)):
            buckets[k].extend(int(i) for i in part)

    # every client needs at least one example; borrow from the largest
    for k in range(n_clients):
        if not buckets[k]:
            donor = max(range(n_clients), key=lambda j: (len(buckets[j]), -j))
            buckets[k].append(buckets[donor].pop())

    out = []
    for k, idx in enumerate(buckets):
        sub = data.subset(np.sort(np.asarray(idx, dtype=np.int64)))
        out.append(
            ClientDataset(sub.features, sub.presence, sub.labels, sub.example_ids, client_id=k)
        )
    return out


def export_csv(data: MultiModalData, directory: str | Path) -> list[Path]:
    """Write one CSV per modality plus ``labels.csv``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for m in data.modalities:
        path = directory / f"{m}.csv"
        d = data.features[m].shape[1]
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["example_id", "presence"] + [f"f{j}" for j in range(d)])
            for i in range(len(data)):
                w.writerow(
                    [int(data.example_ids[i]), int(data.presence[m][i])]
                    + [repr(float(v)) for v in data.features[m][i]]
                )
        written.append(path)
    path = directory / "labels.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["example_id", "label"])
        for i in range(len(data)):
            w.writerow([int(data.example_ids[i]), int(data.labels[i])])
    written.append(path)
    return written


def with_seed(spec: DataSpec, seed: int) -> DataSpec:
    return replace(spec, seed=seed)
