"""Experiment configuration: YAML file <-> :class:`ExperimentConfig`.

Keys are grouped in sections and addressed by dotted paths (``dp.sigma``,
``sched.tau``, ``data.dims.im``).  Omitted keys take the defaults below,
unknown keys are rejected, and ``dump_config(DEFAULT)`` parses back to an
identical config.

=============================  ==============  ========================================
key                            default         meaning
=============================  ==============  ========================================
data.n_total                   4000            examples before the train/test split
data.dims.{im,emr,iot}         32 / 16 / 8     input features per modality
data.interaction_weight        0.25            weight of the im x iot product in the label
data.noise_std                 0.1             label noise
data.missing_rate.{im,emr,iot} 0.05/0.05/0.1   per-example modality dropout
data.test_fraction             0.2             global held-out share
data.dirichlet_beta            10.0            label-skew concentration
fusion.schema_mismatch_rate    0.1             P(client advertises a wrong schema version)
model.latent_dims.{..}         2 / 2 / 1       encoder output sizes
model.lambda                   1e-4            L2 weight
model.learning_rate            0.5
model.local_epochs             2
model.batch_size               16
model.fedprox_mu               0.1             proximal weight used by ``fedprox``
model.init_scale               0.3             encoder init scale
dp.clip_norm                   1.0             sensitivity bound (update clip)
dp.sigma                       0.5             Gaussian noise std
dp.delta                       1e-5
dp.epsilon_max                 unbounded       per-client budget; number or "unbounded"
secagg.frac_bits               24              fixed-point fractional bits
sched.tau / gamma / eta        0.1 / 0.2 / 3   eligibility thresholds
sched.dropout_kappa            0.5
sched.random_k                 10              clients per round for random selection
sched.baseline_policy          random_k        policy when the energy scheduler is off
sched.staleness_readmit        false
sched.min_roster               10              quorum: smaller rounds are skipped
energy.*                       see EnergyConfig
network.*                      see NetworkConfig
experiment.n_clients           20
experiment.rounds              50
experiment.seeds               [1, 2, 3]
experiment.methods             all four
experiment.out_dir             results
experiment.workers             1               threads for client-side work
=============================  ==============  ========================================
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .datagen import MODALITIES, DataSpec
from .errors import ConfigError
from .learner import ModelConfig
from .orchestrator.methods import MethodConfig
from .orchestrator.network import NetworkConfig
from .privacy import PrivacyConfig
from .sched import EnergyConfig, SchedulerConfig

DEFAULT_METHODS = ("fedavg", "fedprox", "multimodal_fl", "mcp_fusion")


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSpec = field(default_factory=DataSpec)
    dirichlet_beta: float = 10.0
    schema_mismatch_rate: float = 0.1
    model: ModelConfig = field(default_factory=ModelConfig)
    dp: PrivacyConfig = field(default_factory=PrivacyConfig)
    frac_bits: int = 24
    sched: SchedulerConfig = field(default_factory=SchedulerConfig)
    baseline_policy: str = "random_k"
    energy: EnergyConfig = field(default_factory=EnergyConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    n_clients: int = 20
    rounds: int = 50
    seeds: tuple = (1, 2, 3)
    methods: tuple = DEFAULT_METHODS
    out_dir: str = "results"
    workers: int = 1

    def method_configs(self) -> list[MethodConfig]:
        out = []
        for name in self.methods:
            mc = MethodConfig.named(name)
            out.append(replace(mc, baseline_policy=self.baseline_policy))
        return out

    def validate(self) -> None:
        self.data.validate()
        self.model.validate()
        self.dp.validate()
        self.sched.validate()
        self.energy.validate()
        self.network.validate()
        if self.dirichlet_beta <= 0:
            raise ConfigError("data.dirichlet_beta must be > 0", "data.dirichlet_beta")
        if not 0.0 <= self.schema_mismatch_rate <= 1.0:
            raise ConfigError("fusion.schema_mismatch_rate must be in [0, 1]", "fusion.schema_mismatch_rate")
        if not 0 <= self.frac_bits <= 40:
            raise ConfigError("secagg.frac_bits must be in [0, 40]", "secagg.frac_bits")
        if self.baseline_policy not in ("random_k", "all"):
            raise ConfigError("sched.baseline_policy must be random_k or all", "sched.baseline_policy")
        if self.n_clients < 1:
            raise ConfigError("experiment.n_clients must be ≥ 1", "experiment.n_clients")
        n_train = self.data.n_total - max(1, int(round(self.data.n_total * self.data.test_fraction)))
        if self.n_clients > n_train:
            raise ConfigError(
                f"experiment.n_clients ({self.n_clients}) exceeds training examples ({n_train})",
                "experiment.n_clients",
            )
        if self.rounds < 0:
            raise ConfigError("experiment.rounds must be ≥ 0", "experiment.rounds")
        if not self.seeds:
            raise ConfigError("experiment.seeds must be non-empty", "experiment.seeds")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("experiment.seeds must be distinct", "experiment.seeds")
        if not self.methods:
            raise ConfigError("experiment.methods must be non-empty", "experiment.methods")
        if self.workers < 1:
            raise ConfigError("experiment.workers must be ≥ 1", "experiment.workers")
        for mc in self.method_configs():
            mc.validate()
            if mc.proximal and self.model.fedprox_mu <= 0:
                raise ConfigError("fedprox needs model.fedprox_mu > 0", "model.fedprox_mu")


DEFAULT = ExperimentConfig()

# dotted key -> (object path in ExperimentConfig, type)
_FLOAT, _INT, _BOOL, _STR, _INTLIST, _STRLIST, _EPS = (
    "float", "int", "bool", "str", "int-list", "str-list", "float-or-unbounded",
)


def _schema() -> dict[str, tuple[tuple[str, ...], str]]:
    s: dict[str, tuple[tuple[str, ...], str]] = {
        "data.n_total": (("data", "n_total"), _INT),
        "data.interaction_weight": (("data", "interaction_weight"), _FLOAT),
        "data.noise_std": (("data", "noise_std"), _FLOAT),
        "data.test_fraction": (("data", "test_fraction"), _FLOAT),
        "data.dirichlet_beta": (("dirichlet_beta",), _FLOAT),
        "fusion.schema_mismatch_rate": (("schema_mismatch_rate",), _FLOAT),
        "model.lambda": (("model", "lam"), _FLOAT),
        "model.learning_rate": (("model", "learning_rate"), _FLOAT),
        "model.local_epochs": (("model", "local_epochs"), _INT),
        "model.batch_size": (("model", "batch_size"), _INT),
        "model.fedprox_mu": (("model", "fedprox_mu"), _FLOAT),
        "model.init_scale": (("model", "init_scale"), _FLOAT),
        "dp.clip_norm": (("dp", "clip_norm"), _FLOAT),
        "dp.sigma": (("dp", "sigma"), _FLOAT),
        "dp.delta": (("dp", "dp_delta"), _FLOAT),
        "dp.epsilon_max": (("dp", "epsilon_max"), _EPS),
        "secagg.frac_bits": (("frac_bits",), _INT),
        "sched.tau": (("sched", "tau"), _FLOAT),
        "sched.gamma": (("sched", "gamma"), _FLOAT),
        "sched.eta": (("sched", "eta"), _INT),
        "sched.dropout_kappa": (("sched", "dropout_kappa"), _FLOAT),
        "sched.random_k": (("sched", "random_k"), _INT),
        "sched.staleness_readmit": (("sched", "staleness_readmit"), _BOOL),
        "sched.min_roster": (("sched", "min_roster"), _INT),
        "sched.baseline_policy": (("baseline_policy",), _STR),
        "experiment.n_clients": (("n_clients",), _INT),
        "experiment.rounds": (("rounds",), _INT),
        "experiment.seeds": (("seeds",), _INTLIST),
        "experiment.methods": (("methods",), _STRLIST),
        "experiment.out_dir": (("out_dir",), _STR),
        "experiment.workers": (("workers",), _INT),
    }
    for m in MODALITIES:
        s[f"data.dims.{m}"] = (("data", "dims", m), _INT)
        s[f"data.missing_rate.{m}"] = (("data", "missing_rate", m), _FLOAT)
        s[f"model.latent_dims.{m}"] = (("model", "latent_dims", m), _INT)
    for f in fields(EnergyConfig):
        s[f"energy.{f.name}"] = (("energy", f.name), _FLOAT)
    for f in fields(NetworkConfig):
        s[f"network.{f.name}"] = (("network", f.name), _FLOAT)
    return s


SCHEMA = _schema()


def _coerce(key: str, kind: str, value: Any):
    def fail():
        raise ConfigError(f"{key} has invalid type {type(value).__name__} (expected {kind})", key)

    if kind == _BOOL:
        if not isinstance(value, bool):
            fail()
        return value
    if kind == _INT:
        if isinstance(value, bool) or not isinstance(value, int):
            fail()
        return int(value)
    if kind == _FLOAT:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            fail()
        return float(value)
    if kind == _EPS:
        if value == "unbounded":
            return math.inf
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            fail()
        return float(value)
    if kind == _STR:
        if not isinstance(value, str):
            fail()
        return value
    if kind == _INTLIST:
        if isinstance(value, int) and not isinstance(value, bool):
            value = [value]
        if not isinstance(value, list) or any(isinstance(v, bool) or not isinstance(v, int) for v in value):
            fail()
        return tuple(int(v) for v in value)
    if kind == _STRLIST:
        if isinstance(value, str):
            value = [v.strip() for v in value.split(",") if v.strip()]
        if not isinstance(value, list) or any(not isinstance(v, str) for v in value):
            fail()
        return tuple(value)
    raise AssertionError(kind)


def _flatten(tree: Any, prefix: str = "") -> dict[str, Any]:
    if not isinstance(tree, dict):
        raise ConfigError(f"{prefix or 'config'} must be a mapping", prefix or None)
    out = {}
    for k, v in tree.items():
        key = f"{prefix}.{k}" if prefix else str(k)
        if isinstance(v, dict):
            out.update(_flatten(v, key))
        else:
            out[key] = v
    return out


def _get(cfg: ExperimentConfig, path: tuple[str, ...]):
    obj: Any = cfg
    for p in path:
        obj = obj[p] if isinstance(obj, dict) else getattr(obj, p)
    return obj


def _set(obj: Any, path: tuple[str, ...], value: Any):
    head, rest = path[0], path[1:]
    if isinstance(obj, dict):
        new = dict(obj)
        new[head] = _set(obj[head], rest, value) if rest else value
        return new
    child = getattr(obj, head)
    return replace(obj, **{head: _set(child, rest, value) if rest else value})


def apply_overrides(cfg: ExperimentConfig, overrides: dict[str, Any]) -> ExperimentConfig:
    """Set dotted keys (values already in YAML-native types) on a config."""
    for key in sorted(overrides):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key}", key)
        path, kind = SCHEMA[key]
        cfg = _set(cfg, path, _coerce(key, kind, overrides[key]))
    return cfg


def config_from_dict(tree: dict | None) -> ExperimentConfig:
    cfg = apply_overrides(DEFAULT, _flatten(tree or {}))
    cfg.validate()
    return cfg


def parse_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        tree = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return config_from_dict(tree)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    tree: dict = {}
    for key, (path, kind) in SCHEMA.items():
        value = _get(cfg, path)
        if kind == _EPS and math.isinf(value):
            value = "unbounded"
        elif kind in (_INTLIST, _STRLIST):
            value = list(value)
        node = tree
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = copy.deepcopy(value)
    return tree


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True)


def parse_value(text: str) -> Any:
    """Interpret a command-line value with YAML scalar rules."""
    return yaml.safe_load(text)
