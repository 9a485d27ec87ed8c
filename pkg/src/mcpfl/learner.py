"""Affine modality encoders feeding a logistic classifier over the fused vector.

Parameter layout (one :class:`~mcpfl.core.ModelVector` per model)::

    enc_<m> : W_m (latent_dim x input_dim, row-major) followed by b_m
    clf     : w (fused_dim) followed by the bias c

The loss is the mean binary cross-entropy of the fused prediction plus
``lam * ||theta||^2`` over every block.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Layout, ModelVector, RandomStream, make_layout
from .datagen import MODALITIES, MultiModalData
from .errors import ConfigError, SchemaViolation, SkipClient
from .fusion import FusionPlan, SchemaDescriptor, align_batch

Batch = MultiModalData


@dataclass(frozen=True)
class ModelConfig:
    latent_dims: dict = field(default_factory=lambda: {"im": 2, "emr": 2, "iot": 1})
    lam: float = 1e-4
    learning_rate: float = 0.5
    local_epochs: int = 2
    batch_size: int = 16
    fedprox_mu: float = 0.1
    init_scale: float = 0.3

    def validate(self) -> None:
        for m in MODALITIES:
            if int(self.latent_dims.get(m, 0)) <= 0:
                raise ConfigError(f"model.latent_dims.{m} must be > 0", f"model.latent_dims.{m}")
        if self.lam < 0:
            raise ConfigError("model.lambda must be ≥ 0", "model.lambda")
        if self.learning_rate <= 0:
            raise ConfigError("model.learning_rate must be > 0", "model.learning_rate")
        if self.local_epochs < 0:
            raise ConfigError("model.local_epochs must be ≥ 0", "model.local_epochs")
        if self.batch_size < 1:
            raise ConfigError("model.batch_size must be ≥ 1", "model.batch_size")
        if self.fedprox_mu < 0:
            raise ConfigError("model.fedprox_mu must be ≥ 0", "model.fedprox_mu")


def model_layout(plan: FusionPlan) -> Layout:
    sizes = [
        (f"enc_{d.modality}", d.latent_dim * d.input_dim + d.latent_dim) for d in plan.agreed
    ]
    sizes.append(("clf", plan.fused_dim + 1))
    return make_layout(sizes)


def init_model(plan: FusionPlan, seed: int, scale: float = 0.3) -> ModelVector:
    """Seeded encoder weights with a zero classifier.

    All-zero parameters are a stationary point of the encoder/head product, so
    the encoders start from a small random draw; the zero head still makes
    every initial prediction exactly 0.5.
    """
    theta = ModelVector.zeros(model_layout(plan))
    values = theta.values.copy()
    gen = RandomStream(seed, "model:init").generator()
    for d in plan.agreed:
        blk = _block(theta.layout, f"enc_{d.modality}")
        n_w = d.latent_dim * d.input_dim
        values[blk.offset : blk.offset + n_w] = (
            gen.standard_normal(n_w) * scale / np.sqrt(d.input_dim)
        )
    return theta.with_values(values)


def _block(layout: Layout, name: str):
    for blk in layout:
        if blk.name == name:
            return blk
    raise KeyError(name)


def split_encoder(params: np.ndarray, desc: SchemaDescriptor) -> tuple[np.ndarray, np.ndarray]:
    n_w = desc.latent_dim * desc.input_dim
    if params.size != n_w + desc.latent_dim:
        raise SchemaViolation(f"encoder block for {desc.modality} has wrong size {params.size}")
    return params[:n_w].reshape(desc.latent_dim, desc.input_dim), params[n_w:]


def encode(x_m: np.ndarray, params: np.ndarray, desc: SchemaDescriptor) -> np.ndarray:
    """Affine map ``W x + b``; accepts one example or an ``(n, input_dim)`` batch."""
    x = np.asarray(x_m, dtype=np.float64)
    if x.shape[-1] != desc.input_dim:
        raise SchemaViolation(
            f"{desc.modality} input has {x.shape[-1]} features, schema says {desc.input_dim}"
        )
    W, b = split_encoder(np.asarray(params, dtype=np.float64), desc)
    return x @ W.T + b


def sigmoid(t):
    t = np.asarray(t, dtype=np.float64)
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def predict(z: np.ndarray, params: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    params = np.asarray(params, dtype=np.float64)
    if z.shape[-1] != params.size - 1:
        raise SchemaViolation(f"fused vector has {z.shape[-1]} dims, head expects {params.size - 1}")
    return sigmoid(z @ params[:-1] + params[-1])


def _forward(batch: Batch, theta: ModelVector, plan: FusionPlan):
    n = len(batch)
    latents = {}
    for d in plan.agreed:
        if d.modality in plan.absent:
            latents[d.modality] = np.zeros((n, d.latent_dim))
        else:
            latents[d.modality] = encode(
                batch.features[d.modality], theta.block(f"enc_{d.modality}"), d
            )
    z = align_batch(latents, batch.presence, plan)
    clf = theta.block("clf")
    logits = z @ clf[:-1] + clf[-1]
    return z, logits


def predict_proba(batch: Batch, theta: ModelVector, plan: FusionPlan) -> np.ndarray:
    return sigmoid(_forward(batch, theta, plan)[1])


def loss(batch: Batch, theta: ModelVector, lam: float, plan: FusionPlan) -> float:
    _, t = _forward(batch, theta, plan)
    y = batch.labels.astype(np.float64)
    bce = np.mean(np.logaddexp(0.0, t) - y * t)
    return float(bce + lam * np.dot(theta.values, theta.values))


def _grad_values(batch: Batch, theta: ModelVector, lam: float, plan: FusionPlan) -> np.ndarray:
    n = len(batch)
    z, t = _forward(batch, theta, plan)
    g = (sigmoid(t) - batch.labels) / n
    out = np.zeros_like(theta.values)
    clf_blk = _block(theta.layout, "clf")
    clf = theta.values[clf_blk.offset : clf_blk.offset + clf_blk.length]
    out[clf_blk.offset : clf_blk.offset + clf_blk.length - 1] = z.T @ g
    out[clf_blk.offset + clf_blk.length - 1] = g.sum()

    col = 0
    for d in plan.agreed:
        w_m = clf[col : col + d.latent_dim]
        col += d.latent_dim
        if d.modality in plan.absent:
            continue
        pres = batch.presence[d.modality].astype(np.float64)
        dh = (g * pres)[:, None] * w_m[None, :]
        blk = _block(theta.layout, f"enc_{d.modality}")
        n_w = d.latent_dim * d.input_dim
        out[blk.offset : blk.offset + n_w] = (dh.T @ batch.features[d.modality]).reshape(-1)
        out[blk.offset + n_w : blk.offset + blk.length] = dh.sum(axis=0)
    if lam:
        out += 2.0 * lam * theta.values
    return out


def grad(batch: Batch, theta: ModelVector, lam: float, plan: FusionPlan) -> ModelVector:
    """Analytic gradient of :func:`loss` with respect to every block."""
    return theta.with_values(_grad_values(batch, theta, lam, plan))


def local_train(
    data: MultiModalData,
    theta_global: ModelVector,
    cfg: ModelConfig,
    stream: RandomStream,
    plan: FusionPlan,
) -> ModelVector:
    """Mini-batch SGD from the global model; returns ``theta_local - theta_global``."""
    n = len(data)
    if n == 0:
        raise SkipClient("client has no examples")
    gen = stream.generator()
    global_vals = theta_global.values
    cur = theta_global
    for _ in range(cfg.local_epochs):
        order = gen.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = data.subset(order[start : start + cfg.batch_size])
            step = _grad_values(batch, cur, cfg.lam, plan)
            if cfg.fedprox_mu > 0:
                step = step + cfg.fedprox_mu * (cur.values - global_vals)
            cur = cur.with_values(cur.values - cfg.learning_rate * step)
    return cur.with_values(cur.values - global_vals)
