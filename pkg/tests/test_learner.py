from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest
from conftest import make_batch, make_plan

from mcpfl.core import ModelVector, RandomStream
from mcpfl.datagen import DataSpec, MultiModalData, generate
from mcpfl.errors import SchemaViolation, SkipClient
from mcpfl.fusion import SchemaDescriptor
from mcpfl.learner import (
    ModelConfig,
    encode,
    grad,
    init_model,
    local_train,
    loss,
    model_layout,
    predict,
    predict_proba,
)

LN2 = math.log(2.0)


def random_theta(plan, rng, scale=0.5):
    layout = model_layout(plan)
    n = sum(b.length for b in layout)
    return ModelVector(rng.standard_normal(n) * scale, layout)


def scalar_loss(batch, theta, lam, plan):
    """From-scratch re-implementation with explicit loops."""
    total = 0.0
    for i in range(len(batch)):
        z = []
        flags = []
        for d in plan.agreed:
            present = d.modality not in plan.absent and bool(batch.presence[d.modality][i])
            params = theta.block(f"enc_{d.modality}")
            for r in range(d.latent_dim):
                if present:
                    acc = params[d.latent_dim * d.input_dim + r]
                    for c in range(d.input_dim):
                        acc += params[r * d.input_dim + c] * batch.features[d.modality][i, c]
                    z.append(acc)
                else:
                    z.append(0.0)
            flags.append(1.0 if present else 0.0)
        z += flags
        clf = theta.block("clf")
        t = sum(w * v for w, v in zip(clf[:-1], z)) + clf[-1]
        p = 1.0 / (1.0 + math.exp(-t))
        y = batch.labels[i]
        total += -(y * math.log(p) + (1 - y) * math.log(1 - p))
    return total / len(batch) + lam * sum(v * v for v in theta.values)


class TestEncode:
    def test_zero_params(self):
        d = SchemaDescriptor("im", 1, 4, 3)
        assert encode(np.arange(4.0), np.zeros(15), d).tolist() == [0.0, 0.0, 0.0]

    def test_identity(self, rng):
        d = SchemaDescriptor("im", 1, 3, 3)
        x = rng.standard_normal(3)
        params = np.concatenate([np.eye(3).ravel(), np.zeros(3)])
        assert np.array_equal(encode(x, params, d), x)

    def test_matches_matmul_oracle(self, rng):
        d = SchemaDescriptor("emr", 1, 6, 4)
        W, b, x = rng.standard_normal((4, 6)), rng.standard_normal(4), rng.standard_normal(6)
        oracle = [sum(W[r, c] * x[c] for c in range(6)) + b[r] for r in range(4)]
        got = encode(x, np.concatenate([W.ravel(), b]), d)
        assert np.max(np.abs(got - oracle)) <= 1e-12

    def test_dimension_mismatch(self):
        with pytest.raises(SchemaViolation):
            encode(np.zeros(5), np.zeros(15), SchemaDescriptor("im", 1, 4, 3))


class TestPredict:
    def test_zero_is_half(self):
        assert predict(np.ones(4), np.zeros(5)) == 0.5

    def test_asymptotics(self):
        z = np.zeros(3)
        assert predict(z, np.array([0, 0, 0, 20.0])) > 0.999
        assert predict(z, np.array([0, 0, 0, -20.0])) < 0.001
        # no overflow far out in either tail
        assert predict(z, np.array([0, 0, 0, -800.0])) == 0.0
        assert predict(z, np.array([0, 0, 0, 800.0])) == 1.0

    def test_matches_formula(self, rng):
        z, params = rng.standard_normal(7), rng.standard_normal(8)
        oracle = 1.0 / (1.0 + math.exp(-(float(np.dot(z, params[:-1])) + params[-1])))
        assert abs(predict(z, params) - oracle) <= 1e-12

    def test_length_checked(self):
        with pytest.raises(SchemaViolation):
            predict(np.zeros(3), np.zeros(3))


class TestLoss:
    @pytest.mark.parametrize("lam", [0.0, 0.3])
    def test_zero_theta_is_ln2(self, rng, plan, lam):
        theta = ModelVector.zeros(model_layout(plan))
        assert abs(loss(make_batch(rng), theta, lam, plan) - LN2) <= 1e-15

    @pytest.mark.parametrize("absent", [(), ("emr",)])
    def test_matches_scalar_oracle(self, rng, absent):
        plan = make_plan(absent=absent)
        for _ in range(5):
            batch = make_batch(rng, n=10, missing=0.3)
            theta = random_theta(plan, rng)
            assert abs(loss(batch, theta, 0.01, plan) - scalar_loss(batch, theta, 0.01, plan)) <= 1e-10

    def test_non_negative(self, rng, plan):
        for _ in range(20):
            assert loss(make_batch(rng), random_theta(plan, rng, 3.0), 0.0, plan) >= 0.0


def central_differences(batch, theta, lam, plan, h=1e-5):
    out = np.zeros(len(theta))
    for i in range(len(theta)):
        up, dn = theta.values.copy(), theta.values.copy()
        up[i] += h
        dn[i] -= h
        out[i] = (loss(batch, theta.with_values(up), lam, plan) - loss(batch, theta.with_values(dn), lam, plan)) / (2 * h)
    return out


class TestGrad:
    def test_bias_gradient_at_zero(self, rng, plan):
        batch = make_batch(rng, n=15)
        g = grad(batch, ModelVector.zeros(model_layout(plan)), 0.0, plan)
        assert abs(g.block("clf")[-1] - np.mean(0.5 - batch.labels)) <= 1e-15

    def test_regularizer_only(self, rng, plan):
        # all features zero and absent, balanced labels, zero head bias: data term vanishes
        batch = make_batch(rng, n=8, missing=1.0, zero=True)
        batch.labels[:] = [0, 1] * 4
        theta = random_theta(plan, rng)
        vals = theta.values.copy()
        vals[-1] = 0.0
        theta = theta.with_values(vals)
        g = grad(batch, theta, 0.25, plan)
        assert np.allclose(g.values, 0.5 * theta.values, rtol=0, atol=1e-15)

    def test_finite_differences(self, rng):
        worst = 0.0
        for k in range(20):
            plan = make_plan(absent=("iot",) if k % 4 == 3 else ())
            batch = make_batch(rng, n=6, missing=0.25)
            theta = random_theta(plan, rng)
            lam = 0.0 if k % 2 else 0.05
            analytic = grad(batch, theta, lam, plan).values
            numeric = central_differences(batch, theta, lam, plan)
            rel = np.abs(analytic - numeric) / np.maximum(1e-6, np.abs(analytic) + np.abs(numeric))
            worst = max(worst, float(rel.max()))
        assert worst <= 1e-4

    def test_absent_examples_contribute_nothing_to_their_encoder(self, rng, plan):
        batch = make_batch(rng, n=10, missing=0.0)
        batch.presence["emr"][:] = False
        batch.features["emr"][:] = 0.0
        g = grad(batch, random_theta(plan, rng), 0.0, plan)
        assert np.all(g.block("enc_emr") == 0.0)

    def test_absent_example_has_zero_encoder_gradient(self, rng, plan):
        # a lone emr-absent example still trains the other encoders
        batch = make_batch(rng, n=1)
        batch.presence["emr"][:] = False
        batch.features["emr"][:] = 0.0
        g = grad(batch, random_theta(plan, rng), 0.0, plan)
        assert np.all(g.block("enc_emr") == 0.0)
        assert np.any(g.block("enc_im") != 0.0)


def _client(n=40, seed=0):
    return generate(DataSpec(n_total=n, dims={"im": 5, "emr": 4, "iot": 3}, seed=seed))


class TestLocalTrain:
    def test_zero_epochs(self, plan):
        theta = init_model(plan, 0)
        delta = local_train(_client(), theta, ModelConfig(local_epochs=0), RandomStream(0, "t"), plan)
        assert np.all(delta.values == 0.0)

    def test_zero_learning_rate(self, plan):
        theta = init_model(plan, 0)
        delta = local_train(_client(), theta, ModelConfig(learning_rate=0.0), RandomStream(0, "t"), plan)
        assert np.all(delta.values == 0.0)

    def test_single_full_batch_step(self, rng, plan):
        data = _client(30)
        theta = random_theta(plan, rng, 0.2)
        cfg = ModelConfig(learning_rate=0.05, local_epochs=1, batch_size=30, lam=0.0, fedprox_mu=0.0)
        delta = local_train(data, theta, cfg, RandomStream(1, "t"), plan)
        expected = -0.05 * grad(data, theta, 0.0, plan).values
        assert np.allclose(delta.values, expected, rtol=0, atol=1e-14)

    def test_empty_client(self, plan):
        empty = _client(10).subset(np.array([], dtype=np.int64))
        with pytest.raises(SkipClient):
            local_train(empty, init_model(plan, 0), ModelConfig(), RandomStream(0, "t"), plan)

    def test_fedprox_zero_mu_is_plain_sgd(self, plan):
        data, theta, stream = _client(), init_model(plan, 3), RandomStream(5, "train:1:0")
        plain = local_train(data, theta, ModelConfig(fedprox_mu=0.0), stream, plan)
        again = local_train(data, theta, replace(ModelConfig(), fedprox_mu=0.0), stream, plan)
        assert plain == again

    def test_fedprox_shrinks_the_update(self, plan):
        data, theta, stream = _client(200), init_model(plan, 3), RandomStream(5, "t")
        cfg = ModelConfig(local_epochs=5)
        free = local_train(data, theta, replace(cfg, fedprox_mu=0.0), stream, plan)
        prox = local_train(data, theta, replace(cfg, fedprox_mu=1.0), stream, plan)
        assert np.linalg.norm(prox.values) < np.linalg.norm(free.values)

    def test_deterministic_in_stream(self, plan):
        data, theta = _client(), init_model(plan, 0)
        a = local_train(data, theta, ModelConfig(), RandomStream(1, "x"), plan)
        b = local_train(data, theta, ModelConfig(), RandomStream(1, "x"), plan)
        c = local_train(data, theta, ModelConfig(), RandomStream(2, "x"), plan)
        assert a == b and a != c

    def test_full_batch_descent_is_monotone(self):
        spec = DataSpec(n_total=500)
        data = generate(spec)
        plan = make_plan(dims=spec.dims)
        theta = init_model(plan, 0)
        prev = loss(data, theta, 1e-4, plan)
        for _ in range(50):
            theta = theta.with_values(theta.values - 0.01 * grad(data, theta, 1e-4, plan).values)
            cur = loss(data, theta, 1e-4, plan)
            assert cur < prev
            prev = cur


def test_init_predicts_half(plan, rng):
    theta = init_model(plan, 42)
    assert np.all(theta.block("clf") == 0.0)
    assert np.all(predict_proba(make_batch(rng), theta, plan) == 0.5)
    assert theta == init_model(plan, 42)
    assert np.any(theta.block("enc_im") != 0.0)


def test_layout_sizes(plan):
    layout = model_layout(plan)
    assert [b.name for b in layout] == ["enc_im", "enc_emr", "enc_iot", "clf"]
    assert [b.length for b in layout] == [5 * 2 + 2, 4 * 2 + 2, 3 * 1 + 1, plan.fused_dim + 1]


def test_batch_type_alias():
    assert issubclass(type(_client(3)), MultiModalData)
