from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mcpfl.core import ModelVector, RandomStream, l2_norm, make_layout
from mcpfl.errors import ConfigError, InfiniteEpsilon
from mcpfl.privacy import (
    UNBOUNDED,
    BudgetState,
    Gate,
    PrivacyConfig,
    clip,
    epsilon_total,
    gate,
    perturb,
    privatize,
)


def vec(values):
    values = np.asarray(values, dtype=float)
    return ModelVector(values, make_layout([("v", values.size)]))


class TestClip:
    def test_short_vector_unchanged(self):
        u = vec([0.3, 0.4])
        assert clip(u, 1.0) == u

    def test_three_four(self):
        assert np.allclose(clip(vec([3.0, 4.0]), 1.0).values, [0.6, 0.8], rtol=0, atol=1e-15)

    def test_random_norms_bounded(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            c = float(rng.uniform(0.01, 5.0))
            u = vec(rng.standard_normal(int(rng.integers(1, 50))) * rng.uniform(0, 20))
            assert l2_norm(clip(u, c)) <= c + 1e-12

    def test_direction_preserved(self):
        u = vec([2.0, -6.0, 3.0])
        out = clip(u, 0.5).values
        assert np.allclose(out / np.linalg.norm(out), u.values / 7.0)

    @pytest.mark.parametrize("c", [0.0, -1.0])
    def test_clip_norm_positive(self, c):
        with pytest.raises(ValueError):
            clip(vec([1.0]), c)

    def test_infinite_clip_is_identity(self):
        u = vec([1e9, -1e9])
        assert clip(u, math.inf) == u


class TestPerturb:
    def test_zero_sigma_identity(self):
        u = vec([1.0, 2.0])
        assert perturb(u, 0.0, RandomStream(0, "n")) == u

    def test_reproducible(self):
        u = vec(np.zeros(10))
        s = RandomStream(4, "noise:1:2")
        assert perturb(u, 1.0, s) == perturb(u, 1.0, s)

    def test_noise_std(self):
        noise = perturb(vec(np.zeros(100_000)), 2.0, RandomStream(99, "noise")).values
        assert 1.98 <= noise.std() <= 2.02

    def test_negative_sigma(self):
        with pytest.raises(ValueError):
            perturb(vec([0.0]), -0.1, RandomStream(0, "n"))


class TestEpsilon:
    def test_zero_rounds(self):
        assert epsilon_total(0, 1e-5, 1.0, 4.0) == 0.0

    def test_reference_value(self):
        # evaluated independently with mpmath at 30 digits
        assert abs(epsilon_total(100, 1e-5, 1.0, 4.0) - 11.99631478047020) <= 1e-12

    @given(st.integers(1, 10_000), st.floats(1e-3, 100.0))
    def test_doubling_sigma_halves(self, R, sigma):
        a = epsilon_total(R, 1e-5, 1.0, sigma)
        b = epsilon_total(R, 1e-5, 1.0, 2 * sigma)
        assert math.isclose(b, a / 2, rel_tol=1e-12)

    def test_zero_sigma(self):
        with pytest.raises(InfiniteEpsilon):
            epsilon_total(1, 1e-5, 1.0, 0.0)

    def test_monotone_over_grid(self):
        Rs, deltas, sens, sigmas = [1, 2, 5, 50, 500], [1e-9, 1e-5, 1e-2, 0.5], [0.1, 1, 3], [0.25, 1, 4]
        for d in deltas:
            for c in sens:
                for s in sigmas:
                    eps = [epsilon_total(R, d, c, s) for R in Rs]
                    assert all(a < b for a, b in zip(eps, eps[1:]))
        for R in Rs:
            eps_sigma = [epsilon_total(R, 1e-5, 1.0, s) for s in sigmas]
            assert all(a > b for a, b in zip(eps_sigma, eps_sigma[1:]))
            eps_delta = [epsilon_total(R, d, 1.0, 1.0) for d in deltas]
            assert all(a > b for a, b in zip(eps_delta, eps_delta[1:]))
            eps_sens = [epsilon_total(R, 1e-5, c, 1.0) for c in sens]
            assert all(a < b for a, b in zip(eps_sens, eps_sens[1:]))


class TestGate:
    def test_unbounded(self):
        assert gate(BudgetState(10**6), PrivacyConfig(epsilon_max=UNBOUNDED)) is Gate.ALLOWED

    def test_threshold(self):
        cfg = PrivacyConfig(clip_norm=1.0, sigma=4.0, dp_delta=1e-5)
        eps100 = epsilon_total(100, 1e-5, 1.0, 4.0)
        at = PrivacyConfig(1.0, 4.0, 1e-5, epsilon_max=eps100)
        below = PrivacyConfig(1.0, 4.0, 1e-5, epsilon_max=math.nextafter(eps100, 0.0))
        assert gate(BudgetState(99), at) is Gate.ALLOWED
        assert gate(BudgetState(99), below) is Gate.EXHAUSTED
        assert gate(BudgetState(0), cfg) is Gate.ALLOWED

    def test_once_exhausted_stays_exhausted(self):
        cfg = PrivacyConfig(1.0, 1.0, 1e-5, epsilon_max=20.0)
        states = [gate(BudgetState(R), cfg) for R in range(100)]
        first = states.index(Gate.EXHAUSTED)
        assert all(s is Gate.EXHAUSTED for s in states[first:])
        assert all(s is Gate.ALLOWED for s in states[:first])

    def test_zero_sigma_with_finite_budget(self):
        assert gate(BudgetState(0), PrivacyConfig(1.0, 0.0, 1e-5, 5.0)) is Gate.EXHAUSTED

    def test_budget_state(self):
        cfg = PrivacyConfig(1.0, 4.0, 1e-5)
        b = BudgetState()
        assert b.epsilon_spent(cfg) == 0.0
        for _ in range(100):
            b = b.charged()
        assert b.epsilon_spent(cfg) == epsilon_total(100, 1e-5, 1.0, 4.0)
        assert BudgetState(3).epsilon_spent(PrivacyConfig(1.0, 0.0)) == math.inf


class TestPrivatize:
    def test_clip_before_noise(self):
        cfg = PrivacyConfig(clip_norm=1.0, sigma=0.5)
        u, s = vec([30.0, 40.0]), RandomStream(1, "n")
        out = privatize(u, cfg, s)
        expected = vec([0.6, 0.8]).values + 0.5 * s.gaussian(2)
        assert np.allclose(out.values, expected, rtol=0, atol=1e-15)

    def test_naive_skips_clipping(self):
        cfg = PrivacyConfig(clip_norm=1.0, sigma=0.5)
        u, s = vec([30.0, 40.0]), RandomStream(1, "n")
        out = privatize(u, cfg, s, use_clip=False)
        assert np.array_equal(out.values, u.values + 0.5 * s.gaussian(2))

    def test_noop_when_unclipped_and_noiseless(self):
        u = vec(np.random.default_rng(3).standard_normal(20) * 100)
        assert privatize(u, PrivacyConfig(clip_norm=math.inf, sigma=0.0), RandomStream(0, "n")) == u


@pytest.mark.parametrize(
    "kwargs, key",
    [
        (dict(clip_norm=0.0), "dp.clip_norm"),
        (dict(sigma=-1.0), "dp.sigma"),
        (dict(dp_delta=1.0), "dp.delta"),
        (dict(epsilon_max=0.0), "dp.epsilon_max"),
    ],
)
def test_config_validation(kwargs, key):
    with pytest.raises(ConfigError) as err:
        PrivacyConfig(**kwargs).validate()
    assert err.value.key == key
