from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

import mcpfl.secagg as secagg
from mcpfl.errors import EncodingOverflow, ProtocolError, RoundAbort
from mcpfl.secagg import (
    FieldVector,
    MaskedUpdate,
    PairwiseSeeds,
    aggregate_unmask,
    decode_fixed,
    encode_fixed,
    mask,
    weighted_mean,
)

SCALE = 2.0**24
Q = 2**64


def masked_round(updates, weights, seed=0, round_=1, frac_bits=24):
    roster = sorted(updates)
    seeds = PairwiseSeeds.provision(roster, seed, round_)
    return [
        MaskedUpdate(k, round_, mask(encode_fixed(weights[k] * updates[k], frac_bits), k, roster, seeds, round_), weights[k])
        for k in roster
    ]


class TestEncoding:
    def test_zero(self):
        assert encode_fixed([0.0]).values.tolist() == [0]
        assert decode_fixed(encode_fixed([0.0])).tolist() == [0.0]

    def test_one(self):
        assert encode_fixed([1.0]).values.tolist() == [16777216]

    def test_minus_one(self):
        assert encode_fixed([-1.0]).values.tolist() == [Q - 16777216]

    def test_round_trip(self):
        v = np.random.default_rng(0).uniform(-10, 10, 5000)
        assert np.max(np.abs(decode_fixed(encode_fixed(v)) - v)) <= 1 / SCALE

    def test_sum_of_twenty(self):
        rng = np.random.default_rng(1)
        vs = [rng.uniform(-1, 1, 200) for _ in range(20)]
        total = encode_fixed(vs[0])
        for v in vs[1:]:
            total = total + encode_fixed(v)
        assert np.max(np.abs(decode_fixed(total) - np.sum(vs, axis=0))) <= 20 / SCALE

    @pytest.mark.parametrize("bad", [2.0**38, -(2.0**38), np.inf, np.nan])
    def test_overflow(self, bad):
        with pytest.raises(EncodingOverflow):
            encode_fixed([bad])

    def test_field_add_checks_shape(self):
        with pytest.raises(ProtocolError):
            encode_fixed([1.0, 2.0]) + encode_fixed([1.0])
        with pytest.raises(ProtocolError):
            encode_fixed([1.0], 24) + encode_fixed([1.0], 16)

    def test_wraps_without_saturation(self):
        big = FieldVector(np.array([Q - 1], dtype=np.uint64), 0)
        assert (big + FieldVector([2], 0)).values.tolist() == [1]


class TestMask:
    def test_singleton_roster(self):
        u = encode_fixed([1.0, -2.0])
        assert mask(u, 3, [3], PairwiseSeeds.provision([3], 0, 1), 1) == u

    def test_two_client_example(self, monkeypatch):
        monkeypatch.setattr(secagg, "pair_mask", lambda *a: np.array([5, 7], dtype=np.uint64))
        seeds = PairwiseSeeds({frozenset((0, 1)): 123})
        a = mask(FieldVector([1, 2], 0), 0, [0, 1], seeds, 1)
        b = mask(FieldVector([3, 4], 0), 1, [0, 1], seeds, 1)
        assert a.values.tolist() == [6, 9]
        assert b.values.tolist() == [(3 - 5) % Q, (4 - 7) % Q]
        assert (a + b).values.tolist() == [4, 6]

    def test_not_in_roster(self):
        with pytest.raises(ProtocolError):
            mask(encode_fixed([1.0]), 9, [1, 2], PairwiseSeeds.provision([1, 2], 0, 1), 1)

    def test_missing_seed(self):
        with pytest.raises(ProtocolError):
            mask(encode_fixed([1.0]), 1, [1, 2], PairwiseSeeds(), 1)

    def test_masked_coordinates_look_uniform(self):
        # one coordinate of a fixed update masked under 10^4 different pair seeds,
        # binned by its top 4 bits
        u = encode_fixed([0.25])
        draws = np.empty(10_000, dtype=np.uint64)
        for t in range(draws.size):
            seeds = PairwiseSeeds.provision([0, 1], 2024, t)
            draws[t] = mask(u, 0, [0, 1], seeds, t).values[0]
        counts = np.bincount((draws >> np.uint64(60)).astype(np.int64), minlength=16)
        assert chisquare(counts).pvalue > 0.001

    def test_no_masked_vector_equals_plaintext(self):
        rng = np.random.default_rng(5)
        updates = {k: rng.uniform(-1, 1, 50) for k in range(6)}
        masked = masked_round(updates, {k: 1.0 for k in updates})
        for mu in masked:
            assert np.all(mu.vector.values != encode_fixed(updates[mu.client_id]).values)

    def test_fresh_masks_per_attempt(self):
        a = PairwiseSeeds.provision([0, 1, 2], 7, 3, attempt=0)
        b = PairwiseSeeds.provision([0, 1, 2], 7, 3, attempt=1)
        assert a.get(0, 1) != b.get(0, 1)
        assert a.get(0, 1) == a.get(1, 0)


class TestAggregate:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 20), st.integers(0, 2**32), st.integers(1, 40))
    def test_exact_cancellation(self, n_clients, seed, dim):
        rng = np.random.default_rng(seed)
        plain = {k: encode_fixed(rng.uniform(-1, 1, dim)) for k in range(n_clients)}
        roster = sorted(plain)
        seeds = PairwiseSeeds.provision(roster, seed, 1)
        masked = [MaskedUpdate(k, 1, mask(plain[k], k, roster, seeds, 1), 1.0) for k in roster]
        expected = plain[0]
        for k in roster[1:]:
            expected = expected + plain[k]
        assert aggregate_unmask(masked, roster) == expected

    def test_single_client(self):
        u = encode_fixed([0.5, -0.25])
        mu = MaskedUpdate(4, 1, mask(u, 4, [4], PairwiseSeeds.provision([4], 0, 1), 1), 1.0)
        assert aggregate_unmask([mu], [4]) == u

    def test_weighted_mean_matches_plaintext(self):
        rng = np.random.default_rng(11)
        updates = {k: rng.uniform(-1, 1, 30) for k in (2, 5, 7, 8, 13)}
        weights = {k: float(rng.integers(10, 100)) for k in updates}
        masked = masked_round(updates, {k: 1.0 for k in updates})
        summed = decode_fixed(aggregate_unmask(masked, list(updates)))
        assert np.max(np.abs(summed - np.sum(list(updates.values()), axis=0))) <= 5 / SCALE

        masked = masked_round(updates, weights)
        mean = weighted_mean(masked, list(updates))
        oracle = sum(weights[k] * updates[k] for k in sorted(updates)) / sum(weights.values())
        assert np.max(np.abs(mean - oracle)) <= 5 / SCALE

    def test_withheld_client_aborts(self):
        rng = np.random.default_rng(0)
        updates = {k: rng.uniform(-1, 1, 4) for k in range(5)}
        masked = masked_round(updates, {k: 1.0 for k in updates})
        with pytest.raises(RoundAbort) as err:
            aggregate_unmask([m for m in masked if m.client_id != 3], range(5))
        assert err.value.missing == [3]

    def test_outsider_and_duplicate(self):
        masked = masked_round({0: np.zeros(2), 1: np.zeros(2)}, {0: 1.0, 1: 1.0})
        with pytest.raises(ProtocolError):
            aggregate_unmask(masked, [0])
        with pytest.raises(ProtocolError):
            aggregate_unmask(masked + masked[:1], [0, 1])

    def test_weight_must_be_positive(self):
        with pytest.raises(ProtocolError):
            MaskedUpdate(0, 1, encode_fixed([0.0]), 0.0)
