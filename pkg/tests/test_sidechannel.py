import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emloc.errors import BinEdgeMismatchError, DimensionMismatchError, EmptySequenceError
from emloc.sidechannel import (
    RSSI_BIN_EDGES,
    BowHistogram,
    ChannelConfig,
    FingerprintIndex,
    MagneticSequence,
    RssiDistribution,
    SideChannelFingerprint,
    appearance_likelihood,
    combined_weight,
    dtw,
    dtw_batch,
    dtw_distance,
    fingerprint_likelihood,
    idf_weights,
    kl_divergence,
    magnetic_likelihood,
    normalized_dtw,
    quantize,
    wifi_likelihood,
)

from . import oracles
from .conftest import random_fingerprint

TWO_BINS = np.array([0.0, 1.0, 2.0])


def dist(p, edges=TWO_BINS):
    return RssiDistribution(np.asarray(p, float), edges)


def random_dist(rng, n=6):
    p = rng.dirichlet(np.ones(n)) + 1e-4
    return dist(p / p.sum(), np.arange(n + 1.0))


class TestRssiDistribution:
    def test_smoothing_floor_and_normalization(self):
        d = RssiDistribution.from_samples([-60.0] * 10)
        assert abs(d.probs.sum() - 1.0) < 1e-9
        assert d.probs.min() > 0
        assert d.sample_count == 10
        np.testing.assert_array_equal(d.bin_edges, RSSI_BIN_EDGES)

    def test_out_of_range_samples_are_clipped(self):
        d = RssiDistribution.from_samples([-120.0, -10.0])
        assert d.probs[0] > 0.4 and d.probs[-1] > 0.4

    def test_edges_must_match_probs(self):
        with pytest.raises(BinEdgeMismatchError):
            RssiDistribution(np.array([0.5, 0.5]), np.array([0.0, 1.0]))

    def test_round_trip(self, rng):
        d = RssiDistribution.from_samples(rng.normal(-70, 4, 50))
        e = RssiDistribution.from_dict(d.to_dict())
        np.testing.assert_array_equal(d.probs, e.probs)
        assert e.sample_count == d.sample_count


class TestKL:
    def test_identity(self):
        p = dist([0.3, 0.7])
        assert kl_divergence(p, p) == 0.0

    def test_worked_example(self):
        p, q = dist([0.5, 0.5]), dist([0.9, 0.1])
        expected = 0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1)
        assert kl_divergence(p, q) == pytest.approx(expected, rel=1e-12)
        assert kl_divergence(p, q) == pytest.approx(0.5108, abs=5e-5)

    def test_asymmetry(self):
        p, q = dist([0.5, 0.5]), dist([0.9, 0.1])
        assert kl_divergence(p, q) != pytest.approx(kl_divergence(q, p), rel=1e-3)

    def test_bin_mismatch(self):
        with pytest.raises(BinEdgeMismatchError):
            kl_divergence(dist([0.5, 0.5]), dist([0.5, 0.5], np.array([0.0, 1.0, 3.0])))

    def test_matches_oracle(self, rng):
        for _ in range(200):
            p, q = random_dist(rng), random_dist(rng)
            assert kl_divergence(p, q) == pytest.approx(oracles.kl(p.probs, q.probs), rel=1e-10, abs=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=8), st.integers(0, 2**31))
    def test_non_negative(self, raw, seed):
        p = np.asarray(raw) / sum(raw)
        q = np.random.default_rng(seed).dirichlet(np.ones(len(raw))) + 1e-4
        edges = np.arange(len(raw) + 1.0)
        assert kl_divergence(dist(p, edges), dist(q / q.sum(), edges)) >= 0.0


class TestWifiLikelihood:
    def test_identical(self):
        fp = {"a": dist([0.2, 0.8]), "b": dist([0.6, 0.4])}
        assert wifi_likelihood(fp, fp) == 1.0

    def test_single_shared_ap(self):
        p, q = dist([0.5, 0.5]), dist([0.9, 0.1])
        assert wifi_likelihood({"a": p}, {"a": q}) == pytest.approx(math.exp(-kl_divergence(p, q)))
        assert wifi_likelihood({"a": p}, {"a": q}) == pytest.approx(0.600, abs=5e-4)

    def test_mean_over_shared_aps_only(self):
        p, q, r = dist([0.5, 0.5]), dist([0.9, 0.1]), dist([0.3, 0.7])
        live = {"a": p, "b": r, "only_live": p}
        stored = {"a": q, "b": r, "only_stored": q}
        expected = math.exp(-(kl_divergence(p, q) + 0.0) / 2)
        assert wifi_likelihood(live, stored) == pytest.approx(expected)

    def test_no_shared_aps_gives_floor(self):
        assert wifi_likelihood({"a": dist([0.5, 0.5])}, {"b": dist([0.5, 0.5])}) == 1e-3
        assert wifi_likelihood({"a": dist([0.5, 0.5])}, {}, floor=0.01) == 0.01

    def test_both_empty(self):
        assert wifi_likelihood({}, {}) == 1.0


class TestDTW:
    def test_identity(self):
        assert dtw_distance([1.0, 5.0, 2.0], [1.0, 5.0, 2.0]) == 0.0

    def test_repeated_element(self):
        assert dtw_distance([1, 2, 3], [1, 2, 2, 3]) == 0.0

    def test_constant_offset(self):
        assert dtw_distance([0, 0], [1, 1]) == 2.0

    def test_empty(self):
        with pytest.raises(EmptySequenceError):
            dtw_distance([], [1.0])
        with pytest.raises(EmptySequenceError):
            MagneticSequence(np.zeros(0))

    def test_path_length_and_normalization(self):
        cost, length = dtw([0.0, 0.0], [1.0, 1.0])
        assert (cost, length) == (2.0, 2)
        assert normalized_dtw([0.0, 0.0], [1.0, 1.0]) == 1.0
        assert magnetic_likelihood([0.0, 0.0], [1.0, 1.0]) == pytest.approx(math.exp(-1))

    def test_exhaustive_oracle_small(self, rng):
        for _ in range(300):
            a = rng.integers(0, 5, rng.integers(1, 5)).astype(float)
            b = rng.integers(0, 5, rng.integers(1, 5)).astype(float)
            assert dtw_distance(a, b) == pytest.approx(oracles.dtw_exhaustive(list(a), list(b)), abs=1e-12)

    def test_banded_oracle(self, rng):
        for _ in range(100):
            n, m = rng.integers(2, 12, 2)
            a, b = rng.normal(40, 5, n), rng.normal(40, 5, m)
            band = int(rng.integers(0, 4))
            w = max(band, abs(n - m))
            assert dtw_distance(a, b, band) == pytest.approx(oracles.dtw_matrix(list(a), list(b), w), rel=1e-10)

    def test_batch_agrees(self, rng):
        A, B = rng.normal(0, 1, (20, 7)), rng.normal(0, 1, (20, 9))
        c, L = dtw_batch(A, B, band=0.3)
        for k in range(20):
            assert (c[k], L[k]) == dtw(A[k], B[k], 0.3)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(0, 100), min_size=1, max_size=10), st.lists(st.floats(0, 100), min_size=1, max_size=10))
    def test_symmetry(self, a, b):
        assert dtw_distance(a, b) == pytest.approx(dtw_distance(b, a), rel=1e-12, abs=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 100), st.floats(0, 100)), min_size=1, max_size=10))
    def test_bounded_by_lockstep(self, pairs):
        a, b = [p[0] for p in pairs], [p[1] for p in pairs]
        assert dtw_distance(a, b) <= math.fsum(abs(x - y) for x, y in pairs) + 1e-9

    def test_likelihood_monotone(self):
        vals = [magnetic_likelihood([0.0] * 4, [x] * 4) for x in (0.0, 0.5, 1.0, 2.0)]
        assert vals[0] == 1.0
        assert all(a > b for a, b in zip(vals, vals[1:]))


class TestAppearance:
    def test_quantize_empty(self):
        h = quantize(np.zeros((0, 3)), np.eye(3))
        np.testing.assert_array_equal(h.counts, [0, 0, 0])

    def test_quantize_at_centroids(self):
        V = np.eye(4)
        np.testing.assert_array_equal(quantize(V[[0, 2, 2]], V).counts, [1, 0, 2, 0])

    def test_quantize_tie_goes_to_lowest_index(self):
        V = np.array([[1.0, 0.0], [-1.0, 0.0]])
        np.testing.assert_array_equal(quantize([[0.0, 1.0]], V).counts, [1, 0])

    def test_quantize_dim_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            quantize(np.ones((2, 3)), np.ones((2, 4)))

    def test_quantize_oracle(self, rng):
        for _ in range(100):
            V = rng.normal(size=(rng.integers(1, 8), 4))
            D = rng.normal(size=(rng.integers(0, 20), 4))
            np.testing.assert_array_equal(quantize(D, V).counts, oracles.quantize(D, V))

    def test_self_similarity_and_orthogonal(self):
        h = BowHistogram(np.array([1, 2, 0, 3]))
        assert appearance_likelihood(h, h) == pytest.approx(1.0)
        assert appearance_likelihood(BowHistogram(np.array([1, 0])), BowHistogram(np.array([0, 4]))) == 1e-3

    def test_vocabulary_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            appearance_likelihood(BowHistogram(np.ones(3)), BowHistogram(np.ones(4)))

    def test_tfidf_cosine_oracle(self, rng):
        hs = [BowHistogram(rng.integers(0, 4, 10)) for _ in range(30)]
        idf = idf_weights(hs, 10)
        for a, b in zip(hs[:15], hs[15:]):
            x = [c * w for c, w in zip(a.counts, idf)]
            y = [c * w for c, w in zip(b.counts, idf)]
            na, nb = math.sqrt(math.fsum(v * v for v in x)), math.sqrt(math.fsum(v * v for v in y))
            ref = 1e-3 if na == 0 or nb == 0 else min(1.0, max(1e-3, math.fsum(u * v for u, v in zip(x, y)) / (na * nb)))
            assert appearance_likelihood(a, b, idf) == pytest.approx(ref, rel=1e-10)

    def test_idf_formula(self):
        hs = [BowHistogram(np.array([1, 0])), BowHistogram(np.array([1, 1]))]
        np.testing.assert_allclose(idf_weights(hs, 2), [1.0, math.log(3 / 2) + 1.0])


class TestFusion:
    def test_products(self):
        assert combined_weight(1, 1, 1) == 1
        assert combined_weight(0.5, 0.5, None) == 0.25

    def test_permutation(self):
        a, b, c = 0.3, 0.7, 0.9
        assert combined_weight(a, b, c) == pytest.approx(combined_weight(c, a, b))

    def test_monotone(self):
        assert combined_weight(0.5, 0.4, 0.3) <= combined_weight(0.6, 0.4, 0.3)

    def test_disabled_channels_give_one(self, rng):
        a, b = random_fingerprint(rng), random_fingerprint(rng)
        off = ChannelConfig(wifi=False, magnetic=False, appearance=False)
        assert fingerprint_likelihood(a, b, off) == 1.0

    def test_index_matches_pairwise(self, rng):
        stored = [random_fingerprint(rng) for _ in range(12)]
        live = random_fingerprint(rng)
        S = FingerprintIndex(stored).score(live)
        for k, fp in enumerate(stored):
            ref = fingerprint_likelihood(live, fp)
            assert np.prod(S[k]) == pytest.approx(ref, rel=1e-10)

    def test_likelihoods_in_unit_interval(self, rng):
        for _ in range(50):
            v = fingerprint_likelihood(random_fingerprint(rng), random_fingerprint(rng))
            assert 0.0 < v <= 1.0

    def test_fingerprint_round_trip(self, rng):
        fp = random_fingerprint(rng).with_appearance(BowHistogram(np.array([0, 3, 1])))
        back = SideChannelFingerprint.from_dict(fp.to_dict())
        assert fingerprint_likelihood(fp, back) == pytest.approx(1.0)
        np.testing.assert_array_equal(back.appearance.counts, [0, 3, 1])
