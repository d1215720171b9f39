import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from emloc.errors import ConfigError, DataError
from emloc.geometry import Pose6D
from emloc.graph import LocalizationGraph
from emloc.localizer import (
    Localizer,
    LocalizerConfig,
    LocalizerFrame,
    NodeLikelihood,
    ParticleSet,
    distance_reweight,
    effective_particles,
    ekf_measurement_update,
    ekf_update_arrays,
    fused_pose,
    init_uniform,
    node_mass,
    predict,
    reassign_nodes,
    resample,
    select_candidate_nodes,
    systematic_indices,
    weight_update,
)
from emloc.odometry import PdrDelta
from emloc.sidechannel import ChannelConfig, fingerprint_likelihood
from emloc.vision import ObservationSet

from . import oracles
from .conftest import StubPnp, chain_graph, random_fingerprint


def particles(nodes, means=None, weights=None, sigma=0.1):
    nodes = np.asarray(nodes, dtype=np.int64)
    n = nodes.size
    means = np.zeros((n, 6)) if means is None else np.asarray(means, float)
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, float)
    return ParticleSet(nodes, means, np.tile(np.eye(6) * sigma**2, (n, 1, 1)), w)


def random_spd(rng, scale=0.1):
    A = rng.normal(0, scale, (6, 6))
    return A @ A.T + np.eye(6) * 1e-3


def obs_set(rng, n=12):
    d = rng.standard_normal((n, 8))
    return ObservationSet(rng.uniform(0, 600, (n, 2)), d / np.linalg.norm(d, axis=1, keepdims=True))


class TestConfig:
    def test_defaults(self):
        cfg = LocalizerConfig()
        assert cfg.n_particles == 500 and cfg.k == 1
        assert cfg.gate == 250.0 and cfg.resample_below == 250.0

    @pytest.mark.parametrize("kw", [{"n_particles": 0}, {"k": 0}, {"tau_eff": 1.0}, {"tau_eff": 501.0},
                                    {"measurement_sigma": (0.1,) * 5}, {"prior_sigma": (0.0,) * 6}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            LocalizerConfig(**kw)


class TestInit:
    def test_uniform_over_nodes(self):
        g = chain_graph(5)
        ps = init_uniform(g, LocalizerConfig(n_particles=5000), np.random.default_rng(1))
        counts = np.bincount(ps.nodes, minlength=5)
        assert stats.chisquare(counts).pvalue > 1e-3
        np.testing.assert_allclose(ps.weights, 1 / 5000)
        np.testing.assert_array_equal(ps.means, 0)
        np.testing.assert_allclose(ps.covs[0], np.diag(np.asarray(LocalizerConfig().prior_sigma) ** 2))

    def test_empty_graph(self):
        with pytest.raises(DataError):
            init_uniform(LocalizationGraph(), LocalizerConfig())


class TestPredict:
    def test_rotated_node_frame(self):
        g = chain_graph(2)
        g.nodes[1].world_pose = Pose6D.from_euler([1, 0, 0], np.pi / 2)
        ps = particles([0, 1])
        cfg = LocalizerConfig(n_particles=2)
        out = predict(ps, PdrDelta(1.0, 0.0, 0.25), cfg, g)
        np.testing.assert_allclose(out.means[0, :3], [1, 0, 0], atol=1e-12)
        np.testing.assert_allclose(out.means[1, :3], [0, -1, 0], atol=1e-12)
        np.testing.assert_allclose(out.means[:, 3], 0.25)
        np.testing.assert_allclose(out.covs[0] - ps.covs[0], np.diag(np.asarray(cfg.process_sigma) ** 2))

    def test_jitter_needs_rng(self, rng):
        g = chain_graph(2)
        ps = particles([0] * 50)
        cfg = LocalizerConfig(n_particles=50)
        a = predict(ps, PdrDelta(0.0, 0.0, 0.0), cfg, g)
        b = predict(ps, PdrDelta(0.0, 0.0, 0.0), cfg, g, rng)
        np.testing.assert_array_equal(a.means, 0)
        assert np.std(b.means[:, 0]) > 0
        np.testing.assert_array_equal(b.means[:, 2], 0)  # no jitter on height


class TestWeights:
    def test_matches_oracle(self, rng):
        g = chain_graph(4, rng=rng)
        live = random_fingerprint(rng)
        ps = particles([0, 1, 2, 3, 3], weights=[0.1, 0.2, 0.3, 0.2, 0.2])
        out = weight_update(ps, live, g)
        lik = {}
        for n in range(4):
            inc = [e.fingerprint for e in g.edges if n in (e.from_node, e.to_node)]
            lik[n] = np.mean([fingerprint_likelihood(live, f) for f in inc])
        ref = np.array([w * lik[int(n)] for n, w in zip(ps.nodes, ps.weights)])
        np.testing.assert_allclose(out.weights, ref / ref.sum(), rtol=1e-10)

    def test_no_fingerprint_keeps_weights(self, rng):
        g = chain_graph(3, rng=rng)
        ps = particles([0, 1, 2], weights=[0.5, 0.3, 0.2])
        np.testing.assert_allclose(weight_update(ps, None, g).weights, ps.weights)

    @pytest.mark.parametrize("c", [0.5, 2.0, 8.0])
    def test_common_scale_power_of_two_exact(self, rng, c):
        g = chain_graph(4, rng=rng)
        live = random_fingerprint(rng)
        ps = particles([0, 1, 2, 3, 1])
        m = NodeLikelihood(g)
        a = weight_update(ps, live, g, m, ChannelConfig())
        b = weight_update(ps, live, g, m, ChannelConfig(scale=c))
        np.testing.assert_array_equal(a.weights, b.weights)

    def test_common_scale_arbitrary(self, rng):
        g = chain_graph(4, rng=rng)
        live = random_fingerprint(rng)
        ps = particles([0, 1, 2, 3, 1])
        a = weight_update(ps, live, g, None, ChannelConfig())
        b = weight_update(ps, live, g, None, ChannelConfig(scale=3.7))
        np.testing.assert_allclose(a.weights, b.weights, rtol=1e-12)

    def test_distance_ratio(self):
        ps = particles([0, 0], means=[[0, 0, 0, 0, 0, 0], [math.log(2), 0, 0, 0, 0, 0]])
        w = distance_reweight(ps).weights
        assert w[0] / w[1] == pytest.approx(2.0)
        assert w.sum() == pytest.approx(1.0)

    def test_collapse_resets_uniform(self):
        ps = particles([0, 0], means=[[1e4, 0, 0, 0, 0, 0]] * 2)
        np.testing.assert_allclose(distance_reweight(ps).weights, 0.5)


class TestNeff:
    def test_examples(self):
        assert effective_particles(np.full(10, 0.1)) == pytest.approx(10.0)
        assert effective_particles([1.0, 0, 0, 0]) == 1.0
        assert effective_particles([0.5, 0.5, 0, 0]) == 2.0

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(1e-6, 1.0), min_size=1, max_size=60))
    def test_bounds_and_oracle(self, raw):
        w = np.array(raw) / np.sum(raw)
        n = effective_particles(w)
        assert 1 - 1e-9 <= n <= w.size * (1 + 1e-12)
        assert n == pytest.approx(oracles.n_eff(w), rel=1e-10)


class TestCandidates:
    def test_oracle(self, rng):
        for _ in range(200):
            n = int(rng.integers(1, 40))
            nodes = rng.integers(0, 8, n)
            # quantised weights make ties common
            w = rng.integers(1, 4, n).astype(float)
            ps = particles(nodes, weights=w / w.sum())
            k = int(rng.integers(1, 10))
            mass = {}
            for nd, wi in zip(nodes.tolist(), ps.weights.tolist()):
                mass[nd] = mass.get(nd, 0.0) + wi
            ids = sorted(mass)
            uniq, m = node_mass(ps)
            np.testing.assert_allclose(m, [mass[i] for i in ids])
            got = select_candidate_nodes(ps, k)
            assert len(got) == min(k, len(ids))
            # masses non-increasing; equal masses in increasing id order
            gm = [m[list(uniq).index(x)] for x in got]
            assert all(a >= b for a, b in zip(gm, gm[1:]))
            for a, b, ma, mb in zip(got, got[1:], gm, gm[1:]):
                if ma == mb:
                    assert a < b
            excluded = [i for i in ids if i not in got]
            if excluded:
                assert max(mass[i] for i in excluded) <= min(gm) + 1e-15

    def test_tie(self):
        assert select_candidate_nodes(particles([3, 1, 2]), 2) == [1, 2]

    def test_bad_k(self):
        with pytest.raises(ConfigError):
            select_candidate_nodes(particles([0]), 0)


class TestEkf:
    def test_matches_textbook(self, rng):
        for _ in range(200):
            mean = np.concatenate([rng.normal(0, 1, 3), rng.uniform(-3, 3, 1), rng.uniform(-1, 1, 2)])
            P, Rm = random_spd(rng), random_spd(rng, 0.05)
            z = mean + np.concatenate([rng.normal(0, 0.3, 3), rng.normal(0, 0.2, 3)])
            m, Pn = ekf_update_arrays(mean[None], P[None], z, Rm)
            rm, rP = oracles.kalman_pose(mean, P, z, Rm)
            np.testing.assert_allclose(m[0, :3], rm[:3], atol=1e-9)
            np.testing.assert_allclose(oracles.rot_zyx(*m[0, 3:]), oracles.rot_zyx(*rm[3:]), atol=1e-9)
            np.testing.assert_allclose(Pn[0], rP, atol=1e-9)

    def test_covariance_shrinks_and_stays_spd(self, rng):
        P = np.stack([random_spd(rng) for _ in range(20)])
        _, Pn = ekf_update_arrays(np.zeros((20, 6)), P, np.zeros(6), np.eye(6) * 1e-4)
        assert np.all(np.linalg.eigvalsh(Pn) > 0)
        assert np.all(np.trace(Pn, axis1=1, axis2=2) < np.trace(P, axis1=1, axis2=2))
        np.testing.assert_array_equal(Pn, np.swapaxes(Pn, 1, 2))

    def test_only_target_node(self):
        ps = particles([0, 1, 0])
        out = ekf_measurement_update(ps, 0, Pose6D.from_euler([1, 0, 0], 0.0), LocalizerConfig(n_particles=3))
        assert out.means[0, 0] > 0.5 and out.means[2, 0] > 0.5
        np.testing.assert_array_equal(out.means[1], 0)


class TestResampling:
    def test_systematic_oracle(self, rng):
        for _ in range(300):
            n = int(rng.integers(1, 50))
            w = rng.random(n) ** 3
            w /= w.sum()
            u0 = float(rng.random())
            assert systematic_indices(w, u0).tolist() == oracles.systematic(w.tolist(), u0)

    def test_above_threshold_untouched(self):
        g = chain_graph(3)
        ps = particles([0, 1, 2])
        out, did = resample(ps, LocalizerConfig(n_particles=3), g, np.random.default_rng(0))
        assert not did and out is ps

    def test_below_threshold(self, rng):
        g = chain_graph(3)
        ps = particles([0, 1, 2, 2], weights=[0.97, 0.01, 0.01, 0.01])
        out, did = resample(ps, LocalizerConfig(n_particles=4), g, rng)
        assert did and len(out) == 4
        np.testing.assert_allclose(out.weights, 0.25)
        assert set(out.nodes.tolist()) <= {0, 1, 2}

    def test_reassign_preserves_world_pose(self):
        g = chain_graph(4)
        g.nodes[1].world_pose = Pose6D.from_euler([1, 0, 0], 0.4)
        for e in g.edges:
            e.relative_pose = g.nodes[e.from_node].world_pose.inverse() @ g.nodes[e.to_node].world_pose
        ps = particles([0], means=[[1.1, 0.05, 0, 0.2, 0.01, 0.02]])
        world = g.nodes[0].world_pose @ Pose6D.from_vector(ps.means[0])
        out = reassign_nodes(ps, g)
        assert out.nodes[0] == 1
        assert (g.nodes[1].world_pose @ Pose6D.from_vector(out.means[0])).almost_equal(world, atol=1e-9)


class TestFusedPose:
    def test_weighted_mean(self):
        g = chain_graph(2)
        ps = particles([1, 1, 0], means=[[0, 0, 0, 0.1, 0, 0], [1, 0, 0, 0.3, 0, 0], [9, 9, 9, 0, 0, 0]],
                       weights=[0.25, 0.25, 0.5])
        p = fused_pose(ps, 1, g)
        np.testing.assert_allclose(p.translation, [1.5, 0, 0], atol=1e-12)
        assert p.euler[0] == pytest.approx(0.2)


class TestStep:
    def make(self, p=0.5, k=3, n=60, seed=0, **kw):
        g = chain_graph(6)
        cfg = LocalizerConfig(n_particles=n, k=k, tau_eff=1.5, seed=seed, **kw)
        return Localizer(g, cfg, pnp=StubPnp(p, seed))

    def test_no_observations(self):
        loc = self.make()
        out = loc.step(LocalizerFrame(0))
        assert not out.pnp_attempted and out.matching_cost == 0 and out.attempted_nodes == []

    def test_all_fail_tries_k_distinct(self, rng):
        loc = self.make(p=0.0, k=3)
        out = loc.step(LocalizerFrame(0, observations=obs_set(rng)))
        assert len(out.attempted_nodes) == 3 == len(set(out.attempted_nodes))
        assert not out.success and out.matching_cost == 3 * 10 * 12

    def test_first_success_stops(self, rng):
        loc = self.make(p=1.0, k=4)
        out = loc.step(LocalizerFrame(0, observations=obs_set(rng)))
        assert out.attempted_nodes == [out.success_node] and out.success

    def test_all_k_keeps_most_inliers(self, rng):
        loc = self.make(p=1.0, k=4, all_k=True)
        obs = obs_set(rng)
        out = loc.step(LocalizerFrame(0, observations=obs))
        assert len(out.attempted_nodes) == 4
        inl = [loc.pnp.solve(0, n, obs)[0].inlier_count for n in out.attempted_nodes]
        assert out.inliers == max(inl)
        assert out.success_node == out.attempted_nodes[int(np.argmax(inl))]

    def test_gate_blocks(self, rng):
        g = chain_graph(6)
        loc = Localizer(g, LocalizerConfig(n_particles=60, tau_eff=60.0), pnp=StubPnp(1.0))
        # distance reweighting of jittered particles pushes N_eff below N
        out = loc.step(LocalizerFrame(0, deltas=[PdrDelta(0.5, 0, 0)], observations=obs_set(rng)))
        assert out.n_eff <= 60.0 and not out.pnp_attempted

    def test_deterministic(self, rng):
        frames = [LocalizerFrame(i, random_fingerprint(rng), [PdrDelta(0.3, 0.1, 0.05)], obs_set(rng))
                  for i in range(5)]
        a, b = self.make(seed=4), self.make(seed=4)
        for f in frames:
            oa, ob = a.step(f), b.step(f)
            assert oa.attempted_nodes == ob.attempted_nodes
            np.testing.assert_array_equal(oa.pose.translation, ob.pose.translation)
        np.testing.assert_array_equal(a.state.particles.weights, b.state.particles.weights)

    def test_reset(self, rng):
        loc = self.make()
        w0 = loc.state.particles.nodes.copy()
        loc.step(LocalizerFrame(0, deltas=[PdrDelta(1.0, 0, 0)], observations=obs_set(rng)))
        loc.reset()
        np.testing.assert_array_equal(loc.state.particles.nodes, w0)
