import json

import numpy as np
import pytest
from scipy import stats

from emloc.bench.metrics import FrameRecord, compute_metrics, pose_errors, record_row
from emloc.bench.policies import (
    A3Model,
    CandidatePolicy,
    policy_rank_a1,
    policy_rank_a2,
    policy_rank_a3,
)
from emloc.bench.report import CDF_FILE, FRAME_COLUMNS, FRAMES_FILE, SUMMARY_FILE, emit_report, read_frames, read_table
from emloc.bench.runner import BenchConfig, RunReport, benchmark_from_config, policy_key
from emloc.errors import ConfigError, DataError, UntrainedModelError
from emloc.geometry import Pose6D
from emloc.localizer import NodeLikelihood
from emloc.sidechannel import ChannelConfig

from .conftest import chain_graph, random_fingerprint

SMALL_POLICIES = [CandidatePolicy("EMLOC", 1), CandidatePolicy("A1", 1), CandidatePolicy("A2", 1),
                  CandidatePolicy("A3", 1), CandidatePolicy("EXHAUSTIVE", 1)]


@pytest.fixture(scope="module")
def small_run():
    cfg = BenchConfig(scenario="two-rooms", runs=2, n_particles=100, policies=SMALL_POLICIES)
    return benchmark_from_config(cfg)


def rec(**kw):
    base = dict(policy="P", k=1, run=0, frame=0, attempted=True, success=False, nodes_tried=1,
                matching_cost=10, map_node=0, n_eff=1.0)
    base.update(kw)
    return FrameRecord(**base)


class TestPolicies:
    def test_variants(self):
        with pytest.raises(ConfigError):
            CandidatePolicy("A4")
        with pytest.raises(ConfigError):
            CandidatePolicy("A1", 0)
        assert CandidatePolicy("EMLOC", 1, {"side_channels": False}).label == "EMLOC-vision"

    def test_a1_uniform(self):
        g = chain_graph(6)
        counts = np.bincount([policy_rank_a1(g, 1, s)[0] for s in range(3000)], minlength=6)
        assert stats.chisquare(counts).pvalue > 1e-3

    def test_a1_all_nodes(self):
        g = chain_graph(6)
        assert sorted(policy_rank_a1(g, 6, 1)) == list(range(6))
        with pytest.raises(ConfigError):
            policy_rank_a1(g, 7, 1)

    def test_a1_seeded(self):
        g = chain_graph(10)
        assert policy_rank_a1(g, 3, [4, 2]) == policy_rank_a1(g, 3, [4, 2])

    def test_a2_oracle(self, rng):
        g = chain_graph(8, rng=rng)
        live = random_fingerprint(rng)
        lik = NodeLikelihood(g)(live, ChannelConfig())
        ref = sorted(range(8), key=lambda n: (-lik[n], n))[:3]
        assert policy_rank_a2(g, live, 3) == ref

    def test_a2_ties_by_id(self):
        g = chain_graph(5)
        assert policy_rank_a2(g, None, 3) == [0, 1, 2]

    def test_a3_untrained(self):
        g = chain_graph(3)
        with pytest.raises(UntrainedModelError):
            policy_rank_a3(g, None, 1, None)
        with pytest.raises(UntrainedModelError):
            policy_rank_a3(g, None, 1, A3Model(g))

    def test_a3_single_node(self, rng):
        g = chain_graph(1)
        m = A3Model(g).fit([random_fingerprint(rng)], [0])
        assert policy_rank_a3(g, random_fingerprint(rng), 1, m) == [0]

    def test_a3_learns_training_points(self, rng):
        g = chain_graph(6, rng=rng)
        fps, labels = [], []
        for e in g.edges:
            for _ in range(5):
                fps.append(e.fingerprint)
                labels.append(e.to_node)
        m = A3Model(g, C=10.0).fit(fps, labels)
        top = [policy_rank_a3(g, e.fingerprint, 1, m)[0] for e in g.edges]
        assert np.mean([t == e.to_node for t, e in zip(top, g.edges)]) >= 0.8
        s = m.scores(g.edges[0].fingerprint)
        assert s[0] == -np.inf  # node 0 never appeared as a label


class TestMetrics:
    def test_efficiency(self):
        recs = [rec(frame=i, success=i < 7) for i in range(10)]
        m = compute_metrics(recs)
        assert (m.attempts, m.successes, m.efficiency, m.matching_cost) == (10, 7, 0.7, 100)
        assert m.cost_per_attempt == 10.0

    def test_no_attempts(self):
        m = compute_metrics([rec(attempted=False, matching_cost=0)])
        assert m.efficiency == 0.0 and m.cost_per_attempt == 0.0

    def test_room_accuracy_burn_in(self):
        recs = [rec(frame=i, map_room=1, true_room=1 if i >= 2 else 2) for i in range(6)]
        assert compute_metrics(recs, burn_in=2).room_accuracy == 1.0
        assert compute_metrics(recs).room_accuracy == pytest.approx(4 / 6)

    def test_pose_errors(self):
        t, r = pose_errors(Pose6D.from_euler([3, 4, 0], 0.5), Pose6D.identity())
        assert t == pytest.approx(5.0) and r == pytest.approx(0.5)

    def test_errors_sorted(self):
        recs = [rec(frame=i, success=True, t_err=float(x), r_err=0.1) for i, x in enumerate([3, 1, 2])]
        np.testing.assert_array_equal(compute_metrics(recs).translation_errors, [1, 2, 3])

    def test_truth_length_checked(self):
        from emloc.assembler import GroundTruth

        with pytest.raises(DataError):
            compute_metrics([rec(frame=4)], truth=GroundTruth([Pose6D.identity()] * 2))


class TestBenchConfig:
    def test_round_trip(self):
        cfg = BenchConfig(scenario="two-rooms", runs=3)
        back = BenchConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert back.to_dict() == cfg.to_dict()

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            BenchConfig.from_dict({"nope": 1})

    def test_exhaustive_k_is_graph_size(self):
        lc = BenchConfig().localizer_config(CandidatePolicy("EXHAUSTIVE", 1), 0, 42)
        assert lc.k == 42 and not lc.all_k

    def test_vision_only_disables_channels(self):
        lc = BenchConfig().localizer_config(CandidatePolicy("EMLOC", 1, {"side_channels": False}), 0, 5)
        assert not (lc.channels.wifi or lc.channels.magnetic or lc.channels.appearance)

    def test_policy_key(self):
        assert policy_key(CandidatePolicy("A2", 5)) == "A2@k5"
        assert policy_key(CandidatePolicy("EXHAUSTIVE", 1)) == "EXHAUSTIVE"


class TestRun:
    def test_every_policy_every_frame(self, small_run):
        n_frames = {(r.run, r.frame) for r in small_run.records}
        for key in small_run.metrics:
            assert {(r.run, r.frame) for r in small_run.records if r.policy == key} == n_frames
        assert all(r.nodes_tried <= r.k or r.policy == "EXHAUSTIVE" for r in small_run.records)

    def test_exhaustive_dominates_where_both_tried(self, small_run):
        by = {(r.policy, r.run, r.frame): r for r in small_run.records}
        both = 0
        for (p, run, f), r in by.items():
            if p != "EMLOC@k1" or not r.attempted:
                continue
            ex = by[("EXHAUSTIVE", run, f)]
            if ex.attempted:
                both += 1
                assert ex.success or not r.success
        assert both > 0

    def test_exhaustive_costs_most(self, small_run):
        ex = small_run.metrics["EXHAUSTIVE"]
        for key, m in small_run.metrics.items():
            assert m.cost_per_attempt <= ex.cost_per_attempt + 1e-9

    def test_report_round_trip(self, small_run, tmp_path):
        paths = emit_report(small_run, tmp_path)
        back = read_frames(paths[FRAMES_FILE])
        # json text compares NaN errors as equal
        assert [json.dumps(record_row(r)) for r in back] == [json.dumps(record_row(r)) for r in small_run.records]
        summary = json.loads(paths[SUMMARY_FILE].read_text())
        assert set(summary["policies"]) == set(small_run.metrics)
        for key, m in small_run.metrics.items():
            assert summary["policies"][key]["successes"] == m.successes

    def test_cdf_monotone(self, small_run, tmp_path):
        rows = read_table(emit_report(small_run, tmp_path)[CDF_FILE])
        for key in small_run.metrics:
            for metric in ("translation", "orientation"):
                sub = [r for r in rows if r["policy"] == key and r["metric"] == metric]
                v = [r["value"] for r in sub]
                f = [r["fraction"] for r in sub]
                assert v == sorted(v) and f == sorted(f)
                if sub:
                    assert f[-1] == 1.0

    def test_empty_report_has_headers(self, tmp_path):
        paths = emit_report(RunReport({}, [], [], {}, 0), tmp_path)
        assert paths[FRAMES_FILE].read_text() == ",".join(FRAME_COLUMNS) + "\n"
        assert read_frames(paths[FRAMES_FILE]) == []

    def test_bad_header(self, tmp_path):
        (tmp_path / "f.csv").write_text("a,b\n1,2\n")
        with pytest.raises(DataError):
            read_frames(tmp_path / "f.csv")
