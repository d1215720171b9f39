"""Paired benchmark runs: every policy sees the same query frames and the
same per-(frame, node) RANSAC outcomes within a run."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..assembler.assemble import AssemblyConfig, assemble
from ..errors import ConfigError, DataError
from ..graph import LocalizationGraph
from ..localizer import Localizer, LocalizerConfig, NodeLikelihood, NodePnp, frames_from_trace
from ..sidechannel import ChannelConfig
from ..simworld.scenarios import Scenario, make_benchmark_scenario, with_query
from ..vision import RansacConfig
from .metrics import FrameRecord, Metrics, compute_metrics, records_from_outputs
from .policies import (
    A3Model,
    CandidatePolicy,
    policy_rank_a1,
    policy_rank_a2,
    policy_rank_a3,
    policy_rank_emloc,
)

log = logging.getLogger(__name__)

NO_CHANNELS = ChannelConfig(wifi=False, magnetic=False, appearance=False)


def _policies_default() -> list:
    out = [CandidatePolicy(v, k) for k in (1, 5, 10) for v in ("EMLOC", "A1", "A2", "A3")]
    return out + [CandidatePolicy("EXHAUSTIVE", 1)]


@dataclass
class BenchConfig:
    scenario: str = "large-sparse"
    world_seed: int = 0
    runs: int = 20
    first_query_seed: int = 0
    policies: list = field(default_factory=_policies_default)
    n_particles: int = 500
    # resample whenever the weights are not exactly uniform
    resample_threshold: Optional[float] = None
    tau_eff: Optional[float] = None
    # the snake-ordered mapping chain folds back on itself; a wider
    # search keeps reassignment from stalling on a chain neighbour
    reassign_hops: int = 8
    jitter_sigma: tuple = (0.05, 0.05, 0.02)
    burn_in: int = 5
    ratio: float = 0.8
    ransac_iterations: int = 500
    a3_C: float = 1.0
    scenario_params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.policies = [p if isinstance(p, CandidatePolicy) else CandidatePolicy(**p) for p in self.policies]
        self.jitter_sigma = tuple(float(x) for x in self.jitter_sigma)
        if self.runs < 1:
            raise ConfigError("runs must be >= 1")
        if self.burn_in < 0:
            raise ConfigError("burn_in must be >= 0")
        if not self.policies:
            raise ConfigError("at least one policy is required")

    @property
    def query_seeds(self) -> list:
        return list(range(self.first_query_seed, self.first_query_seed + self.runs))

    def localizer_config(self, policy: CandidatePolicy, seed: int, n_nodes: int) -> LocalizerConfig:
        exhaustive = policy.variant == "EXHAUSTIVE"
        channels = NO_CHANNELS if policy.params.get("side_channels") is False else ChannelConfig()
        rs = self.n_particles if self.resample_threshold is None else self.resample_threshold
        return LocalizerConfig(
            n_particles=self.n_particles, k=n_nodes if exhaustive else policy.k, tau_eff=self.tau_eff,
            resample_threshold=rs, reassign_hops=self.reassign_hops,
            jitter_sigma=tuple(self.jitter_sigma), channels=channels, ratio=self.ratio,
            ransac=RansacConfig(iterations=self.ransac_iterations),
            all_k=bool(policy.params.get("all_k", False)), seed=seed,
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["policies"] = [dataclasses.asdict(p) for p in self.policies]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BenchConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown bench config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None


def policy_key(policy: CandidatePolicy) -> str:
    return policy.label if policy.variant == "EXHAUSTIVE" else f"{policy.label}@k{policy.k}"


@dataclass
class RunReport:
    config: dict
    seeds: list
    records: list  # FrameRecord
    metrics: dict  # policy key -> Metrics
    n_nodes: int = 0

    def cdf(self, key: str, which: str = "translation") -> np.ndarray:
        m = self.metrics[key]
        return m.translation_errors if which == "translation" else m.orientation_errors


def train_a3(g: LocalizationGraph, scenario: Scenario, C: float = 1.0) -> A3Model:
    fps, labels = [], []
    for trace, truth in scenario.training:
        for f, node in zip(trace.frames, truth.nodes):
            if f.fingerprint is not None:
                fps.append(f.fingerprint)
                labels.append(node)
    if not fps:
        return A3Model(g, C=C)
    return A3Model(g, C=C).fit(fps, labels)


class MemoLikelihood:
    """NodeLikelihood that remembers its answer per fingerprint object, so
    every policy of a run scores a frame once."""

    def __init__(self, model: NodeLikelihood):
        self.model = model
        self.node_ids = model.node_ids
        self.row = model.row
        self._memo: dict = {}

    def __call__(self, live, channels: ChannelConfig) -> np.ndarray:
        key = (id(live), repr(channels))
        hit = self._memo.get(key)
        if hit is None or hit[0] is not live:
            hit = (live, self.model(live, channels))
            self._memo[key] = hit
        return hit[1]


def _ranker(policy: CandidatePolicy, g: LocalizationGraph, loc_holder: list, run_seed: int,
            a3: Optional[A3Model]):
    v = policy.variant
    if v == "EMLOC":
        return lambda st, frame, k: policy_rank_emloc(st.particles, k)
    if v == "A1":
        return lambda st, frame, k: policy_rank_a1(g, k, [run_seed, frame.index])
    if v == "A2":
        return lambda st, frame, k: policy_rank_a2(g, frame.fingerprint, k, loc_holder[0].model, ChannelConfig())
    if v == "A3":
        return lambda st, frame, k: policy_rank_a3(g, frame.fingerprint, k, a3)
    ids = list(g.node_ids)
    return lambda st, frame, k: ids[:k]


def run_query(g: LocalizationGraph, scenario: Scenario, policies: Sequence[CandidatePolicy], cfg: BenchConfig,
              run: int, a3: Optional[A3Model] = None, shared: Optional[dict] = None) -> list:
    """All policies over one query; returns FrameRecords."""
    frames = frames_from_trace(scenario.query)
    node_rooms = _node_rooms(g, scenario)
    seed = scenario.query_seed
    shared = {} if shared is None else shared
    pnp = NodePnp(g, scenario.intrinsics, cfg.ratio, RansacConfig(iterations=cfg.ransac_iterations), seed,
                  local_points=shared.setdefault("local_points", {}))
    model = MemoLikelihood(shared.setdefault("likelihood", NodeLikelihood(g)))
    if a3 is not None:
        a3.likelihood = model
    out = []
    for policy in policies:
        lcfg = cfg.localizer_config(policy, seed, len(g))
        holder = []
        loc = Localizer(g, lcfg, scenario.intrinsics, _ranker(policy, g, holder, seed, a3), pnp, model)
        holder.append(loc)
        outputs = [loc.step(f) for f in frames]
        out.extend(records_from_outputs(outputs, scenario.truth, policy_key(policy), policy.k, run, node_rooms))
    return out


def _node_rooms(g: LocalizationGraph, scenario: Scenario) -> np.ndarray:
    # graph nodes are the mapping frames in trace order
    rooms = scenario.node_regions
    if len(rooms) != len(g):
        raise DataError(f"graph has {len(g)} nodes but the scenario mapped {len(rooms)} frames")
    return rooms


def run_benchmark(scenario: Scenario, policies: Optional[Sequence[CandidatePolicy]] = None,
                  cfg: Optional[BenchConfig] = None, graph: Optional[LocalizationGraph] = None) -> RunReport:
    """Assembles the scenario map (unless ``graph`` is given) and runs every
    policy over ``cfg.runs`` query walks drawn on that map."""
    cfg = BenchConfig() if cfg is None else cfg
    policies = list(cfg.policies if policies is None else policies)
    if graph is None:
        graph = assemble(scenario.mapping, depth=scenario.world.depth,
                         config=AssemblyConfig(anchor_pose=scenario.anchor_pose))
    a3 = train_a3(graph, scenario, cfg.a3_C) if any(p.variant == "A3" for p in policies) else None
    records: list = []
    shared: dict = {}  # per-graph caches reused across runs
    for run, qs in enumerate(cfg.query_seeds):
        sc = scenario if qs == scenario.query_seed else with_query(scenario, qs)
        log.info("run %d (query seed %d)", run, qs)
        records.extend(run_query(graph, sc, policies, cfg, run, a3, shared))
    metrics = aggregate(records, policies, cfg.burn_in)
    snapshot = {**cfg.to_dict(), "policies": [dataclasses.asdict(p) for p in policies]}
    return RunReport(snapshot, cfg.query_seeds, records, metrics, len(graph))


def aggregate(records: Sequence[FrameRecord], policies: Sequence[CandidatePolicy], burn_in: int) -> dict:
    out = {}
    for p in policies:
        key = policy_key(p)
        out[key] = compute_metrics([r for r in records if r.policy == key], burn_in=burn_in)
    return out


def benchmark_from_config(cfg: BenchConfig, graph: Optional[LocalizationGraph] = None) -> RunReport:
    sc = make_benchmark_scenario(cfg.scenario, cfg.world_seed, cfg.first_query_seed, **cfg.scenario_params)
    return run_benchmark(sc, None, cfg, graph)
