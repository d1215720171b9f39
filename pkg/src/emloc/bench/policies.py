"""Candidate-node policies: the filter's own ranking and the three baselines."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from ..errors import ConfigError, UntrainedModelError
from ..graph import LocalizationGraph
from ..localizer import NodeLikelihood, select_candidate_nodes
from ..sidechannel import ChannelConfig, SideChannelFingerprint

VARIANTS = ("EMLOC", "A1", "A2", "A3", "EXHAUSTIVE")
LOG_FLOOR = 1e-300


@dataclass
class CandidatePolicy:
    variant: str
    k: int = 1
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown policy {self.variant!r}; choose from {VARIANTS}")
        if self.k < 1:
            raise ConfigError("policy k must be >= 1")

    @property
    def label(self) -> str:
        tag = self.variant
        if self.params.get("side_channels") is False:
            tag += "-vision"
        return tag


def _top_k(ids: np.ndarray, scores: np.ndarray, k: int) -> list:
    order = np.lexsort((ids, -scores))
    return [int(i) for i in ids[order[:k]]]


def policy_rank_a1(g: LocalizationGraph, k: int, seed) -> list:
    """k distinct nodes drawn uniformly at random."""
    ids = np.array(g.node_ids, dtype=np.int64)
    if k > ids.size:
        raise ConfigError(f"k={k} exceeds the {ids.size} graph nodes")
    rng = np.random.default_rng(seed)
    return [int(i) for i in ids[rng.choice(ids.size, size=k, replace=False)]]


def policy_rank_a2(g: LocalizationGraph, live: Optional[SideChannelFingerprint], k: int,
                   model: Optional[NodeLikelihood] = None, channels: ChannelConfig = ChannelConfig()) -> list:
    """Nodes ranked by the fused side-channel weight of this frame alone."""
    model = NodeLikelihood(g) if model is None else model
    return _top_k(model.node_ids, model(live, channels), k)


class A3Model:
    """Multinomial logistic regression from a fingerprint's per-node log
    likelihoods to the node it was recorded at."""

    def __init__(self, g: LocalizationGraph, channels: ChannelConfig = ChannelConfig(), C: float = 1.0,
                 max_iter: int = 300):
        self.g = g
        self.channels = channels
        self.likelihood = NodeLikelihood(g)
        self.C = C
        self.max_iter = max_iter
        self.clf = None
        self.classes = np.zeros(0, dtype=np.int64)

    def features(self, fps: Sequence[SideChannelFingerprint]) -> np.ndarray:
        return np.array([np.log(np.maximum(self.likelihood(fp, self.channels), LOG_FLOOR)) for fp in fps])

    def fit(self, fps: Sequence[SideChannelFingerprint], labels: Sequence[int]) -> "A3Model":
        labels = np.asarray(labels, dtype=np.int64)
        self.classes = np.unique(labels)
        if self.classes.size == 1:
            self.clf = None
            return self
        X = self.features(fps)
        self.clf = make_pipeline(StandardScaler(), LogisticRegression(C=self.C, max_iter=self.max_iter))
        self.clf.fit(X, labels)
        return self

    @property
    def fitted(self) -> bool:
        return self.classes.size > 0

    def scores(self, live: SideChannelFingerprint) -> np.ndarray:
        """Score per graph node (node_ids order); unseen classes score -inf."""
        ids = self.likelihood.node_ids
        out = np.full(ids.size, -np.inf)
        if self.clf is None:
            out[np.isin(ids, self.classes)] = 0.0
            return out
        p = self.clf.predict_log_proba(self.features([live]))[0]
        cls = self.clf.classes_
        pos = np.searchsorted(ids, cls)
        out[pos] = p
        return out


def policy_rank_a3(g: LocalizationGraph, live: Optional[SideChannelFingerprint], k: int,
                   model: Optional[A3Model]) -> list:
    if model is None or not model.fitted:
        raise UntrainedModelError("A3 needs a model trained on labelled fingerprints")
    if len(g) == 1:
        return list(g.node_ids)
    return _top_k(model.likelihood.node_ids, model.scores(live), k)


def policy_rank_emloc(particles, k: int) -> list:
    return select_candidate_nodes(particles, k)
