"""Cross-trace co-location links from side-channel similarity."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from ..sidechannel import ChannelConfig, FingerprintIndex

MODALITIES = ("wifi", "magnetic", "appearance")


@dataclass(frozen=True)
class CoLocationLink:
    trace_a: int
    frame_a: int
    trace_b: int
    frame_b: int
    score: float
    modality: str


def _taus(tau: Union[float, dict]) -> np.ndarray:
    if isinstance(tau, dict):
        return np.array([float(tau.get(m, 0.85)) for m in MODALITIES])
    return np.full(3, float(tau))


def likelihood_tensor(fps_a: Sequence, fps_b: Sequence, channels: ChannelConfig = ChannelConfig(),
                      idf: Optional[np.ndarray] = None) -> np.ndarray:
    """(3, |a|, |b|) per-modality likelihoods; 0 where a modality is
    unavailable (disabled, or missing on either side) so it never links."""
    L = np.zeros((3, len(fps_a), len(fps_b)))
    if not fps_a or not fps_b:
        return L
    index = FingerprintIndex(fps_b, idf)
    enabled = np.array([channels.wifi, channels.magnetic, channels.appearance])
    has_b = np.array([[bool(f.wifi), f.magnetic is not None, f.appearance is not None] for f in fps_b])
    unit = ChannelConfig(channels.wifi, channels.magnetic, channels.appearance,
                         channels.wifi_floor, channels.appearance_floor, channels.dtw_band_fraction, 1.0)
    for i, fa in enumerate(fps_a):
        s = index.score(fa, unit).T
        has_a = np.array([bool(fa.wifi), fa.magnetic is not None, fa.appearance is not None])
        ok = enabled[:, None] & has_a[:, None] & has_b.T
        L[:, i, :] = np.where(ok, s, 0.0)
    return L


def mutual_best(L: np.ndarray, tau: float) -> list:
    """(i, j, score) pairs that are each other's best match and exceed tau."""
    if L.size == 0:
        return []
    row_best = np.argmax(L, axis=1)
    col_best = np.argmax(L, axis=0)
    out = []
    for i, j in enumerate(row_best):
        if col_best[j] == i and L[i, j] > tau:
            out.append((i, int(j), float(L[i, j])))
    return out


def link_trace_pair(L: np.ndarray, taus: np.ndarray) -> list:
    """Union of per-modality mutual best matches, made one-to-one greedily by score."""
    cand = {}
    for m in range(3):
        for i, j, s in mutual_best(L[m], taus[m]):
            if (i, j) not in cand or s > cand[(i, j)][0]:
                cand[(i, j)] = (s, m)
    order = sorted(cand.items(), key=lambda kv: (-kv[1][0], kv[0][0], kv[0][1]))
    used_a, used_b, out = set(), set(), []
    for (i, j), (s, m) in order:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        out.append((i, j, s, MODALITIES[m]))
    return sorted(out)


def detect_colocations(
    traces: Sequence,
    tau: Union[float, dict] = 0.85,
    channels: ChannelConfig = ChannelConfig(),
    idf: Optional[np.ndarray] = None,
) -> list:
    """Links between frames of different traces.

    ``traces[k]`` is a DataTrace or a list of per-frame fingerprints. A pair
    becomes a link when, for at least one modality, each frame is the
    other's most similar frame in the other trace and the likelihood
    exceeds that modality's threshold.
    """
    taus = _taus(tau)
    fingerprints = [[f.fingerprint for f in t.frames] if hasattr(t, "frames") else list(t) for t in traces]
    links = []
    for a in range(len(fingerprints)):
        for b in range(a + 1, len(fingerprints)):
            L = likelihood_tensor(list(fingerprints[a]), list(fingerprints[b]), channels, idf)
            for i, j, s, mod in link_trace_pair(L, taus):
                links.append(CoLocationLink(a, i, b, j, s, mod))
    return links
