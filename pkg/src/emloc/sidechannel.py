"""Side-channel fingerprints and the likelihoods that compare them.

Three cheap modalities are supported: WiFi RSSI distributions per access
point, geomagnetic magnitude sequences, and bag-of-visual-words histograms.
Every likelihood maps into (0, 1] and they are fused by a plain product, so
only weight ratios are meaningful downstream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import BinEdgeMismatchError, DimensionMismatchError, EmptySequenceError

RSSI_MIN_DBM = -100.0
RSSI_MAX_DBM = -30.0
RSSI_BIN_WIDTH = 2.0
RSSI_BIN_EDGES = np.arange(RSSI_MIN_DBM, RSSI_MAX_DBM + RSSI_BIN_WIDTH / 2, RSSI_BIN_WIDTH)
RSSI_SMOOTHING = 1e-4
WIFI_FLOOR = 1e-3
APPEARANCE_FLOOR = 1e-3
DTW_BAND_FRACTION = 0.2


@dataclass(frozen=True, eq=False)
class RssiDistribution:
    """Smoothed histogram of RSSI readings from one access point."""

    probs: np.ndarray
    bin_edges: np.ndarray = field(default_factory=lambda: RSSI_BIN_EDGES.copy())
    sample_count: int = 0

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        e = np.asarray(self.bin_edges, dtype=float)
        if p.ndim != 1 or e.shape != (p.size + 1,):
            raise BinEdgeMismatchError("bin_edges must have len(probs) + 1 entries")
        if np.any(p <= 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("RSSI distribution must be strictly positive and sum to 1")
        object.__setattr__(self, "probs", p)
        object.__setattr__(self, "bin_edges", e)

    @classmethod
    def from_samples(
        cls,
        samples: Sequence[float],
        bin_edges: np.ndarray = RSSI_BIN_EDGES,
        eps: float = RSSI_SMOOTHING,
    ) -> "RssiDistribution":
        edges = np.asarray(bin_edges, dtype=float)
        s = np.clip(np.asarray(samples, dtype=float), edges[0], edges[-1])
        counts, _ = np.histogram(s, bins=edges)
        n = int(counts.sum())
        freq = counts / n if n else np.full(counts.size, 1.0 / counts.size)
        p = freq + eps
        return cls(p / p.sum(), edges.copy(), n)

    def same_bins(self, other: "RssiDistribution") -> bool:
        return self.bin_edges.shape == other.bin_edges.shape and np.array_equal(
            self.bin_edges, other.bin_edges
        )

    def to_dict(self) -> dict:
        return {"probs": self.probs.tolist(), "bin_edges": self.bin_edges.tolist(), "n": self.sample_count}

    @classmethod
    def from_dict(cls, d: dict) -> "RssiDistribution":
        return cls(np.array(d["probs"]), np.array(d["bin_edges"]), int(d["n"]))


@dataclass(frozen=True, eq=False)
class MagneticSequence:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(-1)
        if v.size == 0:
            raise EmptySequenceError("magnetic sequence must be non-empty")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError("magnetic magnitudes must be finite and non-negative")
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True, eq=False)
class BowHistogram:
    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 1 or np.any(c < 0) or not np.all(np.equal(np.mod(c, 1), 0)):
            raise ValueError("BoW counts must be a 1-D array of non-negative integers")
        object.__setattr__(self, "counts", c.astype(np.int64))

    def __len__(self) -> int:
        return self.counts.size


@dataclass(frozen=True, eq=False)
class SideChannelFingerprint:
    wifi: dict = field(default_factory=dict)
    magnetic: Optional[MagneticSequence] = None
    appearance: Optional[BowHistogram] = None

    def to_dict(self) -> dict:
        return {
            "wifi": {ap: d.to_dict() for ap, d in sorted(self.wifi.items())},
            "magnetic": None if self.magnetic is None else self.magnetic.values.tolist(),
            "appearance": None if self.appearance is None else self.appearance.counts.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SideChannelFingerprint":
        return cls(
            {ap: RssiDistribution.from_dict(v) for ap, v in d["wifi"].items()},
            None if d["magnetic"] is None else MagneticSequence(np.array(d["magnetic"], dtype=float)),
            None if d["appearance"] is None else BowHistogram(np.array(d["appearance"], dtype=np.int64)),
        )

    def with_appearance(self, hist: Optional[BowHistogram]) -> "SideChannelFingerprint":
        return SideChannelFingerprint(self.wifi, self.magnetic, hist)


@dataclass
class ChannelConfig:
    """Which channels participate and their floors / band parameters."""

    wifi: bool = True
    magnetic: bool = True
    appearance: bool = True
    wifi_floor: float = WIFI_FLOOR
    appearance_floor: float = APPEARANCE_FLOOR
    dtw_band_fraction: Optional[float] = DTW_BAND_FRACTION
    # common multiplier on every channel likelihood; ratios are all that matter
    scale: float = 1.0


# ---------------------------------------------------------------- WiFi


def kl_divergence(p: RssiDistribution, q: RssiDistribution) -> float:
    """D_KL(p || q) over shared bins."""
    if not p.same_bins(q):
        raise BinEdgeMismatchError("RSSI distributions use different bin edges")
    return float(max(0.0, np.sum(p.probs * np.log(p.probs / q.probs))))


def wifi_likelihood(
    query: Mapping[str, RssiDistribution],
    stored: Mapping[str, RssiDistribution],
    floor: float = WIFI_FLOOR,
) -> float:
    """exp(-mean KL) over access points present in both fingerprints."""
    shared = sorted(set(query) & set(stored))
    if not shared:
        return 1.0 if not query and not stored else floor
    d = np.mean([kl_divergence(query[ap], stored[ap]) for ap in shared])
    return float(math.exp(-d))


# ---------------------------------------------------------------- magnetic


def _band_width(n: int, m: int, band) -> int:
    if band is None:
        return max(n, m)
    if isinstance(band, float):
        band = int(math.ceil(band * max(n, m)))
    return max(int(band), abs(n - m))


def dtw(a, b, band=None) -> tuple[float, int]:
    """Classic DTW with |a_i - b_j| cost.

    Returns ``(cost, path_length)`` of the optimal boundary-matched monotone
    warping path. ``band`` is a Sakoe-Chiba half width, either an absolute
    sample count or a fraction of the longer sequence; it is widened to
    ``|len(a) - len(b)|`` so that the end corner stays reachable.
    Ties prefer the diagonal, then the step that advances ``a``.
    """
    a = a.values if isinstance(a, MagneticSequence) else np.asarray(a, dtype=float).reshape(-1)
    b = b.values if isinstance(b, MagneticSequence) else np.asarray(b, dtype=float).reshape(-1)
    n, m = a.size, b.size
    if n == 0 or m == 0:
        raise EmptySequenceError("DTW needs non-empty sequences")
    w = _band_width(n, m, band)
    inf = math.inf
    al, bl = a.tolist(), b.tolist()
    prev_c = [inf] * (m + 1)
    prev_l = [0] * (m + 1)
    prev_c[0] = 0.0
    for i in range(1, n + 1):
        cur_c = [inf] * (m + 1)
        cur_l = [0] * (m + 1)
        ai = al[i - 1]
        lo, hi = max(1, i - w), min(m, i + w)
        for j in range(lo, hi + 1):
            best, blen = prev_c[j - 1], prev_l[j - 1]
            if prev_c[j] < best:
                best, blen = prev_c[j], prev_l[j]
            if cur_c[j - 1] < best:
                best, blen = cur_c[j - 1], cur_l[j - 1]
            cur_c[j] = abs(ai - bl[j - 1]) + best
            cur_l[j] = blen + 1
        prev_c, prev_l = cur_c, cur_l
    return float(prev_c[m]), int(prev_l[m])


def dtw_distance(a, b, band=None) -> float:
    return dtw(a, b, band)[0]


def normalized_dtw(a, b, band=DTW_BAND_FRACTION) -> float:
    cost, length = dtw(a, b, band)
    return cost / length


def magnetic_likelihood(a, b, band=DTW_BAND_FRACTION) -> float:
    return float(math.exp(-normalized_dtw(a, b, band)))


def dtw_batch(A: np.ndarray, B: np.ndarray, band=None) -> tuple[np.ndarray, np.ndarray]:
    """DTW over a batch of equal-shape sequence pairs, same semantics as :func:`dtw`.

    ``A`` is (P, n), ``B`` is (P, m). Returns (costs, path lengths), both (P,).
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    P, n = A.shape
    m = B.shape[1]
    if n == 0 or m == 0:
        raise EmptySequenceError("DTW needs non-empty sequences")
    w = _band_width(n, m, band)
    C = np.full((n + 1, m + 1, P), np.inf)
    L = np.zeros((n + 1, m + 1, P), dtype=np.int64)
    C[0, 0] = 0.0
    for i in range(1, n + 1):
        ai = A[:, i - 1]
        for j in range(max(1, i - w), min(m, i + w) + 1):
            best = C[i - 1, j - 1]
            blen = L[i - 1, j - 1]
            up = C[i - 1, j]
            take = up < best
            best = np.where(take, up, best)
            blen = np.where(take, L[i - 1, j], blen)
            left = C[i, j - 1]
            take = left < best
            best = np.where(take, left, best)
            blen = np.where(take, L[i, j - 1], blen)
            C[i, j] = np.abs(ai - B[:, j - 1]) + best
            L[i, j] = blen + 1
    return C[n, m].copy(), L[n, m].copy()


# ---------------------------------------------------------------- appearance


def quantize(descriptors, vocabulary: np.ndarray) -> BowHistogram:
    """Nearest-centroid word counts (L2, lowest index wins ties)."""
    V = np.asarray(vocabulary, dtype=float)
    if V.ndim != 2 or V.shape[0] == 0:
        raise ValueError("vocabulary must be a non-empty (k, d) array")
    D = np.asarray(descriptors, dtype=float)
    if D.size == 0:
        return BowHistogram(np.zeros(V.shape[0], dtype=np.int64))
    D = D.reshape(-1, D.shape[-1])
    if D.shape[1] != V.shape[1]:
        raise DimensionMismatchError(f"descriptor dim {D.shape[1]} != vocabulary dim {V.shape[1]}")
    d2 = np.sum((D[:, None, :] - V[None, :, :]) ** 2, axis=2)
    words = np.argmin(d2, axis=1)
    return BowHistogram(np.bincount(words, minlength=V.shape[0]))


def idf_weights(histograms: Sequence[BowHistogram], n_words: int) -> np.ndarray:
    """Smoothed inverse document frequency, ln((1+N)/(1+df)) + 1."""
    if not histograms:
        return np.ones(n_words)
    H = np.stack([h.counts for h in histograms])
    df = np.count_nonzero(H, axis=0)
    return np.log((1.0 + len(histograms)) / (1.0 + df)) + 1.0


def appearance_likelihood(
    query: BowHistogram,
    stored: BowHistogram,
    idf: Optional[np.ndarray] = None,
    floor: float = APPEARANCE_FLOOR,
) -> float:
    """TF-IDF cosine similarity clamped to [floor, 1].

    Stand-in for a generative place-recognition model; it only needs to
    return a normalized similarity per stored location.
    """
    if len(query) != len(stored):
        raise DimensionMismatchError("BoW histograms use different vocabularies")
    w = np.ones(len(query)) if idf is None else np.asarray(idf, dtype=float)
    if w.size != len(query):
        raise DimensionMismatchError("idf length does not match vocabulary size")
    a = query.counts * w
    b = stored.counts * w
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return floor
    return float(min(1.0, max(floor, float(a @ b) / (na * nb))))


# ---------------------------------------------------------------- fusion


def combined_weight(wifi_l: float, mag_l: float, img_l: Optional[float] = None) -> float:
    return wifi_l * mag_l * (1.0 if img_l is None else img_l)


def channel_likelihoods(
    live: SideChannelFingerprint,
    stored: SideChannelFingerprint,
    cfg: ChannelConfig = ChannelConfig(),
    idf: Optional[np.ndarray] = None,
) -> tuple[float, float, float]:
    """Per-channel likelihoods of ``live`` given ``stored``; disabled or absent channels give 1."""
    wl = ml = il = 1.0
    if cfg.wifi:
        wl = wifi_likelihood(live.wifi, stored.wifi, cfg.wifi_floor)
    if cfg.magnetic and live.magnetic is not None and stored.magnetic is not None:
        ml = magnetic_likelihood(live.magnetic, stored.magnetic, cfg.dtw_band_fraction)
    if cfg.appearance and live.appearance is not None and stored.appearance is not None:
        il = appearance_likelihood(live.appearance, stored.appearance, idf, cfg.appearance_floor)
    s = cfg.scale
    return wl * s, ml * s, il * s


def fingerprint_likelihood(
    live: SideChannelFingerprint,
    stored: SideChannelFingerprint,
    cfg: ChannelConfig = ChannelConfig(),
    idf: Optional[np.ndarray] = None,
) -> float:
    return combined_weight(*channel_likelihoods(live, stored, cfg, idf))


class FingerprintIndex:
    """Vectorized scoring of one live fingerprint against many stored ones.

    Produces the same per-channel values as :func:`channel_likelihoods`
    (up to floating-point summation order) but amortizes the work across
    all stored fingerprints, which is what the filter needs every frame.
    """

    def __init__(self, stored: Sequence[SideChannelFingerprint], idf: Optional[np.ndarray] = None):
        self.stored = list(stored)
        self.size = len(self.stored)
        aps = sorted({ap for fp in self.stored for ap in fp.wifi})
        self.ap_index = {ap: i for i, ap in enumerate(aps)}
        self._edges = None
        nb = RSSI_BIN_EDGES.size - 1
        for fp in self.stored:
            for d in fp.wifi.values():
                self._edges = d.bin_edges
                nb = d.probs.size
                break
            if self._edges is not None:
                break
        self.log_probs = np.zeros((self.size, len(aps), nb))
        self.present = np.zeros((self.size, len(aps)), dtype=bool)
        for e, fp in enumerate(self.stored):
            for ap, d in fp.wifi.items():
                if not np.array_equal(d.bin_edges, self._edges):
                    raise BinEdgeMismatchError("stored fingerprints mix bin layouts")
                k = self.ap_index[ap]
                self.log_probs[e, k] = np.log(d.probs)
                self.present[e, k] = True
        self.has_wifi = np.array([bool(fp.wifi) for fp in self.stored], dtype=bool)
        # magnetic sequences grouped by length for the batched DTW
        self.mag_groups: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        by_len: dict[int, list[int]] = {}
        for e, fp in enumerate(self.stored):
            if fp.magnetic is not None:
                by_len.setdefault(len(fp.magnetic), []).append(e)
        for n, idx in by_len.items():
            self.mag_groups[n] = (
                np.array(idx),
                np.stack([self.stored[e].magnetic.values for e in idx]),
            )
        self.idf = idf
        self.app_present = np.array([fp.appearance is not None for fp in self.stored], dtype=bool)
        if self.app_present.any():
            nw = next(len(fp.appearance) for fp in self.stored if fp.appearance is not None)
            w = np.ones(nw) if idf is None else np.asarray(idf, dtype=float)
            H = np.zeros((self.size, nw))
            for e, fp in enumerate(self.stored):
                if fp.appearance is not None:
                    H[e] = fp.appearance.counts * w
            self.app_w = w
            self.app_H = H
            self.app_norm = np.linalg.norm(H, axis=1)

    def score(self, live: SideChannelFingerprint, cfg: ChannelConfig = ChannelConfig()) -> np.ndarray:
        """Return (size, 3) per-channel likelihoods for every stored fingerprint."""
        out = np.ones((self.size, 3))
        if self.size == 0:
            return out
        if cfg.wifi:
            out[:, 0] = self._wifi(live, cfg.wifi_floor)
        if cfg.magnetic and live.magnetic is not None:
            q = live.magnetic.values
            for n, (idx, S) in self.mag_groups.items():
                Q = np.broadcast_to(q, (idx.size, q.size))
                band = _band_width(q.size, n, cfg.dtw_band_fraction)
                c, length = dtw_batch(Q, S, band)
                out[idx, 1] = np.exp(-c / length)
        if cfg.appearance and live.appearance is not None and self.app_present.any():
            if len(live.appearance) != self.app_H.shape[1]:
                raise DimensionMismatchError("BoW histograms use different vocabularies")
            a = live.appearance.counts * self.app_w
            na = np.linalg.norm(a)
            sims = np.full(self.size, cfg.appearance_floor)
            ok = self.app_present & (self.app_norm > 0)
            if na > 0:
                sims[ok] = np.clip((self.app_H[ok] @ a) / (self.app_norm[ok] * na), cfg.appearance_floor, 1.0)
            out[self.app_present, 2] = sims[self.app_present]
        return out * cfg.scale

    def _wifi(self, live: SideChannelFingerprint, floor: float) -> np.ndarray:
        res = np.full(self.size, floor)
        q_idx, q_logp, q_p = [], [], []
        for ap, d in live.wifi.items():
            k = self.ap_index.get(ap)
            if k is None:
                continue
            if self._edges is not None and not np.array_equal(d.bin_edges, self._edges):
                raise BinEdgeMismatchError("live RSSI distribution uses different bin edges")
            q_idx.append(k)
            q_p.append(d.probs)
            q_logp.append(np.log(d.probs))
        if not live.wifi:
            res[~self.has_wifi] = 1.0
        if not q_idx:
            return res
        q_idx = np.array(q_idx)
        qp = np.stack(q_p)
        ql = np.stack(q_logp)
        # KL(query_ap || stored_ap) for every stored fingerprint and shared AP
        kl = np.sum(qp[None] * (ql[None] - self.log_probs[:, q_idx, :]), axis=2)
        kl = np.maximum(kl, 0.0)
        mask = self.present[:, q_idx]
        cnt = mask.sum(axis=1)
        tot = np.where(mask, kl, 0.0).sum(axis=1)
        ok = cnt > 0
        res[ok] = np.exp(-tot[ok] / cnt[ok])
        return res
