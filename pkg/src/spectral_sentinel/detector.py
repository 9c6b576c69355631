"""Spectral screening of a gradient matrix and Byzantine client identification.

Pipeline per round: center rows by the coordinate-wise median, take the
client-side Gram spectrum ``Xc Xc^T / d`` (or a Frequent Directions sketch of
it), fit an MP law, run a KS test and look for eigenvalues beyond the bulk
edge. When either test fires, clients are scored by how much of their
centered gradient lives in the anomalous directions.
"""
from __future__ import annotations

import enum
import json
import math
import os
from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import chi2

from .errors import DegenerateDistribution, InsufficientClients, InvalidInput
from .linalg import (TOL, FDSketch, Spectrum, as_gradient_matrix, eigh_desc, gram,
                     snap_zeros, _eigh)
from .mp import (KSResult, MPParams, estimate_mp_params, ks_fallback_threshold,
                 ks_statistic, tail_anomalies)

CALIBRATION_DRAWS = 500
CALIBRATION_QUANTILE = 0.95
SAFETY_FACTOR = 1.1
CALIBRATION_SEED = 0x5EED
_CACHE_VERSION = 5


class Regime(str, enum.Enum):
    DETECTABLE = "Detectable"
    TRANSITION = "Transition"
    UNDETECTABLE = "Undetectable"


@dataclass(frozen=True)
class DetectorConfig:
    """Detector knobs. ``tau_ks=None`` means calibrate on honest draws."""

    sketch_size: int | None = None
    tau_ks: float | None = None
    tau_tail: float = 0.5
    f_max: float = 0.49
    # tail anomalies tolerated before the screen fires
    anomaly_budget: int = 0
    layerwise: bool = False
    detection_period: int = 1
    window: int = 50
    loo_candidates: int = 64
    zero_rtol: float = TOL.zero_rtol
    layer_sketch: Mapping[str, int] | None = None
    max_refine: int = 5

    def __post_init__(self):
        if not 0.0 <= self.f_max < 0.5:
            raise InvalidInput(f"f_max must be in [0, 0.5), got {self.f_max}")
        if self.detection_period < 1:
            raise InvalidInput("detection_period must be >= 1")
        if self.window < 1:
            raise InvalidInput("window must be >= 1")
        if self.sketch_size is not None and self.sketch_size < 2:
            raise InvalidInput("sketch_size must be >= 2 or None")
        if self.tau_ks is not None and not self.tau_ks > 0:
            raise InvalidInput("tau_ks must be positive")
        if self.tau_tail < 0:
            raise InvalidInput("tau_tail must be >= 0")
        if self.anomaly_budget < 0:
            raise InvalidInput("anomaly_budget must be >= 0")
        if self.loo_candidates < 1:
            raise InvalidInput("loo_candidates must be >= 1")

    def cap(self, n: int) -> int:
        return int(math.floor(self.f_max * n))


@dataclass
class DetectionReport:
    ks: KSResult
    anomalies: tuple[int, ...]
    flagged: tuple[int, ...]
    honest: tuple[int, ...]
    regime: Regime
    sigma2_f2: float
    params: MPParams | None = None
    triggered: bool = False
    degenerate: bool = False
    excess_zeros: int = 0
    per_layer: list["DetectionReport"] | None = None
    method: str = "none"

    @property
    def n(self) -> int:
        return len(self.flagged) + len(self.honest)


@dataclass
class LayeredGradients:
    layers: list[np.ndarray]
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise InvalidInput("need at least one layer")
        self.layers = [as_gradient_matrix(L, min_rows=1) for L in self.layers]
        n = self.layers[0].shape[0]
        if any(L.shape[0] != n for L in self.layers):
            raise InvalidInput("all layers must share the same client count")
        if not self.names:
            self.names = [f"layer{i}" for i in range(len(self.layers))]
        if len(self.names) != len(self.layers):
            raise InvalidInput("one name per layer")

    @property
    def n(self) -> int:
        return self.layers[0].shape[0]

    @property
    def dims(self) -> list[int]:
        return [L.shape[1] for L in self.layers]

    def flat(self) -> np.ndarray:
        return np.concatenate(self.layers, axis=1)

    @classmethod
    def split(cls, G, dims: Sequence[int], names: Sequence[str] | None = None):
        G = as_gradient_matrix(G, min_rows=1)
        if sum(dims) != G.shape[1]:
            raise InvalidInput(f"layer dims sum to {sum(dims)}, matrix has {G.shape[1]}")
        cuts = np.cumsum(dims)[:-1]
        return cls(list(np.split(G, cuts, axis=1)), list(names or []))


# -- phase regime

def phase_regime(sigma: float, f: float) -> tuple[Regime, float]:
    if sigma < 0:
        raise InvalidInput("sigma must be >= 0")
    if not 0.0 <= f < 0.5:
        raise InvalidInput("f must be in [0, 0.5)")
    s = sigma * sigma * f * f
    if s < 0.20:
        return Regime.DETECTABLE, s
    if s < 0.25:
        return Regime.TRANSITION, s
    return Regime.UNDETECTABLE, s


# -- spectrum of a centered matrix

@dataclass
class _Screen:
    """Spectral state shared between the test and the identification step."""

    X: np.ndarray               # median-centered rows
    eigs: np.ndarray            # descending, zeros snapped (full or top-m)
    n: int
    d: int
    params: MPParams
    ks: KSResult
    anomalies: tuple[int, ...]
    excess_zeros: int
    sketch: FDSketch | None = None


def center(G: np.ndarray) -> np.ndarray:
    return G - np.median(G, axis=0)


def _fit_full(w: np.ndarray, n: int, d: int, zero_rtol: float):
    """Fit on the Gram spectrum with excess (collinearity) zeros removed."""
    w = snap_zeros(w, zero_rtol)
    z = int(np.count_nonzero(w == 0.0))
    z_ex = max(0, z - max(0, n - d))
    keep = w[: n - z_ex] if z_ex else w
    n_eff = n - z_ex
    if n_eff < 2:
        raise DegenerateDistribution("spectrum has fewer than two informative eigenvalues")
    fit = estimate_mp_params(keep, n_eff, d)
    return w, MPParams(n / d, fit.sigma2), z_ex


def _row_norm_sigma2(X: np.ndarray) -> float:
    """sigma^2 from the median squared row norm (chi^2_d calibrated).

    Used with a lossy sketch, whose bulk eigenvalues are shrunk and cannot
    be fitted directly. One streaming pass, robust to < n/2 outlying rows.
    """
    d = X.shape[1]
    s2 = float(np.median(np.sum(X * X, axis=1))) / float(chi2.median(d))
    if not s2 > 0:
        raise DegenerateDistribution("median row norm is zero")
    return s2


def _screen(G: np.ndarray, cfg: DetectorConfig, tau: float | None) -> _Screen:
    n, d = G.shape
    X = center(G)
    k = cfg.sketch_size
    sk = None
    if k is not None:
        sk = FDSketch(k, d)
        for row in X:
            sk.update(row)
    if sk is None or sk.lossless:
        B = X if sk is None else sk.rows()
        w = _eigh(gram(B, d), vectors=False)[::-1].copy()
        w, params, z_ex = _fit_full(w, n, d, cfg.zero_rtol)
        t = tau if tau is not None else calibrate_tau_ks(n, d)
        ks = ks_statistic(w, params, t)
    else:
        B = sk.rows()
        w = _eigh(gram(B, d), vectors=False)[::-1]
        w = snap_zeros(w, cfg.zero_rtol)
        w = w[w > 0]
        if len(w) == 0:
            raise DegenerateDistribution("sketch is empty")
        params = MPParams(n / d, _row_norm_sigma2(X))
        z_ex = 0
        t = tau if tau is not None else calibrate_tau_ks(n, d, k)
        ks = ks_statistic(w, params, t, n_total=n)
    anomalies = tail_anomalies(w, params, cfg.tau_tail)
    return _Screen(X, w, n, d, params, ks, anomalies, z_ex, sk)


# -- identification

def _otsu_top(values: np.ndarray, cap: int) -> int:
    """Size of the upper class in an Otsu split of descending ``values``, at most cap."""
    m = len(values)
    if cap <= 0 or m < 2:
        return 0
    c = np.cumsum(values)
    best_t, best = 0, -1.0
    for t in range(1, min(cap, m - 1) + 1):
        w1, w0 = t / m, (m - t) / m
        mu1 = c[t - 1] / t
        mu0 = (c[-1] - c[t - 1]) / (m - t)
        between = w0 * w1 * (mu1 - mu0) ** 2
        if between > best * (1 + 1e-12):
            best_t, best = t, between
    return best_t


def _robust_center(P: np.ndarray, steps: int = 20) -> np.ndarray:
    n = len(P)
    h = min(n, n // 2 + 1)
    c = np.median(P, axis=0)
    prev = None
    for _ in range(steps):
        dist = np.sum((P - c) ** 2, axis=1)
        keep = np.argsort(dist, kind="stable")[:h]
        key = tuple(sorted(keep.tolist()))
        if key == prev:
            break
        prev = key
        c = P[keep].mean(axis=0)
    return c


def projection_scores(X: np.ndarray, P: np.ndarray, c: np.ndarray) -> np.ndarray:
    norms = np.sum(X * X, axis=1)
    eps = 1e-12 * max(float(np.mean(norms)), np.finfo(float).tiny)
    return np.sum((P - c) ** 2, axis=1) / (norms + eps)


def _split_scores(scores: np.ndarray, cap: int) -> tuple[int, ...]:
    order = np.lexsort((np.arange(len(scores)), -scores))
    t = _otsu_top(np.sqrt(scores[order]), cap)
    if t == 0:
        return ()
    floor = 3.0 * float(np.median(scores))
    chosen = [int(i) for i in order[:t] if scores[i] > floor]
    return tuple(sorted(chosen))


def _identify_projection(X: np.ndarray, P: np.ndarray, cap: int, max_refine: int):
    if cap <= 0 or P.shape[1] == 0:
        return (), np.zeros(len(X))
    c = _robust_center(P)
    flagged: tuple[int, ...] = ()
    scores = projection_scores(X, P, c)
    for _ in range(max_refine):
        new = _split_scores(scores, cap)
        if new == flagged:
            break
        flagged = new
        mask = np.ones(len(X), bool)
        mask[list(flagged)] = False
        if mask.any():
            c = P[mask].mean(axis=0)
        scores = projection_scores(X, P, c)
    return flagged, scores


def _identify_dependent(X: np.ndarray, excess: int, cap: int,
                        zero_rtol: float) -> tuple[int, ...]:
    """Clients in linearly dependent groups (duplicates, collinear rows).

    Only meaningful when n <= d: every null vector of the Gram is then
    excess, and its support is the dependent group. Groups larger than the
    cap are presumed honest and left alone.
    """
    n, d = X.shape
    if excess <= 0 or n > d or cap <= 0:
        return ()
    w, A = eigh_desc(gram(X, d))
    null = snap_zeros(w, zero_rtol) == 0.0
    lev = np.sum(A[:, null] ** 2, axis=1)
    members = tuple(int(i) for i in np.flatnonzero(lev > 0.25))
    return members if len(members) <= cap else ()


def _ks_of_gram(K: np.ndarray, d: int, zero_rtol: float) -> float:
    n = K.shape[0]
    w = _eigh(K, vectors=False)[::-1].copy()
    try:
        w, params, _ = _fit_full(w, n, d, zero_rtol)
    except DegenerateDistribution:
        return 1.0
    return ks_statistic(w, params, 1.0).statistic


def _identify_loo(X: np.ndarray, cap: int, tau: float, candidates: int,
                  zero_rtol: float) -> tuple[int, ...]:
    """Leave-one-out KS improvement, then remove in that order until accepted."""
    n, d = X.shape
    if cap <= 0:
        return ()
    K = gram(X, d)
    D0 = _ks_of_gram(K, d, zero_rtol)
    if n <= candidates:
        pool = np.arange(n)
    else:
        # pre-screen by how far each squared norm sits from the median
        sq = np.sum(X * X, axis=1)
        med = np.median(sq)
        mad = np.median(np.abs(sq - med)) + np.finfo(float).tiny
        pool = np.sort(np.lexsort((np.arange(n), -np.abs(sq - med) / mad))[:candidates])
    gains = np.empty(len(pool))
    for j, i in enumerate(pool):
        keep = np.delete(np.arange(n), i)
        gains[j] = D0 - _ks_of_gram(K[np.ix_(keep, keep)], d, zero_rtol)
    order = pool[np.lexsort((pool, -gains))]
    order = [int(i) for i, g in zip(order, np.sort(gains)[::-1]) if g > 0]
    if not order:
        return ()
    best_t, best_D = 0, D0
    for t in range(1, min(cap, len(order)) + 1):
        keep = np.setdiff1d(np.arange(n), order[:t])
        D = _ks_of_gram(K[np.ix_(keep, keep)], d, zero_rtol)
        if D < best_D:
            best_t, best_D = t, D
        # threshold for the reduced population, scaled like 1/sqrt(m)
        if D <= tau * math.sqrt(n / (n - t)):
            best_t = t
            break
    return tuple(sorted(order[:best_t]))


def _anomalous_projections(X: np.ndarray, anomalies: Sequence[int], sk: FDSketch | None):
    """Coordinates of centered rows along the anomalous eigendirections."""
    n, d = X.shape
    idx = list(anomalies)
    if sk is None or sk.lossless:
        w, A = eigh_desc(gram(X, d))
        w = np.maximum(w[idx], 0.0)
        return A[:, idx] * np.sqrt(d * w)
    # right singular vectors of the sketch approximate the top directions
    _, _, Vt = np.linalg.svd(sk.rows(), full_matrices=False)
    return X @ Vt[idx].T


def identify_byzantine(G, spec: Spectrum | np.ndarray | None, anomalies: Sequence[int],
                       cap: int, tau_ks: float | None = None, loo_candidates: int = 64,
                       max_refine: int = 5) -> tuple[int, ...]:
    """Flag clients whose centered gradient concentrates on anomalous directions.

    With no anomalies the leave-one-out fallback ranks clients by how much
    their removal lowers the KS statistic. ``spec`` is accepted for
    interface symmetry; directions are recomputed from G.
    """
    G = as_gradient_matrix(G)
    if cap <= 0:
        return ()
    X = center(G)
    n, d = X.shape
    if anomalies:
        P = _anomalous_projections(X, anomalies, None)
        return _identify_projection(X, P, cap, max_refine)[0]
    tau = tau_ks if tau_ks is not None else calibrate_tau_ks(n, d)
    return _identify_loo(X, cap, tau, loo_candidates, TOL.zero_rtol)


def identification_scores(G, anomalies: Sequence[int]) -> np.ndarray:
    """Per-client share of the centered gradient in the anomalous directions.

    Measured from the robust honest center of the projections, so camouflaged
    rows score near zero and rows living in the spike score near one.
    """
    G = as_gradient_matrix(G)
    X = center(G)
    if not anomalies:
        return np.zeros(len(X))
    P = _anomalous_projections(X, anomalies, None)
    return projection_scores(X, P, _robust_center(P))


# -- detection

def _degenerate_report(n: int, tau: float) -> DetectionReport:
    ks = KSResult(0.0, 0, tau, False)
    return DetectionReport(ks, (), (), tuple(range(n)), Regime.DETECTABLE, 0.0,
                           degenerate=True)


def detect(G, cfg: DetectorConfig | None = None) -> DetectionReport:
    cfg = cfg or DetectorConfig()
    G = as_gradient_matrix(G, min_rows=1)
    n, d = G.shape
    if n < 4:
        raise InsufficientClients(f"detection needs n >= 4 clients, got {n}")
    X0 = center(G)
    if not np.any(X0):
        return _degenerate_report(n, cfg.tau_ks or ks_fallback_threshold(n))
    try:
        s = _screen(G, cfg, cfg.tau_ks)
    except DegenerateDistribution:
        return _degenerate_report(n, cfg.tau_ks or ks_fallback_threshold(n))
    cap = cfg.cap(n)
    triggered = s.ks.reject or len(s.anomalies) > cfg.anomaly_budget
    flagged: tuple[int, ...] = ()
    method = "none"
    if triggered and cap > 0:
        dup = _identify_dependent(s.X, s.excess_zeros, cap, cfg.zero_rtol)
        if dup:
            flagged, method = dup, "dependent"
        if s.anomalies and len(flagged) < cap:
            P = _anomalous_projections(s.X, s.anomalies, s.sketch)
            proj = _identify_projection(s.X, P, cap, cfg.max_refine)[0]
            extra = [i for i in proj if i not in set(flagged)]
            if extra:
                flagged = tuple(sorted(set(flagged) | set(extra[: cap - len(flagged)])))
                method = "projection" if not dup else "dependent+projection"
        if not flagged and s.ks.reject:
            flagged = _identify_loo(s.X, cap, s.ks.threshold, cfg.loo_candidates,
                                    cfg.zero_rtol)
            method = "loo"
    fset = set(flagged)
    honest = tuple(i for i in range(n) if i not in fset)
    f_est = len(flagged) / n if flagged else cfg.f_max
    regime, s2f2 = phase_regime(math.sqrt(s.params.sigma2), f_est)
    return DetectionReport(s.ks, s.anomalies, tuple(flagged), honest, regime, s2f2,
                           params=s.params, triggered=triggered,
                           excess_zeros=s.excess_zeros, method=method)


def detect_layerwise(L: LayeredGradients, cfg: DetectorConfig | None = None) -> DetectionReport:
    """Run detect on each layer; the flagged set is the union over layers."""
    cfg = cfg or DetectorConfig()
    if not isinstance(L, LayeredGradients):
        raise InvalidInput("expected LayeredGradients")
    n = L.n
    reports = []
    for name, layer in zip(L.names, L.layers):
        k = cfg.sketch_size
        if cfg.layer_sketch and name in cfg.layer_sketch:
            k = cfg.layer_sketch[name]
        reports.append(detect(layer, _with(cfg, sketch_size=k)))
    flagged = tuple(sorted(set().union(*(r.flagged for r in reports))))
    fset = set(flagged)
    honest = tuple(i for i in range(n) if i not in fset)
    worst = max(reports, key=lambda r: r.ks.statistic / max(r.ks.threshold, 1e-300))
    top = max(reports, key=lambda r: r.sigma2_f2)
    return DetectionReport(worst.ks, (), flagged, honest, top.regime, top.sigma2_f2,
                           params=None, triggered=any(r.triggered for r in reports),
                           degenerate=all(r.degenerate for r in reports),
                           per_layer=reports, method="layerwise")


def _with(cfg: DetectorConfig, **kw) -> DetectorConfig:
    from dataclasses import replace
    return replace(cfg, **kw)


# -- threshold calibration

def _cache_path() -> Path | None:
    root = os.environ.get("SPECTRAL_SENTINEL_CACHE")
    if root == "":
        return None
    base = Path(root) if root else Path.home() / ".cache" / "spectral_sentinel"
    return base / "tau_ks.json"


def _disk_get(key: str):
    p = _cache_path()
    if p is None or not p.exists():
        return None
    try:
        return json.loads(p.read_text()).get(key)
    except (OSError, ValueError):
        return None


def _disk_put(key: str, value: float):
    p = _cache_path()
    if p is None:
        return
    try:
        p.parent.mkdir(parents=True, exist_ok=True)
        data = json.loads(p.read_text()) if p.exists() else {}
        data[key] = value
        tmp = p.with_suffix(".tmp")
        tmp.write_text(json.dumps(data, sort_keys=True))
        tmp.replace(p)
    except (OSError, ValueError):
        pass


def honest_ks_statistics(n: int, d: int, k: int | None = None, draws: int = CALIBRATION_DRAWS,
                         seed: int = CALIBRATION_SEED) -> np.ndarray:
    """KS statistics of the screen on i.i.d. N(0, 1) matrices."""
    rng = np.random.default_rng([seed, n, d, k or 0])
    cfg = DetectorConfig(sketch_size=k, tau_ks=1.0)
    out = np.empty(draws)
    for i in range(draws):
        out[i] = _screen(rng.standard_normal((n, d)), cfg, 1.0).ks.statistic
    return out


@lru_cache(maxsize=256)
def calibrate_tau_ks(n: int, d: int, k: int | None = None, draws: int = CALIBRATION_DRAWS,
                     quantile: float = CALIBRATION_QUANTILE, safety: float = SAFETY_FACTOR,
                     seed: int = CALIBRATION_SEED) -> float:
    """Safety-inflated honest quantile of the KS statistic for shape (n, d, k).

    Sketch sizes with k >= n are lossless and share the unsketched value.
    Results are memoized in process and in a small JSON file on disk.
    """
    if k is not None and k >= n:
        k = None
    if draws < 10:
        return ks_fallback_threshold(n)
    key = f"v{_CACHE_VERSION}:{n}:{d}:{k}:{draws}:{quantile}:{safety}:{seed}"
    hit = _disk_get(key)
    if hit is not None:
        return float(hit)
    D = honest_ks_statistics(n, d, k, draws, seed)
    tau = float(safety * np.quantile(D, quantile))
    _disk_put(key, tau)
    return tau


def update_thresholds(history: Sequence[KSResult], window: int,
                      fallback: float | None = None, min_history: int = 10) -> float:
    """Sliding-window tau: inflated 0.95 quantile of recent accepted statistics."""
    if not history:
        raise InvalidInput("history must be nonempty")
    accepted = [h.statistic for h in history if not h.reject][-window:]
    if len(accepted) < min_history:
        if fallback is not None:
            return float(fallback)
        return ks_fallback_threshold(max(h.n_eigs for h in history))
    return float(SAFETY_FACTOR * np.quantile(accepted, CALIBRATION_QUANTILE))


class ThresholdTracker:
    """Online tau_KS for one training session (single writer)."""

    def __init__(self, fallback: float, window: int = 50, min_history: int = 10):
        self.fallback = float(fallback)
        self.window = int(window)
        self.min_history = min_history
        self.history: deque[KSResult] = deque(maxlen=4 * self.window)

    @property
    def tau(self) -> float:
        if not self.history:
            return self.fallback
        return update_thresholds(list(self.history), self.window, self.fallback,
                                 self.min_history)

    def observe(self, ks: KSResult) -> float:
        self.history.append(ks)
        return self.tau


def would_trigger(G, cfg: DetectorConfig | None = None) -> bool:
    """True iff detect() would run identification on G (KS reject or excess anomalies)."""
    cfg = cfg or DetectorConfig()
    G = as_gradient_matrix(G, min_rows=1)
    if len(G) < 4:
        raise InsufficientClients(f"detection needs n >= 4 clients, got {len(G)}")
    if not np.any(center(G)):
        return False
    try:
        s = _screen(G, cfg, cfg.tau_ks)
    except DegenerateDistribution:
        return False
    return bool(s.ks.reject or len(s.anomalies) > cfg.anomaly_budget)
