"""Robust aggregation rules. Every rule maps an (n, d) gradient matrix to one vector."""
from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .detector import DetectionReport, DetectorConfig, detect
from .errors import InvalidInput
from .linalg import as_gradient_matrix


class AggKind(str, enum.Enum):
    SENTINEL = "sentinel"
    MEAN = "mean"
    COORD_MEDIAN = "coord_median"
    TRIMMED_MEAN = "trimmed_mean"
    KRUM = "krum"
    MULTIKRUM = "multikrum"
    GEOMETRIC_MEDIAN = "geometric_median"
    BULYAN = "bulyan"


@dataclass
class AggregateResult:
    gradient: np.ndarray
    honest_set: tuple[int, ...]
    report: DetectionReport | None = None
    converged: bool = True
    fallback: bool = False
    selected: tuple[int, ...] | None = None


@dataclass(frozen=True)
class AggregatorSpec:
    """Rule name plus its parameters.

    ``f`` is the Byzantine count assumed by Krum/Bulyan; when None it is
    derived from ``f_frac`` and the row count at call time.
    """

    kind: AggKind = AggKind.MEAN
    beta: float = 0.1
    f: int | None = None
    f_frac: float = 0.2
    tol: float = 1e-9
    max_iter: int = 1000
    detector: DetectorConfig = field(default_factory=DetectorConfig)

    def __post_init__(self):
        object.__setattr__(self, "kind", AggKind(self.kind))
        if not 0.0 <= self.beta < 0.5:
            raise InvalidInput(f"trim fraction must be in [0, 0.5), got {self.beta}")
        if self.f is not None and self.f < 0:
            raise InvalidInput("f must be >= 0")

    def f_for(self, n: int) -> int:
        return self.f if self.f is not None else int(math.floor(self.f_frac * n))


def _all(n):
    return tuple(range(n))


def aggregate_mean(G) -> AggregateResult:
    G = as_gradient_matrix(G, min_rows=1)
    return AggregateResult(G.mean(axis=0), _all(len(G)))


def aggregate_coord_median(G) -> AggregateResult:
    G = as_gradient_matrix(G, min_rows=1)
    return AggregateResult(np.median(G, axis=0), _all(len(G)))


def aggregate_trimmed_mean(G, beta: float) -> AggregateResult:
    G = as_gradient_matrix(G, min_rows=1)
    n = len(G)
    b = int(math.floor(beta * n))
    if beta < 0 or 2 * b >= n:
        raise InvalidInput(f"trimming {b} per side leaves nothing of {n} rows")
    S = np.sort(G, axis=0)
    return AggregateResult(S[b:n - b].mean(axis=0), _all(n))


def _sq_dists(G: np.ndarray) -> np.ndarray:
    sq = np.sum(G * G, axis=1)
    D = sq[:, None] + sq[None, :] - 2.0 * (G @ G.T)
    D = 0.5 * (D + D.T)
    np.fill_diagonal(D, 0.0)
    return np.maximum(D, 0.0)


def krum_scores(G: np.ndarray, f: int, min_neighbors: int = 0) -> np.ndarray:
    """Sum of squared distances to the n - f - 2 nearest other rows."""
    n = len(G)
    m = min(max(n - f - 2, min_neighbors), n - 1)
    D = _sq_dists(G)
    out = np.empty(n)
    for i in range(n):
        others = np.delete(D[i], i)
        out[i] = np.sum(np.partition(others, m - 1)[:m]) if m > 0 else 0.0
    return out


def aggregate_krum(G, f: int) -> AggregateResult:
    G = as_gradient_matrix(G, min_rows=1)
    n = len(G)
    if n < 2 * f + 3:
        raise InvalidInput(f"Krum needs n >= 2f+3, got n={n}, f={f}")
    s = krum_scores(G, f)
    i = int(np.argmin(s))  # first minimum is the lowest index
    return AggregateResult(G[i].copy(), (i,), selected=(i,))


def aggregate_multikrum(G, f: int, m: int | None = None) -> AggregateResult:
    """Mean of the m best Krum-scored rows (m = n - f by default)."""
    G = as_gradient_matrix(G, min_rows=1)
    n = len(G)
    if n < 2 * f + 3:
        raise InvalidInput(f"Multi-Krum needs n >= 2f+3, got n={n}, f={f}")
    m = n - f if m is None else m
    s = krum_scores(G, f)
    sel = np.lexsort((np.arange(n), s))[:m]
    sel = tuple(sorted(int(i) for i in sel))
    return AggregateResult(G[list(sel)].mean(axis=0), sel, selected=sel)


def geometric_median_objective(G: np.ndarray, z: np.ndarray) -> float:
    return float(np.sum(np.linalg.norm(G - z, axis=1)))


def aggregate_geometric_median(G, tol: float = 1e-9, max_iter: int = 1000,
                               eps: float = 1e-10) -> AggregateResult:
    """Weiszfeld iteration with distances floored at eps."""
    G = as_gradient_matrix(G, min_rows=1)
    z = G.mean(axis=0)
    best, best_obj = z, geometric_median_objective(G, z)
    converged = False
    for _ in range(max_iter):
        w = 1.0 / np.maximum(np.linalg.norm(G - z, axis=1), eps)
        z_new = (w[:, None] * G).sum(axis=0) / w.sum()
        step = float(np.linalg.norm(z_new - z))
        z = z_new
        obj = geometric_median_objective(G, z)
        if obj < best_obj:
            best, best_obj = z, obj
        if step < tol:
            converged = True
            break
    if G.shape[1] <= NEWTON_MAX_DIM:
        best, best_obj = _newton_polish(G, best, best_obj, eps)
    return AggregateResult(best.copy(), _all(len(G)), converged=converged)


NEWTON_MAX_DIM = 512


def _newton_polish(G: np.ndarray, z: np.ndarray, obj: float, eps: float, steps: int = 20):
    # Weiszfeld crawls when the median sits close to a data point; Newton on the
    # smooth objective finishes the job. Only objective-decreasing steps are taken.
    d = G.shape[1]
    for _ in range(steps):
        diff = z - G
        r = np.linalg.norm(diff, axis=1)
        if r.min() < eps:
            break
        u = diff / r[:, None]
        grad = u.sum(axis=0)
        H = np.eye(d) * np.sum(1.0 / r) - (u / r[:, None]).T @ u
        try:
            p = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            break
        t = 1.0
        for _ in range(30):
            cand = z - t * p
            c_obj = geometric_median_objective(G, cand)
            if c_obj < obj:
                break
            t *= 0.5
        else:
            break
        z, obj = cand, c_obj
    return z, obj


def bulyan_select(G: np.ndarray, f: int) -> list[int]:
    """Indices picked by iterated Krum, in pick order (n - 2f of them)."""
    remaining = list(range(len(G)))
    picked = []
    for _ in range(len(G) - 2 * f):
        # late picks have fewer than f + 3 rows left; keep at least one neighbor
        s = krum_scores(G[remaining], f, min_neighbors=1)
        best = float(s.min())
        tied = np.flatnonzero(s <= best + 1e-12 * max(best, np.finfo(float).tiny))
        # with one neighbor the closest pair always ties; break by row value,
        # not position, so the selection is permutation-invariant
        rows = G[[remaining[t] for t in tied]]
        j = int(tied[np.lexsort(rows.T[::-1])[0]])
        picked.append(remaining.pop(j))
    return picked


def aggregate_bulyan(G, f: int) -> AggregateResult:
    G = as_gradient_matrix(G, min_rows=1)
    n = len(G)
    if n < 4 * f + 3:
        raise InvalidInput(f"Bulyan needs n >= 4f+3, got n={n}, f={f}")
    sel = bulyan_select(G, f)
    S = np.sort(G[sel], axis=0)
    g = S[f:len(sel) - f].mean(axis=0)
    return AggregateResult(g, tuple(sorted(sel)), selected=tuple(sel))


def aggregate_sentinel(G, cfg: DetectorConfig | None = None) -> AggregateResult:
    G = as_gradient_matrix(G, min_rows=1)
    rep = detect(G, cfg or DetectorConfig())
    if not rep.honest:
        warnings.warn("every client flagged; using the coordinate median", RuntimeWarning)
        return AggregateResult(np.median(G, axis=0), (), report=rep, fallback=True)
    return AggregateResult(G[list(rep.honest)].mean(axis=0), rep.honest, report=rep)


def aggregate(G, spec: AggregatorSpec) -> AggregateResult:
    G = as_gradient_matrix(G, min_rows=1)
    n = len(G)
    k = spec.kind
    if k is AggKind.SENTINEL:
        return aggregate_sentinel(G, spec.detector)
    if k is AggKind.MEAN:
        return aggregate_mean(G)
    if k is AggKind.COORD_MEDIAN:
        return aggregate_coord_median(G)
    if k is AggKind.TRIMMED_MEAN:
        return aggregate_trimmed_mean(G, spec.beta)
    if k is AggKind.KRUM:
        return aggregate_krum(G, spec.f_for(n))
    if k is AggKind.MULTIKRUM:
        return aggregate_multikrum(G, spec.f_for(n))
    if k is AggKind.GEOMETRIC_MEDIAN:
        return aggregate_geometric_median(G, spec.tol, spec.max_iter)
    if k is AggKind.BULYAN:
        return aggregate_bulyan(G, spec.f_for(n))
    raise InvalidInput(f"unknown aggregator {k!r}")


BASELINES: tuple[AggKind, ...] = (AggKind.MEAN, AggKind.COORD_MEDIAN, AggKind.TRIMMED_MEAN,
                                  AggKind.KRUM, AggKind.MULTIKRUM,
                                  AggKind.GEOMETRIC_MEDIAN, AggKind.BULYAN)


def spec_from(kind: str, **params: Any) -> AggregatorSpec:
    return AggregatorSpec(kind=AggKind(kind), **params)
