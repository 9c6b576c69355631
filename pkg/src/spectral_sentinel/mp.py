"""Marchenko-Pastur law: density, CDF, parameter fit, KS test and tail anomalies.

Convention: ``MPParams(gamma, sigma2)`` is the law with edges
``sigma2 * (1 +- sqrt(gamma))**2`` and density

    rho(x) = sqrt((x+ - x)(x - x-)) / (2 pi sigma2 x gamma)

which integrates to ``min(1, 1/gamma)``. For ``gamma > 1`` the remaining
``1 - 1/gamma`` sits as a point mass at zero. This is the eigenvalue law of
the n x n client Gram matrix ``X X^T / d`` for an n x d matrix of i.i.d.
entries with variance sigma2, with ``gamma = n / d``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.interpolate import CubicHermiteSpline

from .errors import DegenerateDistribution, InvalidInput, NumericalFailure
from .linalg import Spectrum

CDF_ATOL = 1e-8
TABLE_POINTS = 1024


@dataclass(frozen=True)
class MPParams:
    gamma: float
    sigma2: float

    def __post_init__(self):
        if not (self.gamma > 0 and math.isfinite(self.gamma)):
            raise InvalidInput(f"gamma must be positive and finite, got {self.gamma}")
        if not (self.sigma2 >= 0 and math.isfinite(self.sigma2)):
            raise InvalidInput(f"sigma2 must be >= 0 and finite, got {self.sigma2}")

    @property
    def lambda_minus(self) -> float:
        return self.sigma2 * (1.0 - math.sqrt(self.gamma)) ** 2

    @property
    def lambda_plus(self) -> float:
        return self.sigma2 * (1.0 + math.sqrt(self.gamma)) ** 2

    @property
    def zero_mass(self) -> float:
        return max(0.0, 1.0 - 1.0 / self.gamma)

    def cdf(self, x) -> np.ndarray:
        """Vectorized CDF through the cached interpolant (KS inner loops)."""
        if self.sigma2 <= 0:
            raise DegenerateDistribution("sigma2 = 0")
        return _table(self.gamma).cdf(np.asarray(x, dtype=float) / self.sigma2)

    def cdf_left(self, x) -> np.ndarray:
        """Left limit F(x-); differs from cdf only at the point mass."""
        x = np.asarray(x, dtype=float)
        F = self.cdf(x)
        return np.where(x == 0.0, 0.0, F)

    def ppf(self, q) -> np.ndarray:
        return self.sigma2 * _table(self.gamma).ppf(np.asarray(q, dtype=float))


@dataclass(frozen=True)
class KSResult:
    statistic: float
    n_eigs: int
    threshold: float
    reject: bool


def mp_support(params: MPParams) -> tuple[float, float]:
    return params.lambda_minus, params.lambda_plus


def mp_density(lam, params: MPParams):
    if params.sigma2 <= 0:
        raise DegenerateDistribution("MP density undefined for sigma2 = 0")
    lm, lp = mp_support(params)
    x = np.asarray(lam, dtype=float)
    inside = (x > lm) & (x < lp) & (x > 0)
    xs = np.where(inside, x, 1.0)
    val = np.sqrt(np.maximum((lp - xs) * (xs - lm), 0.0)) / (
        2.0 * math.pi * params.sigma2 * xs * params.gamma)
    out = np.where(inside, val, 0.0)
    return float(out) if out.ndim == 0 else out


# -- quadrature in the angle variable x(t) = a + (b - a)(1 - cos t)/2, which
#    removes the square-root endpoint singularities of the density.

def _angle_integrand(gamma: float):
    a = (1.0 - math.sqrt(gamma)) ** 2
    b = (1.0 + math.sqrt(gamma)) ** 2
    h = (b - a) / 2.0
    if a == 0.0:
        # gamma == 1: the 1/x pole cancels against (1 - cos t)
        return lambda t: h * h * (1.0 + math.cos(t)) / (2.0 * math.pi * gamma * h)

    def f(t):
        # 1 - cos t = 2 sin^2(t/2) avoids cancellation for small t
        s2 = 2.0 * math.sin(0.5 * t) ** 2
        c2 = 2.0 * math.cos(0.5 * t) ** 2
        return h * h * s2 * c2 / (2.0 * math.pi * gamma * (a + h * s2))
    return f


def adaptive_simpson(f, a: float, b: float, atol: float = CDF_ATOL, max_depth: int = 48,
                     min_depth: int = 4) -> float:
    """Adaptive Simpson quadrature; raises NumericalFailure past max_depth.

    The first ``min_depth`` levels always split, which guards against the
    false convergence a single coarse Simpson panel can report.
    """
    fa, fb, fm = f(a), f(b), f(0.5 * (a + b))
    whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb)

    def rec(a, b, fa, fm, fb, whole, tol, depth):
        m = 0.5 * (a + b)
        lm, rm = 0.5 * (a + m), 0.5 * (m + b)
        flm, frm = f(lm), f(rm)
        left = (m - a) / 6.0 * (fa + 4.0 * flm + fm)
        right = (b - m) / 6.0 * (fm + 4.0 * frm + fb)
        delta = left + right - whole
        # absolute tol halves per level; floor it at rounding noise of the panel
        floor = 64.0 * np.finfo(float).eps * (abs(left) + abs(right))
        if depth >= min_depth and abs(delta) <= max(15.0 * tol, floor):
            return left + right + delta / 15.0
        if depth >= max_depth:
            raise NumericalFailure(f"adaptive Simpson did not converge on [{a}, {b}]",
                                   iterations=depth)
        return (rec(a, m, fa, flm, fm, left, tol / 2.0, depth + 1)
                + rec(m, b, fm, frm, fb, right, tol / 2.0, depth + 1))

    return rec(a, b, fa, fm, fb, whole, atol, 0)


def _to_angle(x, gamma):
    a = (1.0 - math.sqrt(gamma)) ** 2
    b = (1.0 + math.sqrt(gamma)) ** 2
    u = np.clip(1.0 - 2.0 * (np.asarray(x, dtype=float) - a) / (b - a), -1.0, 1.0)
    return np.arccos(u)


def mp_cdf(lam: float, params: MPParams, atol: float = CDF_ATOL) -> float:
    """F(lam) by direct adaptive quadrature (full mixture when gamma > 1)."""
    if params.sigma2 <= 0:
        raise DegenerateDistribution("MP CDF undefined for sigma2 = 0")
    x = float(lam) / params.sigma2
    g = params.gamma
    a = (1.0 - math.sqrt(g)) ** 2
    b = (1.0 + math.sqrt(g)) ** 2
    if x < 0:
        return 0.0
    base = params.zero_mass
    if x <= a:
        return base
    if x >= b:
        return 1.0
    theta = float(_to_angle(x, g))
    val = base + adaptive_simpson(_angle_integrand(g), 0.0, theta, atol)
    return min(max(val, base), 1.0)


class _StdTable:
    """Cached monotone interpolant of the standardized (sigma2 = 1) CDF."""

    def __init__(self, gamma: float, points: int = TABLE_POINTS):
        self.gamma = gamma
        self.a = (1.0 - math.sqrt(gamma)) ** 2
        self.b = (1.0 + math.sqrt(gamma)) ** 2
        self.base = max(0.0, 1.0 - 1.0 / gamma)
        mass = min(1.0, 1.0 / gamma)
        f = _angle_integrand(gamma)
        theta = np.linspace(0.0, math.pi, points + 1)
        pieces = [adaptive_simpson(f, t0, t1, CDF_ATOL / points)
                  for t0, t1 in zip(theta[:-1], theta[1:])]
        F = np.concatenate([[0.0], np.cumsum(pieces)])
        if abs(F[-1] - mass) > 1e-6:
            raise NumericalFailure(f"MP table mass {F[-1]} != {mass}")
        scale = mass / F[-1]
        F *= scale
        self.theta = theta
        self.F = self.base + F
        self.F[-1] = 1.0
        # exact slopes dF/dt are known, so the Hermite cubic is 4th-order
        # accurate and stays monotone (nonnegative slopes, increasing data).
        slopes = np.array([f(t) for t in theta])
        self._interp = CubicHermiteSpline(theta, self.F, slopes * scale)

    def cdf(self, x: np.ndarray) -> np.ndarray:
        out = self._interp(_to_angle(x, self.gamma))
        out = np.where(x <= self.a, np.where(x >= 0, self.base, 0.0), out)
        out = np.where(x >= self.b, 1.0, out)
        return out

    def ppf(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        t = np.interp(q, self.F, self.theta)
        # Newton on the Hermite interpolant, kept inside the table cell
        i = np.clip(np.searchsorted(self.F, q) - 1, 0, len(self.theta) - 2)
        lo, hi = self.theta[i], self.theta[i + 1]
        dF = self._interp.derivative()
        for _ in range(4):
            g = dF(t)
            step = np.where(g > 0, (self._interp(t) - q) / np.where(g > 0, g, 1.0), 0.0)
            t = np.clip(t - step, lo, hi)
        x = self.a + (self.b - self.a) * (1.0 - np.cos(t)) / 2.0
        return np.where(q <= self.base, 0.0, x)


@lru_cache(maxsize=512)
def _table(gamma: float) -> _StdTable:
    return _StdTable(float(gamma))


def _sorted_desc(spec) -> np.ndarray:
    e = spec.eigenvalues if isinstance(spec, Spectrum) else np.asarray(spec, dtype=float)
    return np.sort(np.asarray(e, dtype=float))[::-1]


def _trimmed_fit(e: np.ndarray, gamma: float, f_top: float, f_bottom: float) -> float:
    m = len(e)
    lo = int(math.ceil(m * f_top))
    hi = m - int(math.ceil(m * f_bottom))
    idx = np.arange(lo, hi) if hi > lo else np.arange(m)
    q = 1.0 - (idx + 0.5) / m
    ref = _table(gamma).ppf(q)
    return float(np.mean(e[idx]) / np.mean(ref))


def estimate_mp_params(spec, n: int, d: int, f_top: float = 0.49,
                       f_bottom: float = 0.05) -> MPParams:
    """Fit (gamma, sigma2) to a spectrum; gamma = n/d is taken from the shapes.

    sigma2 is a trimmed mean of the eigenvalues (top ceil(m*f_top) and bottom
    ceil(m*f_bottom) dropped) divided by the same trimmed mean of the
    MP(gamma, 1) quantiles at those ranks. Degree-1 homogeneous in the spectrum.
    """
    if n < 1 or d < 1:
        raise InvalidInput("n and d must be positive")
    e = _sorted_desc(spec)
    if len(e) == 0:
        raise InvalidInput("empty spectrum")
    if not np.any(e > 0):
        raise DegenerateDistribution("all-zero spectrum")
    gamma = n / d
    if gamma > 1.0:
        # continuous part of MP(g, s) is MP(1/g, g*s)
        keep = max(1, len(e) - int(round(len(e) * (1.0 - 1.0 / gamma))))
        s = _trimmed_fit(e[:keep], 1.0 / gamma, f_top, f_bottom) / gamma
    else:
        s = _trimmed_fit(e, gamma, f_top, f_bottom)
    if not s > 0:
        raise DegenerateDistribution("fitted sigma2 is zero")
    return MPParams(gamma, s)


def ks_fallback_threshold(m: int) -> float:
    return 1.36 / math.sqrt(max(m, 1))


def ks_statistic(spec, params: MPParams, tau_ks: float, n_total: int | None = None) -> KSResult:
    """sup |F_emp - F_MP| over the empirical jump points, both one-sided sups.

    With ``n_total`` larger than the number of eigenvalues given, the values
    are taken as the top part of an n_total-point spectrum and the sup is
    restricted to those jump points.
    """
    e = np.sort(_sorted_desc(spec))
    m = len(e)
    if m == 0:
        raise InvalidInput("empty spectrum")
    total = m if n_total is None else int(n_total)
    if total < m:
        raise InvalidInput("n_total smaller than the spectrum length")
    u, c = np.unique(e, return_counts=True)
    after = (total - m + np.cumsum(c)) / total
    before = after - c / total
    F = params.cdf(u)
    Fl = params.cdf_left(u)
    D = max(float(np.max(after - F)), float(np.max(Fl - before)), 0.0)
    D = min(D, 1.0)
    return KSResult(D, m, float(tau_ks), bool(D > tau_ks))


def tail_anomalies(spec, params: MPParams, tau_tail: float) -> tuple[int, ...]:
    """Indices (into the descending spectrum) above lambda+ + tau_tail * sigma2."""
    e = _sorted_desc(spec)
    cut = params.lambda_plus + tau_tail * params.sigma2
    return tuple(int(i) for i in np.flatnonzero(e > cut))


def estimate_mp_params_partial(top, n: int, d: int, f_top: float = 0.49,
                               f_bottom: float = 0.05) -> MPParams:
    """Fit sigma2 when only the largest ``len(top)`` of ``n`` eigenvalues are known.

    Ranks are matched to MP(n/d, 1) quantiles at full-spectrum plotting
    positions. The top ceil(m*f_top) known values are skipped (at most half
    of them) and the bottom ceil(m*f_bottom) as well.
    """
    e = _sorted_desc(top)
    m = len(e)
    if m == 0 or m > n:
        raise InvalidInput(f"need 0 < len(top) <= n, got {m} of {n}")
    if not np.any(e > 0):
        raise DegenerateDistribution("all-zero spectrum")
    gamma = n / d
    lo = min(int(math.ceil(m * f_top)), m // 2)
    hi = max(lo + 1, m - int(math.ceil(m * f_bottom)))
    idx = np.arange(lo, hi)
    ref = _table(gamma).ppf(1.0 - (idx + 0.5) / n)
    if not np.mean(ref) > 0:
        raise DegenerateDistribution("reference quantiles vanish on the known ranks")
    s = float(np.mean(e[idx]) / np.mean(ref))
    if not s > 0:
        raise DegenerateDistribution("fitted sigma2 is zero")
    return MPParams(gamma, s)
