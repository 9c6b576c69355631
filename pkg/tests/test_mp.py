import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st

from spectral_sentinel.errors import DegenerateDistribution, InvalidInput
from spectral_sentinel.mp import (MPParams, estimate_mp_params, estimate_mp_params_partial,
                                  ks_statistic, mp_cdf, mp_density, mp_support, tail_anomalies)

mpmath.mp.dps = 30


def oracle_cdf(x, gamma, sigma2):
    a = sigma2 * (1 - mpmath.sqrt(gamma)) ** 2
    b = sigma2 * (1 + mpmath.sqrt(gamma)) ** 2
    base = max(0, 1 - 1 / mpmath.mpf(gamma))
    if x <= a:
        return float(base) if x >= 0 else 0.0
    if x >= b:
        return 1.0

    def rho(t):
        return mpmath.sqrt((b - t) * (t - a)) / (2 * mpmath.pi * sigma2 * t * gamma)
    return float(base + mpmath.quad(rho, [a, x]))


def test_support_example():
    p = MPParams(0.25, 1.0)
    assert mp_support(p) == pytest.approx((0.25, 2.25))
    assert p.zero_mass == 0.0
    assert MPParams(4.0, 1.0).zero_mass == pytest.approx(0.75)


@pytest.mark.parametrize("gamma", [0.1, 0.25, 0.5, 1.0, 2.0, 4.0])
def test_cdf_against_quadrature_oracle(gamma):
    p = MPParams(gamma, 1.7)
    lm, lp = mp_support(p)
    for x in np.linspace(lm, lp, 13)[1:-1]:
        ref = oracle_cdf(mpmath.mpf(x), gamma, mpmath.mpf(1.7))
        assert abs(mp_cdf(x, p) - ref) < 1e-7
        assert abs(float(p.cdf(x)) - ref) < 1e-7


@pytest.mark.parametrize("gamma", [0.1, 0.5, 1.0, 3.0])
def test_density_integrates_to_continuous_mass(gamma):
    p = MPParams(gamma, 1.0)
    lm, lp = mp_support(p)
    total = mpmath.quad(lambda t: mp_density(float(t), p), [lm, (lm + lp) / 2, lp])
    assert float(total) == pytest.approx(min(1.0, 1.0 / gamma), abs=1e-6)


def test_cdf_boundaries():
    p = MPParams(2.0, 1.0)
    assert float(p.cdf(-1.0)) == 0.0
    assert float(p.cdf(0.0)) == pytest.approx(0.5)
    assert float(p.cdf_left(0.0)) == 0.0
    assert float(p.cdf(100.0)) == 1.0
    with pytest.raises(DegenerateDistribution):
        MPParams(1.0, 0.0).cdf(1.0)
    with pytest.raises(InvalidInput):
        MPParams(-1.0, 1.0)


@given(st.floats(0.05, 4.0), st.floats(0.01, 0.99))
def test_ppf_inverts_cdf(gamma, q):
    p = MPParams(gamma, 2.0)
    if q <= p.zero_mass:
        assert float(p.ppf(q)) == 0.0
    else:
        assert float(p.cdf(p.ppf(q))) == pytest.approx(q, abs=1e-6)


def double_loop_ks(e, p):
    m = len(e)
    D = 0.0
    for x in e:
        le = sum(1 for y in e if y <= x) / m
        lt = sum(1 for y in e if y < x) / m
        F = float(p.cdf(x))
        Fl = float(p.cdf_left(x))
        D = max(D, abs(le - F), abs(lt - Fl))
    return D


def test_ks_matches_double_loop_oracle():
    r = np.random.default_rng(7)
    for i in range(50):
        n, d = int(r.integers(4, 40)), int(r.integers(4, 40))
        X = r.normal(size=(n, d))
        e = np.linalg.eigvalsh(X @ X.T / d)
        e = np.where(e < 1e-10, 0.0, e)
        if i % 5 == 0:
            e[:3] = e[3]          # ties
        p = MPParams(n / d, float(r.uniform(0.5, 1.5)))
        got = ks_statistic(e, p, 0.1).statistic
        assert abs(got - double_loop_ks(list(e), p)) <= 1e-10


def test_ks_reject_flag_and_range():
    p = MPParams(0.5, 1.0)
    res = ks_statistic(np.full(10, 50.0), p, 0.2)
    assert res.statistic == pytest.approx(1.0) and res.reject
    with pytest.raises(InvalidInput):
        ks_statistic([], p, 0.1)


@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100.0))
def test_estimator_is_homogeneous(seed, c):
    r = np.random.default_rng(seed)
    X = r.normal(size=(30, 60))
    e = np.linalg.eigvalsh(X @ X.T / 60)
    p1 = estimate_mp_params(e, 30, 60)
    p2 = estimate_mp_params(c * e, 30, 60)
    assert p2.sigma2 == pytest.approx(c * p1.sigma2, rel=1e-12)
    assert p1.gamma == 0.5


@pytest.mark.parametrize("n,d", [(200, 800), (400, 400), (400, 100)])
def test_estimator_recovers_sigma2(n, d):
    X = np.random.default_rng(0).normal(scale=math.sqrt(3.0), size=(n, d))
    e = np.linalg.eigvalsh(X @ X.T / d)
    assert estimate_mp_params(e, n, d).sigma2 == pytest.approx(3.0, rel=0.05)


def test_estimator_resists_outliers():
    X = np.random.default_rng(1).normal(size=(200, 400))
    e = np.sort(np.linalg.eigvalsh(X @ X.T / 400))
    e[-40:] *= 100.0
    assert estimate_mp_params(e, 200, 400).sigma2 == pytest.approx(1.0, rel=0.1)


def test_partial_fit_close_to_full():
    X = np.random.default_rng(2).normal(size=(300, 600))
    e = np.sort(np.linalg.eigvalsh(X @ X.T / 600))[::-1]
    assert estimate_mp_params_partial(e[:150], 300, 600).sigma2 == pytest.approx(1.0, rel=0.05)


def test_estimator_degenerate():
    with pytest.raises(DegenerateDistribution):
        estimate_mp_params(np.zeros(5), 5, 10)


def test_tail_anomalies_example():
    p = MPParams(0.25, 1.0)   # lambda+ = 2.25, cut = 2.75
    assert tail_anomalies([5.0, 2.8, 2.7, 1.0], p, 0.5) == (0, 1)
