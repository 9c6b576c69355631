import mpmath
import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, strategies as st

from spectral_sentinel import linalg
from spectral_sentinel.errors import InvalidInput, NumericalFailure
from spectral_sentinel.linalg import (FDSketch, covariance, eigenvalues_sym, fd_sketch,
                                      sketch_spectrum)


def triple_loop_cov(G):
    n, d = len(G), len(G[0])
    C = [[0.0] * d for _ in range(d)]
    for i in range(d):
        for j in range(d):
            s = 0.0
            for k in range(n):
                s += G[k][i] * G[k][j]
            C[i][j] = s / n
    return np.array(C)


shapes = st.tuples(st.integers(2, 8), st.integers(1, 6))


@given(shapes, st.integers(0, 2**32 - 1))
def test_covariance_matches_triple_loop(shape, seed):
    G = np.random.default_rng(seed).normal(size=shape)
    np.testing.assert_allclose(covariance(G), triple_loop_cov(G.tolist()), rtol=1e-12, atol=1e-14)


def test_covariance_example():
    G = np.array([[1.0, 0.0], [0.0, 2.0]])
    np.testing.assert_array_equal(covariance(G), [[0.5, 0.0], [0.0, 2.0]])
    np.testing.assert_allclose(eigenvalues_sym(covariance(G)).eigenvalues, [2.0, 0.5])


def test_covariance_rejects_bad_input():
    with pytest.raises(InvalidInput):
        covariance(np.ones(3))
    with pytest.raises(InvalidInput):
        covariance(np.array([[1.0, np.nan], [0.0, 1.0]]))
    with pytest.raises(InvalidInput):
        covariance(np.ones((1, 3)))


def test_eigen_rejects_asymmetric_and_indefinite():
    with pytest.raises(InvalidInput):
        eigenvalues_sym(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(InvalidInput):
        eigenvalues_sym(np.array([[1.0, 0.0], [0.0, -1.0]]))


@given(st.integers(2, 5), st.integers(0, 2**32 - 1))
def test_eigenvalues_match_charpoly_roots(m, seed):
    A = np.random.default_rng(seed).integers(-3, 4, size=(m + 1, m)).astype(float)
    C = A.T @ A
    M = mpmath.matrix(C.tolist())
    exact = sorted((float(mpmath.re(r)) for r in mpmath.eig(M, left=False, right=False)), reverse=True)
    got = eigenvalues_sym(C).eigenvalues
    np.testing.assert_allclose(got, exact, rtol=1e-9, atol=1e-9 * max(1.0, exact[0]))


@given(shapes, st.integers(0, 2**32 - 1))
def test_trace_and_order(shape, seed):
    C = covariance(np.random.default_rng(seed).normal(size=shape))
    w = eigenvalues_sym(C).eigenvalues
    assert np.all(np.diff(w) <= 0)
    assert np.all(w >= -1e-12 * max(1.0, w[0]))
    assert abs(w.sum() - np.trace(C)) <= 1e-8 * max(1.0, abs(np.trace(C)))


@given(st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_weyl_perturbation(m, seed):
    r = np.random.default_rng(seed)
    A = r.normal(size=(m + 2, m))
    E = 1e-3 * r.normal(size=(m, m))
    E = 0.5 * (E + E.T)
    C = A.T @ A
    w1 = eigenvalues_sym(C).eigenvalues
    w2 = scipy.linalg.eigvalsh(C + E)[::-1]
    assert np.max(np.abs(w1 - w2)) <= np.linalg.norm(E, 2) + 1e-12


def test_eigensolver_failure_is_numerical_failure(monkeypatch):
    def boom(*a, **k):
        raise np.linalg.LinAlgError("no convergence")
    monkeypatch.setattr(linalg.scipy.linalg, "eigh", boom)
    with pytest.raises(NumericalFailure) as info:
        eigenvalues_sym(np.eye(4))
    assert info.value.iterations == 120


def test_fd_small_example_lossless():
    G = np.array([[3.0, 0.0], [0.0, 4.0]])
    s = fd_sketch(G, 2)
    assert s.lossless
    np.testing.assert_array_equal(s.rows(), G)
    np.testing.assert_allclose(sketch_spectrum(s, 2).eigenvalues, [8.0, 4.5])


def test_fd_shrink_example():
    # three orthogonal rows into k=2: the third insert shrinks by the smallest s^2
    s = FDSketch(2, 3)
    for row in np.diag([3.0, 2.0, 1.0]):
        s.update(row)
    assert s.shrinks == 1
    B = s.rows()
    np.testing.assert_allclose(sorted(np.linalg.svd(B, compute_uv=False) ** 2), [1.0, 5.0])


@pytest.mark.parametrize("k", [8, 32, 128])
def test_fd_guarantee(k):
    r = np.random.default_rng(k)
    for _ in range(10):
        n, d = int(r.integers(k // 2 + 1, 257)), int(r.integers(8, 513))
        G = r.normal(size=(n, d)) * r.exponential(size=(n, 1))
        s = fd_sketch(G, k)
        B = s.rows()
        gap = G.T @ G - B.T @ B
        w = np.linalg.eigvalsh(0.5 * (gap + gap.T))
        fro = np.sum(G ** 2)
        assert w[0] >= -1e-9 * fro
        assert w[-1] <= fro / k * (1 + 1e-9)


def test_fd_rejects_bad_rows():
    s = FDSketch(4, 3)
    with pytest.raises(InvalidInput):
        s.update(np.ones(4))
    with pytest.raises(InvalidInput):
        s.update(np.array([1.0, np.inf, 0.0]))
    with pytest.raises(InvalidInput):
        FDSketch(1, 3)


def test_snap_zeros_keeps_small_bulk_under_spike():
    w = np.array([1e6, 1e-3, 1e-16, -1e-17])
    np.testing.assert_array_equal(linalg.snap_zeros(w), [1e6, 1e-3, 0.0, 0.0])
