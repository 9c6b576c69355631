"""Dense linear-algebra substrate: covariance, symmetric eigensolver, Frequent Directions."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import InvalidInput, NumericalFailure


@dataclass(frozen=True)
class Tolerances:
    symmetry_rtol: float = 1e-12
    psd_rtol: float = 1e-9
    trace_rtol: float = 1e-8
    zero_rtol: float = 1e-13


TOL = Tolerances()


@dataclass(frozen=True)
class Spectrum:
    """Eigenvalues sorted descending, plus the dimension of the matrix they came from."""

    eigenvalues: np.ndarray
    source_dim: int

    def __len__(self):
        return len(self.eigenvalues)

    @property
    def max(self) -> float:
        return float(self.eigenvalues[0]) if len(self.eigenvalues) else 0.0

    def scaled(self, c: float) -> "Spectrum":
        return Spectrum(self.eigenvalues * c, self.source_dim)


def as_gradient_matrix(G, min_rows: int = 2) -> np.ndarray:
    """Validate and return G as a float64 (n, d) array. Rows are clients."""
    G = np.asarray(G, dtype=np.float64)
    if G.ndim != 2:
        raise InvalidInput(f"gradient matrix must be 2-D, got shape {G.shape}")
    n, d = G.shape
    if n < min_rows or d < 1:
        raise InvalidInput(f"gradient matrix needs n >= {min_rows} and d >= 1, got {G.shape}")
    if not np.all(np.isfinite(G)):
        raise InvalidInput("gradient matrix has non-finite entries")
    return G


def covariance(G) -> np.ndarray:
    """(1/n) G^T G as a symmetric d x d matrix."""
    G = as_gradient_matrix(G)
    n = G.shape[0]
    C = (G.T @ G) / n
    return 0.5 * (C + C.T)


def check_covariance(C, tol: Tolerances = TOL) -> np.ndarray:
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise InvalidInput(f"covariance must be square, got {C.shape}")
    if not np.all(np.isfinite(C)):
        raise InvalidInput("covariance has non-finite entries")
    scale = max(np.max(np.abs(C)), np.finfo(float).tiny)
    if np.max(np.abs(C - C.T)) > tol.symmetry_rtol * scale:
        raise InvalidInput("covariance is not symmetric")
    return C


def _eigh(C, vectors: bool):
    m = C.shape[0]
    try:
        # dsyev: Householder tridiagonalization followed by implicit QL/QR
        # (LAPACK caps the QL/QR sweep at 30*m iterations and reports failure).
        out = scipy.linalg.eigh(C, eigvals_only=not vectors, driver="ev",
                                check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"symmetric eigensolver failed: {exc}", iterations=30 * m) from exc
    return out


def eigenvalues_sym(C, tol: Tolerances = TOL) -> Spectrum:
    """Full real spectrum of a symmetric PSD matrix, descending."""
    C = check_covariance(C, tol)
    w = _eigh(C, vectors=False)[::-1].copy()
    if len(w) and w[-1] < -tol.psd_rtol * max(abs(w[0]), np.finfo(float).tiny):
        raise InvalidInput(f"matrix is not positive semi-definite (min eigenvalue {w[-1]:.3e})")
    return Spectrum(w, C.shape[0])


def eigh_desc(M) -> tuple[np.ndarray, np.ndarray]:
    """Eigenpairs of a symmetric matrix, eigenvalues descending."""
    w, V = _eigh(np.asarray(M, dtype=np.float64), vectors=True)
    return w[::-1].copy(), V[:, ::-1].copy()


def gram(X, scale: float) -> np.ndarray:
    """X X^T / scale, symmetrized."""
    K = (X @ X.T) / scale
    return 0.5 * (K + K.T)


def snap_zeros(w: np.ndarray, zero_rtol: float = TOL.zero_rtol) -> np.ndarray:
    """Clip rounding-level eigenvalues (including tiny negatives) to exact zeros."""
    top = w[0] if len(w) else 0.0
    cut = zero_rtol * max(top, 0.0)
    return np.where(w <= cut, 0.0, w)


class FDSketch:
    """Frequent Directions sketch with a k x d row buffer.

    Rows are inserted into free buffer slots; a shrink (SVD, subtract the
    k-th squared singular value from all of them) happens only when a row
    arrives and no slot is free, so feeding at most k rows is lossless.
    """

    def __init__(self, k: int, d: int):
        if k < 2:
            raise InvalidInput(f"sketch size must be >= 2, got {k}")
        if d < 1:
            raise InvalidInput(f"dimension must be >= 1, got {d}")
        self.k = int(k)
        self.d = int(d)
        self.buffer = np.zeros((self.k, self.d))
        self.filled = 0
        self.rows_seen = 0
        self.frobenius_mass = 0.0
        self.shrinks = 0
        self.total_shrinkage = 0.0

    def _shrink(self):
        _, s, Vt = np.linalg.svd(self.buffer, full_matrices=False)
        s2 = s ** 2
        delta = s2[-1] if len(s2) >= self.k else 0.0
        s_new = np.sqrt(np.maximum(s2 - delta, 0.0))
        B = np.zeros_like(self.buffer)
        r = len(s_new)
        B[:r] = s_new[:, None] * Vt[:r]
        self.buffer = B
        self.filled = int(np.count_nonzero(s_new > 0))
        self.shrinks += 1
        self.total_shrinkage += float(delta)

    def update(self, row) -> "FDSketch":
        row = np.asarray(row, dtype=np.float64)
        if row.shape != (self.d,):
            raise InvalidInput(f"row must have shape ({self.d},), got {row.shape}")
        if not np.all(np.isfinite(row)):
            raise InvalidInput("row has non-finite entries")
        if self.filled == self.k:
            self._shrink()
        self.buffer[self.filled] = row
        self.filled += 1
        self.rows_seen += 1
        self.frobenius_mass += float(row @ row)
        return self

    @property
    def lossless(self) -> bool:
        return self.shrinks == 0

    def rows(self) -> np.ndarray:
        """The occupied part of the buffer."""
        return self.buffer[: self.filled]

    def gram_error_bound(self) -> float:
        return self.frobenius_mass / self.k


def fd_update(s: FDSketch, row) -> FDSketch:
    return s.update(row)


def fd_sketch(G, k: int) -> FDSketch:
    """Fold fd_update over the rows of G in client-index order."""
    G = as_gradient_matrix(G, min_rows=1)
    s = FDSketch(k, G.shape[1])
    for row in G:
        s.update(row)
    return s


def sketch_spectrum(s: FDSketch, n: int) -> Spectrum:
    """Eigenvalues of (1/n) B^T B via the k x k Gram form, zero-padded to d."""
    if n < 1:
        raise InvalidInput("n must be positive")
    B = s.rows()
    out = np.zeros(s.d)
    if len(B):
        w = _eigh(gram(B, n), vectors=False)[::-1]
        w = np.maximum(w, 0.0)
        m = min(len(w), s.d)
        out[:m] = w[:m]
    return Spectrum(out, s.d)
