"""Numerical primitives shared by the design and control code.

Everything here is a pure function of its (array) arguments.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np
import scipy.linalg

SCHUR_TOL = 1e-9
# direct Kronecker solve up to this state dimension, Bartels-Stewart above
_KRON_MAX_N = 30

_STD_NORMAL = NormalDist()


class InstabilityError(ValueError):
    """Raised when a matrix that must be Schur stable is not."""


class NotPSDError(ValueError):
    """Raised when a matrix that must be positive semidefinite is not."""


def spectral_radius(A: np.ndarray) -> float:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(A))))


def check_schur(A: np.ndarray, tol: float = SCHUR_TOL) -> None:
    rho = spectral_radius(A)
    if rho >= 1.0 - tol:
        raise InstabilityError(f"matrix is not Schur stable (spectral radius {rho:.12g})")


def normal_quantile(u: float) -> float:
    """Inverse standard-normal CDF, polished with one Newton step."""
    if not 0.0 < u < 1.0:
        raise ValueError(f"normal quantile needs 0 < u < 1, got {u!r}")
    x = _STD_NORMAL.inv_cdf(u)
    # Newton on Phi(x) - u, with Phi from erfc for accuracy in both tails
    pdf = math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    if pdf > 0.0:
        cdf = 0.5 * math.erfc(-x / math.sqrt(2.0))
        x -= (cdf - u) / pdf
    return x


def chi_squared_quantile(q: float) -> float:
    """Quantile of the chi-squared distribution with one degree of freedom.

    Uses the identity ``F^{-1}(q) = (Phi^{-1}((1 + q) / 2))**2``.

    Parameters
    ----------
    q : float
        Probability in ``[0, 1)``.
    """
    q = float(q)
    if not 0.0 <= q < 1.0:
        raise ValueError(f"chi-squared quantile needs 0 <= q < 1, got {q!r}")
    if q == 0.0:
        return 0.0
    return normal_quantile(0.5 * (1.0 + q)) ** 2


def chi_squared_cdf(t: float) -> float:
    if t <= 0.0:
        return 0.0
    return math.erf(math.sqrt(t / 2.0))


def psd_sqrt(S: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Symmetric PSD square root of a symmetric PSD matrix."""
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if S.shape[0] != S.shape[1]:
        raise ValueError(f"psd_sqrt needs a square matrix, got shape {S.shape}")
    if not np.allclose(S, S.T, atol=tol, rtol=0.0):
        raise NotPSDError("matrix is not symmetric")
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    if w.size and w[0] < -tol:
        raise NotPSDError(f"matrix is not PSD (smallest eigenvalue {w[0]:.3e})")
    M = (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T
    return 0.5 * (M + M.T)


def solve_discrete_lyapunov(A_cl: np.ndarray, W: np.ndarray, transpose: bool = True) -> np.ndarray:
    """Solve a discrete Lyapunov equation for a Schur-stable ``A_cl``.

    With ``transpose=True`` returns X with ``A_cl.T @ X @ A_cl + W = X`` (terminal
    cost form); with ``transpose=False`` returns X with ``A_cl @ X @ A_cl.T + W = X``
    (stationary covariance form).
    """
    A_cl = np.atleast_2d(np.asarray(A_cl, dtype=float))
    W = np.atleast_2d(np.asarray(W, dtype=float))
    n = A_cl.shape[0]
    if A_cl.shape != (n, n) or W.shape != (n, n):
        raise ValueError(f"shape mismatch: A_cl {A_cl.shape}, W {W.shape}")
    check_schur(A_cl)
    M = A_cl.T if transpose else A_cl
    if n <= _KRON_MAX_N:
        # X = M X M^T + W  <=>  (I - M (x) M) vec(X) = vec(W)
        lhs = np.eye(n * n) - np.kron(M, M)
        X = np.linalg.solve(lhs, W.reshape(-1, order="F")).reshape((n, n), order="F")
    else:
        X = scipy.linalg.solve_discrete_lyapunov(M, W)
    return 0.5 * (X + X.T)


@dataclass(frozen=True)
class CovarianceSequence:
    """State covariances of the tail closed loop started from a known state."""

    sigma_x: list = field(repr=False)
    sigma_x_inf: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.sigma_x)

    def __getitem__(self, i: int) -> np.ndarray:
        return self.sigma_x[i]


def tail_covariance_sequence(A_K: np.ndarray, sigma_w: np.ndarray, imax: int) -> CovarianceSequence:
    A_K = np.atleast_2d(np.asarray(A_K, dtype=float))
    sigma_w = np.atleast_2d(np.asarray(sigma_w, dtype=float))
    check_schur(A_K)
    if imax < 0:
        raise ValueError("imax must be non-negative")
    n = A_K.shape[0]
    seq = [np.zeros((n, n))]
    for _ in range(imax):
        S = A_K @ seq[-1] @ A_K.T + sigma_w
        seq.append(0.5 * (S + S.T))
    return CovarianceSequence(seq, solve_discrete_lyapunov(A_K, sigma_w, transpose=False))


def vec(M: np.ndarray) -> np.ndarray:
    """Column-stacking vectorization."""
    return np.asarray(M, dtype=float).reshape(-1, order="F")


def unvec(x: np.ndarray, rows: int, cols: int) -> np.ndarray:
    return np.asarray(x, dtype=float).reshape((rows, cols), order="F")


def kron_vec_identity_check(A, B, C, tol: float = 1e-10) -> bool:
    """Check ``vec(A @ B @ C) == kron(C.T, A) @ vec(B)`` numerically."""
    A, B, C = (np.atleast_2d(np.asarray(X, dtype=float)) for X in (A, B, C))
    if A.shape[1] != B.shape[0] or B.shape[1] != C.shape[0]:
        raise ValueError(f"non-conformable shapes {A.shape}, {B.shape}, {C.shape}")
    lhs = vec(A @ B @ C)
    rhs = np.kron(C.T, A) @ vec(B)
    scale = 1.0 + max(np.abs(lhs).max(initial=0.0), np.abs(rhs).max(initial=0.0))
    return bool(np.max(np.abs(lhs - rhs), initial=0.0) <= tol * scale)
