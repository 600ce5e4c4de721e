"""Dense linear-algebra kernels: SVD, truncation, whitening, ridge solves.

Conventions used everywhere in this package: activations are rows
(``x`` is ``t x d_in``) and projections apply on the right
(``y = x @ w`` with ``w`` of shape ``d_in x d_out``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import NumericError, ValidationError

# Ridge escalation on Cholesky / solve failure: base scale, x10 per retry.
RIDGE_BASE_SCALE = 1e-8
RIDGE_ESCALATIONS = 3


@dataclass
class SvdFactors:
    """Full SVD of a matrix: ``a = u @ diag(sigma) @ v.T``.

    Columns of ``u`` (m x r) and ``v`` (n x r) are orthonormal;
    ``sigma`` is non-negative and non-increasing.
    """

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray


@dataclass
class LowRankPair:
    """Rank-r factorization ``w ~= l @ r_factor``.

    ``l`` is d_in x r (the cached-latent projection), ``r_factor`` is
    r x d_out (the reconstruction).
    """

    l: np.ndarray
    r_factor: np.ndarray

    @property
    def rank(self) -> int:
        return self.l.shape[1]

    def reconstruct(self) -> np.ndarray:
        return self.l @ self.r_factor


def _check_finite(a: np.ndarray, name: str = "matrix") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValidationError(f"{name} must be 2-D, got ndim={a.ndim}")
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{name} contains non-finite entries")
    return a


def svd(a: np.ndarray) -> SvdFactors:
    """Full (thin) SVD with singular values sorted non-increasing."""
    a = _check_finite(a, "svd input")
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    return SvdFactors(u=u, sigma=s, v=vt.T)


def truncate(f: SvdFactors, r: int) -> LowRankPair:
    """Keep the top-r singular triplets, splitting sigma evenly:
    ``l = U_r sqrt(S_r)``, ``r_factor = sqrt(S_r) V_r^T``.
    """
    k = f.sigma.shape[0]
    if not 1 <= r <= k:
        raise ValidationError(f"rank {r} out of range [1, {k}]")
    root = np.sqrt(f.sigma[:r])
    l = f.u[:, :r] * root
    r_factor = root[:, None] * f.v[:, :r].T
    return LowRankPair(l=l, r_factor=r_factor)


def _gram_ridge_scale(gram: np.ndarray) -> float:
    d = gram.shape[0]
    return RIDGE_BASE_SCALE * max(np.trace(gram), 1.0) / d


def whiten_factor(x: np.ndarray, ridge: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Cholesky whitening of the input Gram.

    Returns ``(s, s_inv)`` with ``s @ s.T = x.T @ x + ridge*I`` (lower
    triangular) and ``s_inv = s^-1``. Ridge is escalated x10 up to
    RIDGE_ESCALATIONS times if the Gram is not positive definite.
    """
    x = _check_finite(x, "whitening input")
    d = x.shape[1]
    gram = x.T @ x
    add = float(ridge)
    for attempt in range(RIDGE_ESCALATIONS + 1):
        try:
            s = np.linalg.cholesky(gram + add * np.eye(d))
        except np.linalg.LinAlgError:
            base = _gram_ridge_scale(gram)
            add = base if add == 0.0 else add * 10.0
            if attempt == RIDGE_ESCALATIONS:
                raise NumericError(
                    "Cholesky failed after ridge escalation; calibration data degenerate"
                )
            continue
        s_inv = scipy.linalg.solve_triangular(s, np.eye(d), lower=True)
        return s, s_inv
    raise NumericError("unreachable")  # pragma: no cover


def whitened_truncate(
    w: np.ndarray, x: np.ndarray, r: int, ridge: float = 0.0
) -> LowRankPair:
    """Rank-r factorization of ``w`` minimizing activation error ``|x(w - l r)|_F``.

    Decomposes ``s.T @ w`` (s the whitening factor of x) and unwinds the
    left factor through ``s^-T``, so truncation is optimal in the
    activation metric rather than the weight metric.
    """
    w = _check_finite(w, "weight")
    s, s_inv = whiten_factor(x, ridge)
    f = svd(s.T @ w)
    pair = truncate(f, r)
    return LowRankPair(l=s_inv.T @ pair.l, r_factor=pair.r_factor)


def ridge_solve(a: np.ndarray, b: np.ndarray, ridge: float = 0.0) -> np.ndarray:
    """Solve ``(a + ridge*I) y = b`` with ridge escalation on failure.

    Residual is checked against ``1e-8 * (1 + |b|_F)``; if the solve is
    numerically unusable the ridge is escalated x10 up to
    RIDGE_ESCALATIONS times before giving up.
    """
    a = _check_finite(a, "system matrix")
    b = _check_finite(np.atleast_2d(b), "right-hand side")
    if a.shape[0] != a.shape[1]:
        raise ValidationError(f"system matrix must be square, got {a.shape}")
    k = a.shape[0]
    tol = 1e-8 * (1.0 + np.linalg.norm(b))
    add = float(ridge)
    for attempt in range(RIDGE_ESCALATIONS + 1):
        m = a + add * np.eye(k)
        try:
            y = np.linalg.solve(m, b)
        except np.linalg.LinAlgError:
            y = None
        if y is not None and np.all(np.isfinite(y)):
            if np.linalg.norm(m @ y - b) <= tol:
                return y
        base = _gram_ridge_scale(a) if add == 0.0 else add * 10.0
        add = base
    raise NumericError("linear system singular even after ridge escalation")
