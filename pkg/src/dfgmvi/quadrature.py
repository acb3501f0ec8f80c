"""Derivative-free quadrature rules for Gaussian expectations.

Two families live here:

* a finite-difference stencil on ``2N+1`` points that estimates the
  Gaussian expectations of ``Phi = |F|^2 / 2``, its gradient and its Hessian
  from forward-map values only;
* mean-point rules for ``log rho`` of the mixture itself, with the
  negative-definite part of the Hessian replaced by ``-C_k^{-1}``.

Functions that take ``L`` and ``QuadratureData`` accept leading batch axes
so the solver can process all components in one call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .mixture import GaussianMixture, component_logpdfs, symmetrize, _responsibilities

DEFAULT_ALPHA = 1e-3


@dataclass(frozen=True)
class QuadratureData:
    """Stencil summary ``c = F(m)``, first differences ``B`` and second differences ``A``.

    Shapes are ``c: (..., Nx)``, ``B, A: (..., Nx, N)``.
    """

    c: np.ndarray
    B: np.ndarray
    A: np.ndarray
    alpha: float

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.B.shape != self.A.shape:
            raise ValueError("A and B must have equal shapes")
        if self.B.shape[:-1] != self.c.shape:
            raise ValueError("row count of A, B must match len(c)")


def _tri(L, rhs, trans):
    """Solve ``L x = rhs`` (trans=0) or ``L^T x = rhs`` (trans=1) over batches."""
    if L.ndim == 2:
        return solve_triangular(L, rhs, lower=True, trans=trans, check_finite=False)
    out = np.empty(np.broadcast_shapes(L.shape[:-2], rhs.shape[:-2]) + rhs.shape[-2:])
    for idx in np.ndindex(out.shape[:-2]):
        out[idx] = solve_triangular(L[idx], rhs[idx], lower=True, trans=trans,
                                    check_finite=False)
    return out


def precision_from_chol(L):
    """``C^{-1} = L^{-T} L^{-1}`` assembled from the triangular inverse."""
    L = np.asarray(L, dtype=float)
    eye = np.broadcast_to(np.eye(L.shape[-1]), L.shape)
    Linv = _tri(L, eye, 0)
    return symmetrize(np.swapaxes(Linv, -1, -2) @ Linv)


def quadrature_points(m, L, alpha=DEFAULT_ALPHA):
    """Stencil ``m, m + alpha L[:, i], m - alpha L[:, i]`` in that order.

    Returns shape ``(..., 2N+1, N)``.
    """
    m = np.asarray(m, dtype=float)
    L = np.asarray(L, dtype=float)
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if L.shape[-1] != m.shape[-1] or L.shape[-2] != m.shape[-1]:
        raise ValueError("mean and factor dimensions disagree")
    cols = alpha * np.swapaxes(L, -1, -2)
    centre = m[..., None, :]
    return np.concatenate([centre, centre + cols, centre - cols], axis=-2)


def assemble_quadrature(F_values, alpha=DEFAULT_ALPHA) -> QuadratureData:
    """Build ``(c, B, A)`` from forward values ordered as ``quadrature_points``."""
    F = np.asarray(F_values, dtype=float)
    n_pts = F.shape[-2]
    if n_pts % 2 != 1 or n_pts < 3:
        raise ValueError(f"expected 2N+1 forward values, got {n_pts}")
    n = (n_pts - 1) // 2
    c = F[..., 0, :]
    plus = F[..., 1:n + 1, :]
    minus = F[..., n + 1:, :]
    B = (plus - minus) / (2.0 * alpha)
    A = (plus + minus - 2.0 * c[..., None, :]) / (2.0 * alpha**2)
    # stored as columns: (..., Nx, N)
    return QuadratureData(c=c, B=np.swapaxes(B, -1, -2), A=np.swapaxes(A, -1, -2),
                          alpha=float(alpha))


def expect_phi(q: QuadratureData):
    """``E[Phi] ~ c^T c / 2``."""
    return 0.5 * np.sum(q.c * q.c, axis=-1)


def expect_grad_phi(L, q: QuadratureData):
    """``E[grad Phi] ~ L^{-T} B^T c``."""
    Btc = np.einsum("...xn,...x->...n", q.B, q.c)
    return _tri(np.asarray(L, dtype=float), Btc[..., None], 1)[..., 0]


def expect_hess_phi(L, q: QuadratureData):
    """``E[hess Phi] ~ L^{-T} (6 Diag(A^T A) + B^T B) L^{-1}``.

    Assembled as a Gram matrix ``W W^T`` with ``W = L^{-T} [B^T, sqrt(6 Diag(A^T A))]``
    so the result is positive semidefinite in floating point too.
    """
    L = np.asarray(L, dtype=float)
    diag = np.sqrt(6.0 * np.sum(q.A * q.A, axis=-2))
    stacked = np.concatenate([np.swapaxes(q.B, -1, -2),
                              diag[..., :, None] * np.eye(diag.shape[-1])], axis=-1)
    W = _tri(L, stacked, 1)
    return symmetrize(W @ np.swapaxes(W, -1, -2))


def mixture_mean_terms(mix: GaussianMixture):
    """Mean-point quantities of ``log rho`` for all components at once.

    Returns ``(log_rho, score, S)`` where, for each component ``k``,
    ``log_rho[k] = log rho(m_k)``, ``score[k] = grad log rho(m_k)`` and
    ``S[k]`` is the positive semidefinite pairwise term
    ``sum_{i<j} w_i w_j (v_i - v_j)(v_i - v_j)^T N_i N_j / rho^2`` at ``m_k``.

    ``S`` is evaluated as the responsibility-weighted covariance of the
    ``v_i``, which equals the pairwise sum because responsibilities sum to one.
    """
    logN, V = component_logpdfs(mix, mix.means, with_scores=True)
    p, log_rho = _responsibilities(mix, logN)
    vbar = np.einsum("ki,kid->kd", p, V)
    D = V - vbar[:, None, :]
    S = np.swapaxes(D * p[:, :, None], 1, 2) @ D
    return log_rho, -vbar, symmetrize(S)


def gm_expect_meanpoint(mix: GaussianMixture, k: int):
    """``(log rho(m_k), grad log rho(m_k))``."""
    _check_k(mix, k)
    log_rho, score, _ = mixture_mean_terms(mix)
    return float(log_rho[k]), score[k]


def gm_expect_hess_log(mix: GaussianMixture, k: int):
    """Expected Hessian of ``log rho`` under component ``k``: ``S_k - C_k^{-1}``."""
    _check_k(mix, k)
    _, _, S = mixture_mean_terms(mix)
    return symmetrize(S[k] - precision_from_chol(mix.cov_chols[k]))


def _check_k(mix, k):
    if not 0 <= k < mix.K:
        raise IndexError(f"component index {k} out of range for K={mix.K}")
