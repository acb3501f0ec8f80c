"""Gaussian-mixture data model.

Covariances are held exclusively as lower-triangular Cholesky factors
``L`` with ``C = L @ L.T``.  Every density evaluation goes through
triangular solves against ``L``; neither ``C`` nor its inverse is formed
unless a caller asks for it explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from .exceptions import PositivityLost

LOG_2PI = float(np.log(2.0 * np.pi))

__all__ = [
    "GaussianComponent",
    "GaussianMixture",
    "cholesky_sqrt",
    "chol_from_precision",
    "symmetrize",
    "gm_logpdf",
    "gm_score",
    "component_scores",
    "component_logpdfs",
    "marginal",
]


def symmetrize(M):
    """Return ``(M + M^T) / 2`` over the trailing two axes."""
    M = np.asarray(M, dtype=float)
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def cholesky_sqrt(C):
    """Lower Cholesky factor of a symmetric positive definite matrix.

    Accepts a single ``(N, N)`` matrix or a stack ``(..., N, N)``.  The input
    is symmetrized first.  Any non-positive pivot raises
    :class:`PositivityLost`; there is deliberately no jitter fallback.
    """
    C = symmetrize(C)
    if C.ndim < 2 or C.shape[-1] != C.shape[-2]:
        raise ValueError(f"expected square matrix, got shape {C.shape}")
    if not np.all(np.isfinite(C)):
        raise PositivityLost("matrix contains non-finite entries",
                             index=_first_bad(~np.isfinite(C)))
    try:
        L = np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        raise PositivityLost("matrix is not positive definite",
                             index=_first_failing_factor(C)) from None
    diag = np.diagonal(L, axis1=-2, axis2=-1)
    if not np.all(diag > 0.0) or not np.all(np.isfinite(L)):
        raise PositivityLost("Cholesky factor has a non-positive pivot",
                             index=_first_bad(~(diag > 0.0)))
    return L


def _first_bad(mask):
    if mask.ndim <= 2:
        return None
    flat = mask.reshape(mask.shape[0], -1).any(axis=1)
    hits = np.flatnonzero(flat)
    return int(hits[0]) if hits.size else None


def _first_failing_factor(C):
    if C.ndim == 2:
        return None
    for i, Ci in enumerate(C.reshape(-1, *C.shape[-2:])):
        try:
            np.linalg.cholesky(Ci)
        except np.linalg.LinAlgError:
            return i
    return None


def chol_from_precision(P):
    """Lower Cholesky factor of ``P^{-1}`` computed without inverting ``P``.

    Factorizes the index-reversed precision ``J P J = R R^T``; then
    ``P = U U^T`` with ``U = J R J`` upper triangular, and the covariance
    factor is ``U^{-T}``, which is lower triangular with positive diagonal.
    """
    P = symmetrize(P)
    rev = P[..., ::-1, ::-1]
    R = cholesky_sqrt(rev)
    U = R[..., ::-1, ::-1]
    n = P.shape[-1]
    eye = np.eye(n)
    if U.ndim == 2:
        return solve_triangular(U, eye, trans="T", lower=False, check_finite=False)
    out = np.empty_like(U)
    for idx in np.ndindex(U.shape[:-2]):
        out[idx] = solve_triangular(U[idx], eye, trans="T", lower=False, check_finite=False)
    return out


def _validate_factor(L, n=None):
    L = np.array(L, dtype=float)
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise ValueError(f"cov_chol must be square, got shape {L.shape}")
    if n is not None and L.shape[0] != n:
        raise ValueError(f"cov_chol has dimension {L.shape[0]}, expected {n}")
    if np.any(np.triu(L, 1) != 0.0):
        raise ValueError("cov_chol must be lower triangular")
    if not np.all(np.diag(L) > 0.0):
        raise ValueError("cov_chol must have a strictly positive diagonal")
    return L


def _readonly(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class GaussianComponent:
    """One Gaussian ``N(mean, L L^T)``."""

    mean: np.ndarray
    cov_chol: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        if mean.ndim != 1:
            raise ValueError("mean must be a vector")
        L = _validate_factor(self.cov_chol, mean.size)
        object.__setattr__(self, "mean", _readonly(mean))
        object.__setattr__(self, "cov_chol", _readonly(L))

    @classmethod
    def from_cov(cls, mean, cov):
        return cls(mean, cholesky_sqrt(np.atleast_2d(cov)))

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def cov(self) -> np.ndarray:
        return self.cov_chol @ self.cov_chol.T


class GaussianMixture:
    """Immutable K-component Gaussian mixture with stacked parameters.

    Parameters
    ----------
    weights : array-like, shape (K,)
        Mixture weights on the probability simplex.
    means : array-like, shape (K, N)
    cov_chols : array-like, shape (K, N, N)
        Lower-triangular Cholesky factors of the component covariances.
    """

    __slots__ = ("weights", "means", "cov_chols")

    def __init__(self, weights, means, cov_chols, *, validate=True):
        w = np.atleast_1d(np.asarray(weights, dtype=float))
        m = np.asarray(means, dtype=float)
        if m.ndim == 1:
            m = m.reshape(w.size, -1)
        L = np.asarray(cov_chols, dtype=float)
        if L.ndim == 2 and m.shape[1] == 1 and L.shape == (w.size, 1):
            L = L.reshape(w.size, 1, 1)
        if validate:
            K = w.size
            if m.shape[0] != K or L.shape[0] != K:
                raise ValueError("weights, means and cov_chols disagree on K")
            n = m.shape[1]
            if L.shape[1:] != (n, n):
                raise ValueError(f"cov_chols must have shape ({K}, {n}, {n}), got {L.shape}")
            if np.any(w < 0.0) or not np.all(np.isfinite(w)):
                raise ValueError("weights must be finite and nonnegative")
            if abs(w.sum() - 1.0) > 1e-12:
                raise ValueError(f"weights must sum to 1 (sum={w.sum()!r})")
            if not np.all(np.isfinite(m)):
                raise ValueError("means must be finite")
            if np.any(np.triu(L, 1) != 0.0):
                raise ValueError("cov_chols must be lower triangular")
            if not np.all(np.diagonal(L, axis1=1, axis2=2) > 0.0):
                raise ValueError("cov_chols must have strictly positive diagonals")
        object.__setattr__(self, "weights", _readonly(w))
        object.__setattr__(self, "means", _readonly(m))
        object.__setattr__(self, "cov_chols", _readonly(L))

    def __setattr__(self, name, value):
        raise AttributeError("GaussianMixture is immutable")

    def __repr__(self):
        return f"GaussianMixture(K={self.K}, dim={self.dim})"

    def __eq__(self, other):
        if not isinstance(other, GaussianMixture):
            return NotImplemented
        return (np.array_equal(self.weights, other.weights)
                and np.array_equal(self.means, other.means)
                and np.array_equal(self.cov_chols, other.cov_chols))

    __hash__ = None

    @classmethod
    def from_components(cls, weights, components: Sequence[GaussianComponent]):
        comps = list(components)
        dims = {c.dim for c in comps}
        if len(dims) != 1:
            raise ValueError("all components must share one dimension")
        return cls(weights, np.stack([c.mean for c in comps]),
                   np.stack([c.cov_chol for c in comps]))

    @classmethod
    def from_covs(cls, weights, means, covs):
        means = np.asarray(means, dtype=float)
        covs = np.asarray(covs, dtype=float)
        if means.ndim == 1:
            means = means[:, None]
        if covs.ndim == 1:
            covs = covs[:, None, None]
        return cls(weights, means, cholesky_sqrt(covs))

    @property
    def K(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def components(self) -> list[GaussianComponent]:
        return [GaussianComponent(m, L) for m, L in zip(self.means, self.cov_chols)]

    @property
    def covs(self) -> np.ndarray:
        return self.cov_chols @ np.swapaxes(self.cov_chols, 1, 2)

    def replace(self, weights=None, means=None, cov_chols=None, validate=True):
        return GaussianMixture(self.weights if weights is None else weights,
                               self.means if means is None else means,
                               self.cov_chols if cov_chols is None else cov_chols,
                               validate=validate)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw ``n`` samples, shape ``(n, N)``."""
        counts = rng.multinomial(n, self.weights)
        labels = np.repeat(np.arange(self.K), counts)
        z = rng.standard_normal((n, self.dim))
        x = self.means[labels] + np.einsum("nij,nj->ni", self.cov_chols[labels], z)
        return x[rng.permutation(n)]

    def to_json_dict(self) -> dict:
        """Snapshot ``{weights, means, cov_chols}`` with row-major factors.

        Floats go through ``repr`` in the json module, which is the shortest
        string that round-trips, so reloading is bit-exact.
        """
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "cov_chols": self.cov_chols.tolist(),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "GaussianMixture":
        return cls(d["weights"], d["means"], d["cov_chols"])


def _points(mix: GaussianMixture, theta):
    x = np.asarray(theta, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[-1] != mix.dim:
        raise ValueError(f"point has dimension {X.shape[-1]}, mixture has {mix.dim}")
    return X, single


def component_logpdfs(mix: GaussianMixture, X, with_scores=False):
    """Per-component log densities at points ``X`` (shape ``(n, N)``).

    Returns ``logN`` with shape ``(n, K)``; with ``with_scores`` also the
    vectors ``v_i(x) = C_i^{-1}(x - m_i)`` with shape ``(n, K, N)``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n, N = X.shape
    K = mix.K
    logN = np.empty((n, K))
    V = np.empty((n, K, N)) if with_scores else None
    logdet = np.sum(np.log(np.diagonal(mix.cov_chols, axis1=1, axis2=2)), axis=1)
    if N <= 4 and not with_scores:
        # many points in low dimension (grids): batch over components
        eye = np.eye(N)
        Linv = np.stack([solve_triangular(L, eye, lower=True, check_finite=False)
                         for L in mix.cov_chols])
        step = max(1, 2_000_000 // (K * N))
        for a in range(0, n, step):
            D = X[None, a:a + step, :] - mix.means[:, None, :]
            Z = D @ np.swapaxes(Linv, 1, 2)
            logN[a:a + step] = (-0.5 * np.sum(Z * Z, axis=2) - logdet[:, None]).T
        logN -= 0.5 * N * LOG_2PI
        return logN, V
    for i in range(K):
        L = mix.cov_chols[i]
        D = (X - mix.means[i]).T
        Z = solve_triangular(L, D, lower=True, check_finite=False)
        logN[:, i] = -0.5 * np.sum(Z * Z, axis=0) - logdet[i] - 0.5 * N * LOG_2PI
        if with_scores:
            V[:, i, :] = solve_triangular(L, Z, lower=True, trans="T", check_finite=False).T
    return logN, V


def _logsumexp_rows(a):
    m = np.max(a, axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return np.log(np.sum(np.exp(a - m), axis=1)) + m[:, 0]


def gm_logpdf(mix: GaussianMixture, theta):
    """``log sum_k w_k N(theta; m_k, C_k)`` via log-sum-exp.

    ``theta`` may be one point ``(N,)`` or a batch ``(n, N)``.
    """
    X, single = _points(mix, theta)
    logN, _ = component_logpdfs(mix, X)
    with np.errstate(divide="ignore"):
        logw = np.log(mix.weights)
    out = _logsumexp_rows(logN + logw)
    return float(out[0]) if single else out


def _responsibilities(mix, logN):
    with np.errstate(divide="ignore"):
        lw = logN + np.log(mix.weights)
    lse = logsumexp(lw, axis=1, keepdims=True)
    return np.exp(lw - lse), lse[:, 0]


def gm_score(mix: GaussianMixture, theta):
    """Gradient of ``log rho`` : ``-(sum_i w_i N_i v_i) / rho``."""
    X, single = _points(mix, theta)
    logN, V = component_logpdfs(mix, X, with_scores=True)
    p, _ = _responsibilities(mix, logN)
    out = -np.einsum("nk,nkd->nd", p, V)
    return out[0] if single else out


def component_scores(mix: GaussianMixture, theta):
    """``v_i(theta) = C_i^{-1}(theta - m_i)`` for every component, shape ``(K, N)``."""
    X, single = _points(mix, theta)
    if not single:
        raise ValueError("component_scores takes a single point")
    _, V = component_logpdfs(mix, X, with_scores=True)
    return V[0]


def marginal(mix: GaussianMixture, indices: Iterable[int]) -> GaussianMixture:
    """Marginal mixture over the ordered coordinate subset ``indices``.

    The restricted covariance ``L[idx] L[idx]^T`` is refactorized through a
    QR decomposition of ``L[idx]^T`` so the full covariance is never formed.
    """
    idx = [int(i) for i in indices]
    if len(set(idx)) != len(idx):
        raise ValueError("indices must be distinct")
    if any(i < 0 or i >= mix.dim for i in idx):
        raise IndexError(f"indices out of range for dimension {mix.dim}")
    means = mix.means[:, idx]
    chols = np.empty((mix.K, len(idx), len(idx)))
    for k in range(mix.K):
        rows = mix.cov_chols[k][idx, :]
        r = np.linalg.qr(rows.T, mode="r")
        Lk = r.T
        signs = np.sign(np.diag(Lk))
        signs[signs == 0] = 1.0
        chols[k] = np.tril(Lk * signs)
    return GaussianMixture(mix.weights, means, chols)
