"""Comparison methods: gradient-based mixture flows, BBVI and ensemble MCMC.

All mixture methods share the update skeleton of the natural gradient flow
(precision, then mean with the fresh covariance, then log weight) and differ
in how the Gaussian expectations are approximated and in the time step
policy.  They need ``grad Phi`` and ``hess Phi`` (``AnalyticDerivatives``)
except BBVI and the stretch move, which only evaluate ``Phi``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .exceptions import PositivityLost
from .mixture import GaussianMixture, chol_from_precision, cholesky_sqrt, component_logpdfs, symmetrize, _responsibilities
from .quadrature import precision_from_chol
from .solver import normalize_weights

__all__ = [
    "Quadrature",
    "MEANPOINT",
    "UNSCENTED",
    "montecarlo",
    "mixture_log_terms",
    "ngf_expectations",
    "ngf_step",
    "adaptive_dt",
    "spectral_norm",
    "wgf_step",
    "bbvi_step",
    "stretch_move",
    "BaselineTrace",
    "run_ngf",
    "run_wgf",
    "run_bbvi",
    "run_stretch",
    "WGF_DT",
]

WGF_DT = {"A": 1.4e-1, "B": 5e-3, "C": 5e-3, "D": 4e-3, "E": 8e-4}


@dataclass(frozen=True)
class Quadrature:
    """Gaussian quadrature rule in standardized coordinates.

    ``kind`` is ``meanpoint``, ``unscented`` or ``montecarlo``; Monte Carlo
    draws ``J`` fresh standard normal points per component on each call.
    """

    kind: str
    J: int = 20

    def __post_init__(self):
        if self.kind not in ("meanpoint", "unscented", "montecarlo"):
            raise ValueError(f"unknown quadrature {self.kind!r}")
        if self.kind == "montecarlo" and self.J < 1:
            raise ValueError("Monte Carlo quadrature needs J >= 1")

    def nodes(self, n: int, K: int, rng: Optional[np.random.Generator]):
        """Standardized nodes ``(K, P, n)`` and weights ``(P,)``.

        The unscented rule uses unit spread (``alpha = 1, kappa = 0``): nodes
        ``+- sqrt(n) e_i`` with weights ``1/(2n)`` and a zero-weight center,
        which is exact for polynomials of degree three.
        """
        if self.kind == "meanpoint":
            return np.zeros((K, 1, n)), np.ones(1)
        if self.kind == "unscented":
            eye = np.sqrt(n) * np.eye(n)
            z = np.concatenate([np.zeros((1, n)), eye, -eye])
            w = np.concatenate([[0.0], np.full(2 * n, 1.0 / (2 * n))])
            return np.broadcast_to(z, (K,) + z.shape), w
        if rng is None:
            raise ValueError("Monte Carlo quadrature needs an rng")
        return rng.standard_normal((K, self.J, n)), np.full(self.J, 1.0 / self.J)


MEANPOINT = Quadrature("meanpoint")
UNSCENTED = Quadrature("unscented")


def montecarlo(J: int = 20) -> Quadrature:
    return Quadrature("montecarlo", J)


def mixture_log_terms(mix: GaussianMixture, X, hessian=True):
    """Exact ``log rho``, its gradient and Hessian at points ``X (n, N)``.

    ``hess log rho = Cov_p(v) - sum_i p_i C_i^{-1}`` with responsibilities
    ``p_i`` and ``v_i = C_i^{-1}(x - m_i)``.
    """
    logN, V = component_logpdfs(mix, X, with_scores=True)
    p, log_rho = _responsibilities(mix, logN)
    vbar = np.einsum("nk,nkd->nd", p, V)
    if not hessian:
        return log_rho, -vbar, None
    D = V - vbar[:, None, :]
    cov_v = np.swapaxes(D * p[:, :, None], 1, 2) @ D
    prec = precision_from_chol(mix.cov_chols)
    H = cov_v - np.einsum("nk,kde->nde", p, prec)
    return log_rho, -vbar, symmetrize(H)


def _points(mix, quad, rng):
    z, w = quad.nodes(mix.dim, mix.K, rng)
    pts = mix.means[:, None, :] + np.einsum("kij,kpj->kpi", mix.cov_chols, z)
    return pts, w


@dataclass
class Expectations:
    """Per-component expectations of ``log rho + Phi`` and its derivatives."""

    value: np.ndarray   # (K,)
    grad: np.ndarray    # (K, N)
    hess: np.ndarray    # (K, N, N)


def ngf_expectations(mix: GaussianMixture, phi: Callable, derivs, quad_phi: Quadrature,
                     quad_log: Quadrature, rng=None, need_value=True) -> Expectations:
    """Expectations with separately chosen rules for the ``Phi`` and ``log rho`` terms."""
    K, N = mix.K, mix.dim
    pts, w = _points(mix, quad_phi, rng)
    flat = pts.reshape(-1, N)
    val = (phi(flat).reshape(K, -1) @ w) if need_value else np.zeros(K)
    g = np.einsum("kpn,p->kn", derivs.grad(flat).reshape(K, -1, N), w)
    H = np.einsum("kpnm,p->knm", derivs.hess(flat).reshape(K, -1, N, N), w)
    if quad_log is quad_phi or (quad_log == quad_phi and quad_log.kind != "montecarlo"):
        lpts, lw = pts, w
    else:
        lpts, lw = _points(mix, quad_log, rng)
    lr, ls, lh = mixture_log_terms(mix, lpts.reshape(-1, N))
    val = val + lr.reshape(K, -1) @ lw
    g = g + np.einsum("kpn,p->kn", ls.reshape(K, -1, N), lw)
    H = H + np.einsum("kpnm,p->knm", lh.reshape(K, -1, N, N), lw)
    return Expectations(val, g, symmetrize(H))


def spectral_norm(M, tol: float = 1e-3, max_iter: int = 2000, rng=None) -> float:
    """2-norm of a square matrix by power iteration on ``M^T M``.

    Stops once the eigen-residual of ``M^T M`` is below ``tol`` relative to the
    Rayleigh quotient; successive-estimate stopping stalls early when the two
    largest singular values are close.
    """
    M = np.asarray(M, dtype=float)
    n = M.shape[0]
    if not np.any(M):
        return 0.0
    rng = np.random.default_rng(0) if rng is None else rng
    G = M.T @ M
    x = rng.standard_normal(n)
    x /= np.linalg.norm(x)
    mu = 0.0
    for _ in range(max_iter):
        y = G @ x
        mu = float(x @ y)
        if mu <= 0.0:
            return 0.0
        if np.linalg.norm(y - mu * x) <= tol * mu:
            break
        x = y / np.linalg.norm(y)
    return float(np.sqrt(mu))


def adaptive_dt(mix: GaussianMixture, hess_expect, dt_max: float = 0.5, beta: float = 0.99) -> float:
    """``min(dt_max, beta / max_k |C_k E_k|_2)``."""
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must lie in (0, 1)")
    covs = mix.covs
    worst = max(spectral_norm(covs[k] @ hess_expect[k]) for k in range(mix.K))
    if worst == 0.0:
        return float(dt_max)
    return float(min(dt_max, beta / worst))


def _log_weights(mix):
    with np.errstate(divide="ignore"):
        return np.log(mix.weights)


def ngf_step(mix: GaussianMixture, phi, derivs, dt: Optional[float] = None,
             quad_phi: Quadrature = MEANPOINT, quad_log: Optional[Quadrature] = None,
             rng=None, diagonal=False, dt_max=0.5, beta=0.99, weight_floor=1e-8):
    """Forward-Euler step of the natural gradient flow with exact derivatives.

    ``dt=None`` selects the adaptive step.  ``diagonal`` keeps diagonal
    covariances by projecting the precision update onto its diagonal.
    Returns ``(new_mix, dt_used)``; raises ``PositivityLost`` if the new
    precision is not positive definite.
    """
    quad_log = quad_phi if quad_log is None else quad_log
    E = ngf_expectations(mix, phi, derivs, quad_phi, quad_log, rng)
    H = E.hess
    if diagonal:
        H = H * np.eye(mix.dim)
    if dt is None:
        dt = adaptive_dt(mix, H, dt_max, beta)
    prec = precision_from_chol(mix.cov_chols) + dt * H
    if diagonal:
        d = np.diagonal(prec, axis1=1, axis2=2)
        if not np.all(d > 0):
            raise PositivityLost("diagonal precision lost positivity",
                                 index=int(np.flatnonzero(~np.all(d > 0, axis=1))[0]))
        L = np.sqrt(1.0 / d)[:, :, None] * np.eye(mix.dim)
    else:
        L = chol_from_precision(prec)
    covs = L @ np.swapaxes(L, 1, 2)
    means = mix.means - dt * np.einsum("kij,kj->ki", covs, E.grad)
    w = normalize_weights(_log_weights(mix) - dt * E.value, weight_floor)
    return GaussianMixture(w, means, np.tril(L), validate=False), dt


def wgf_step(mix: GaussianMixture, phi, derivs, dt: float, quad: Quadrature = MEANPOINT,
             rng=None):
    """Wasserstein flow step: ``C^{-1} <- M C^{-1} M`` with ``M = I + dt E_k``.

    The mean moves along ``-E[grad(log rho + Phi)]`` and weights are kept.
    """
    E = ngf_expectations(mix, phi, derivs, quad, quad, rng, need_value=False)
    n = mix.dim
    M = np.eye(n) + dt * E.hess
    sv = np.linalg.svd(M, compute_uv=False)
    if np.any(sv[:, -1] <= 1e-14 * np.maximum(sv[:, 0], 1.0)):
        k = int(np.flatnonzero(sv[:, -1] <= 1e-14 * np.maximum(sv[:, 0], 1.0))[0])
        raise PositivityLost("WGF factor I + dt E is singular", index=k)
    prec = precision_from_chol(mix.cov_chols)
    new_prec = symmetrize(M @ prec @ M)
    L = chol_from_precision(new_prec)
    means = mix.means - dt * E.grad
    return GaussianMixture(mix.weights, means, np.tril(L), validate=False), dt


def bbvi_step(mix: GaussianMixture, phi, J: int = 5, rng=None, dt: Optional[float] = None,
              dt_max=0.5, beta=0.99, max_halvings=20, weight_floor=1e-8):
    """Monte Carlo step of the integrated-by-parts natural gradient flow.

    ``m' = m - dt E[(x - m) f]``, ``C' = C - dt E[((x - m)(x - m)^T - C_hat) f]``
    with ``f = log rho + Phi`` and ``C_hat`` the empirical covariance of the
    ``J`` samples; ``log w' = log w - dt E[f]``.  With ``dt=None`` the step is
    ``min(dt_max, beta / max_k |G_k C_k^{-1}|_2)``; if the covariance still
    fails to factorize the step is halved, at most ``max_halvings`` times.
    Returns ``(new_mix, dt_used)``.
    """
    if J < 2:
        raise ValueError("BBVI needs J >= 2")
    if rng is None:
        raise ValueError("bbvi_step needs an rng")
    K, N = mix.K, mix.dim
    z = rng.standard_normal((K, J, N))
    X = mix.means[:, None, :] + np.einsum("kij,kpj->kpi", mix.cov_chols, z)
    flat = X.reshape(-1, N)
    lr, _, _ = mixture_log_terms(mix, flat, hessian=False)
    f = (lr + phi(flat)).reshape(K, J)
    D = X - mix.means[:, None, :]
    Dc = X - X.mean(axis=1, keepdims=True)
    C_hat = np.einsum("kpi,kpj->kij", Dc, Dc) / (J - 1)
    outer = np.einsum("kpi,kpj->kpij", D, D) - C_hat[:, None]
    G = symmetrize(np.einsum("kpij,kp->kij", outer, f) / J)
    gm = np.einsum("kpi,kp->ki", D, f) / J
    ef = f.mean(axis=1)
    covs = mix.covs
    if dt is None:
        prec = precision_from_chol(mix.cov_chols)
        worst = max(spectral_norm(G[k] @ prec[k]) for k in range(K))
        dt = dt_max if worst == 0 else min(dt_max, beta / worst)
    for _ in range(max_halvings + 1):
        try:
            L = cholesky_sqrt(covs - dt * G)
            break
        except PositivityLost:
            dt *= 0.5
    else:
        raise PositivityLost("BBVI covariance update failed after halving the step")
    means = mix.means - dt * gm
    w = normalize_weights(_log_weights(mix) - dt * ef, weight_floor)
    return GaussianMixture(w, means, L, validate=False), dt


def stretch_move(particles, phi, a: float = 2.0, rng=None, phi_values=None):
    """One sequential sweep of the affine-invariant stretch move.

    Walker ``j`` picks a partner ``i != j`` among the current ensemble, draws
    ``z`` with density proportional to ``1/sqrt(z)`` on ``[1/a, a]`` and
    proposes ``Y = X_i + z (X_j - X_i)``, accepted with probability
    ``min(1, z^{N-1} exp(Phi(X_j) - Phi(Y)))``.
    Returns ``(particles, phi_values, n_accepted)``.
    """
    if a <= 1:
        raise ValueError("stretch parameter a must exceed 1")
    if rng is None:
        raise ValueError("stretch_move needs an rng")
    X = np.array(particles, dtype=float)
    J, N = X.shape
    if J < 2:
        raise ValueError("need at least two walkers")
    phis = np.array(phi(X) if phi_values is None else phi_values, dtype=float)
    acc = 0
    for j in range(J):
        i = rng.integers(J - 1)
        i += i >= j
        z = ((a - 1.0) * rng.random() + 1.0) ** 2 / a
        Y = X[i] + z * (X[j] - X[i])
        py = float(phi(Y[None, :])[0])
        log_r = (N - 1) * np.log(z) + phis[j] - py
        if np.log(rng.random()) < log_r:
            X[j] = Y
            phis[j] = py
            acc += 1
    return X, phis, acc


# --------------------------------------------------------------------------
# Runners

@dataclass
class BaselineTrace:
    """Iterates and step sizes of a baseline run (same fields the exporters expect)."""

    snapshots: list = field(default_factory=list)
    snapshot_iters: list = field(default_factory=list)
    weights: list = field(default_factory=list)
    dts: list = field(default_factory=list)
    failure: Optional[str] = None
    failed_at: Optional[int] = None
    phi_eval_count: int = 0
    residuals: list = field(default_factory=list)
    wall_times: list = field(default_factory=list)
    f_eval_count: int = 0
    diagnostic_eval_count: int = 0

    @property
    def final(self):
        return self.snapshots[-1]


def _init_mix(problem, K, seed):
    rng = np.random.default_rng(seed)
    n = problem.n_theta
    L0 = np.linalg.cholesky(np.atleast_2d(problem.init_cov))
    means = np.asarray(problem.init_mean, float) + rng.standard_normal((K, n)) @ L0.T
    return GaussianMixture(np.full(K, 1.0 / K), means,
                           np.broadcast_to(np.eye(n), (K, n, n))), rng


def _drive(step_fn, mix, n_iters, snapshot_every, trace, stop_on_failure=True):
    trace.snapshots.append(mix)
    trace.snapshot_iters.append(0)
    trace.weights.append(np.array(mix.weights))
    for t in range(1, n_iters + 1):
        try:
            mix, dt = step_fn(mix)
        except PositivityLost as exc:
            trace.failure = f"PositivityLost: {exc}"
            trace.failed_at = t
            if stop_on_failure:
                break
            raise
        except np.linalg.LinAlgError as exc:
            trace.failure = f"Diverged: {exc}"
            trace.failed_at = t
            break
        if not (np.all(np.isfinite(mix.means)) and np.all(np.isfinite(mix.cov_chols))):
            trace.failure = "Diverged: non-finite mixture parameters"
            trace.failed_at = t
            break
        trace.dts.append(float(dt))
        trace.weights.append(np.array(mix.weights))
        if t % snapshot_every == 0 or t == n_iters:
            trace.snapshots.append(mix)
            trace.snapshot_iters.append(t)
    return trace


def run_ngf(problem, K=40, n_iters=500, seed=0, dt=None, quad_phi=MEANPOINT, quad_log=None,
            diagonal=False, snapshot_every=1, init=None, dt_max=0.5, beta=0.99):
    """NGF-VI (or NGF-VI-D with ``diagonal``); fixed ``dt`` or adaptive when ``None``."""
    mix, rng = _init_mix(problem, K, seed)
    if init is not None:
        mix = init
    derivs = problem.derivatives
    trace = BaselineTrace()
    return _drive(lambda m: ngf_step(m, problem.phi, derivs, dt, quad_phi, quad_log, rng,
                                     diagonal, dt_max, beta),
                  mix, n_iters, snapshot_every, trace)


def run_wgf(problem, dt, K=40, n_iters=500, seed=0, snapshot_every=1):
    mix, rng = _init_mix(problem, K, seed)
    derivs = problem.derivatives
    return _drive(lambda m: wgf_step(m, problem.phi, derivs, dt),
                  mix, n_iters, snapshot_every, BaselineTrace())


def run_bbvi(problem, K=40, J=5, n_iters=500, seed=0, snapshot_every=1, dt_max=0.5, beta=0.99):
    mix, rng = _init_mix(problem, K, seed)
    trace = BaselineTrace()

    def fn(m):
        trace.phi_eval_count += K * J
        return bbvi_step(m, problem.phi, J, rng, None, dt_max, beta)

    return _drive(fn, mix, n_iters, snapshot_every, trace)


def run_stretch(problem, J=1000, n_iters=500, seed=0, a=2.0, keep_last=10):
    """Stretch-move ensemble from the problem's init Gaussian.

    Returns ``(samples, acceptance_rate)`` where ``samples`` stacks the
    ensembles of the last ``keep_last`` sweeps.
    """
    rng = np.random.default_rng(seed)
    n = problem.n_theta
    L0 = np.linalg.cholesky(np.atleast_2d(problem.init_cov))
    X = np.asarray(problem.init_mean, float) + rng.standard_normal((J, n)) @ L0.T
    phis = problem.phi(X)
    kept = []
    acc = 0
    for t in range(n_iters):
        X, phis, a_t = stretch_move(X, problem.phi, a, rng, phis)
        acc += a_t
        if t >= n_iters - keep_last:
            kept.append(X.copy())
    return np.concatenate(kept, axis=0), acc / (J * max(n_iters, 1))
