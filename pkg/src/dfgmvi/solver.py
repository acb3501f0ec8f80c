"""Derivative-free Gaussian-mixture natural-gradient iteration.

One step updates every component in the order precision, mean, weight:

* ``C^{-1} <- C^{-1} + dt (E[hess Phi] + S_k - C^{-1})``
* ``m <- m - dt C_new (E[grad Phi] + grad log rho(m))``
* ``log w <- log w - dt (E[Phi] + log rho(m))``

followed by weight normalization with a floor.  All quadrature data come
from the mixture at the start of the step; only the mean update sees the
fresh covariance.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .exceptions import ForwardMapError
from .mixture import GaussianMixture, chol_from_precision
from .quadrature import (
    DEFAULT_ALPHA,
    QuadratureData,
    assemble_quadrature,
    expect_grad_phi,
    expect_hess_phi,
    expect_phi,
    mixture_mean_terms,
    precision_from_chol,
    quadrature_points,
)

__all__ = ["SolverConfig", "SolverTrace", "StepTerms", "step", "normalize_weights", "run",
           "stationarity_residuals", "initial_mixture", "step_terms"]

INIT_POLICIES = ("identity", "prior")


@dataclass(frozen=True)
class SolverConfig:
    """Hyperparameters of the iteration.

    ``init`` selects the component covariances of the initial mixture:
    ``"identity"`` (default) or ``"prior"`` (the problem's init covariance).
    Means are always drawn from the problem's init Gaussian and weights are
    uniform.
    """

    dt: float = 0.5
    alpha: float = DEFAULT_ALPHA
    K: int = 40
    n_iters: int = 200
    weight_floor: float = 1e-8
    rng_seed: int = 0
    init: str = "identity"
    snapshot_every: int = 1

    def __post_init__(self):
        if not 0.0 < self.dt < 1.0:
            raise ValueError(f"dt must lie in (0, 1), got {self.dt}")
        if not self.alpha > 0.0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if int(self.K) != self.K or self.K < 1:
            raise ValueError(f"K must be a positive integer, got {self.K}")
        if int(self.n_iters) != self.n_iters or self.n_iters < 0:
            raise ValueError(f"n_iters must be a nonnegative integer, got {self.n_iters}")
        if not 0.0 < self.weight_floor < 1.0 / self.K:
            raise ValueError(f"weight_floor must lie in (0, 1/K), got {self.weight_floor}")
        if self.init not in INIT_POLICIES:
            raise ValueError(f"init must be one of {INIT_POLICIES}, got {self.init!r}")
        if int(self.snapshot_every) != self.snapshot_every or self.snapshot_every < 1:
            raise ValueError("snapshot_every must be a positive integer")


@dataclass
class StepTerms:
    """Everything a step needs, evaluated at the time-t mixture."""

    quad: QuadratureData
    precision: np.ndarray     # (K, N, N)
    hess_phi: np.ndarray      # (K, N, N)
    grad_phi: np.ndarray      # (K, N)
    e_phi: np.ndarray         # (K,)
    log_rho: np.ndarray       # (K,)
    score: np.ndarray         # (K, N)
    S: np.ndarray             # (K, N, N)

    @property
    def hessian(self):
        return self.hess_phi + self.S - self.precision

    @property
    def gradient(self):
        return self.grad_phi + self.score

    def residuals(self) -> dict:
        g = self.gradient
        H = self.hessian
        level = self.log_rho + self.e_phi
        return {
            "grad_norm": np.linalg.norm(g, axis=1),
            "hess_norm": np.linalg.norm(H, axis=(1, 2)),
            "spread": float(level.max() - level.min()),
        }


def _evaluate_forward(F, points):
    """Evaluate ``F`` on ``(K, P, N)`` points, attributing failures to components."""
    K = points.shape[0]
    try:
        vals = np.asarray(F(points), dtype=float)
    except ForwardMapError:
        raise
    except Exception as exc:
        comp = None
        for k in range(K):
            try:
                F(points[k])
            except Exception:
                comp = k
                break
        raise ForwardMapError(f"forward map failed: {exc}", component=comp) from exc
    if vals.ndim != 3 or vals.shape[:2] != points.shape[:2]:
        raise ForwardMapError(f"forward map returned shape {vals.shape}, "
                              f"expected {points.shape[:2]} + (Nx,)")
    bad = ~np.all(np.isfinite(vals), axis=(1, 2))
    if np.any(bad):
        k = int(np.flatnonzero(bad)[0])
        raise ForwardMapError("forward map produced non-finite values", component=k)
    return vals


def step_terms(mix: GaussianMixture, F: Callable, alpha: float = DEFAULT_ALPHA) -> StepTerms:
    """Quadrature and mixture terms for all components; ``(2N+1) K`` forward calls."""
    L = mix.cov_chols
    pts = quadrature_points(mix.means, L, alpha)
    q = assemble_quadrature(_evaluate_forward(F, pts), alpha)
    log_rho, score, S = mixture_mean_terms(mix)
    return StepTerms(
        quad=q,
        precision=precision_from_chol(L),
        hess_phi=expect_hess_phi(L, q),
        grad_phi=expect_grad_phi(L, q),
        e_phi=expect_phi(q),
        log_rho=log_rho,
        score=score,
        S=S,
    )


def normalize_weights(log_w, floor: float = 1e-8) -> np.ndarray:
    """Exponentiate with max-subtraction, clamp at ``floor``, renormalize."""
    log_w = np.asarray(log_w, dtype=float)
    if not np.all(np.isfinite(log_w)):
        raise ValueError("log weights must be finite")
    w = np.exp(log_w - log_w.max())
    w /= w.sum()
    w = np.maximum(w, floor)
    return w / w.sum()


def _apply(mix: GaussianMixture, terms: StepTerms, cfg: SolverConfig) -> GaussianMixture:
    dt = cfg.dt
    new_prec = terms.precision + dt * terms.hessian
    L_new = chol_from_precision(new_prec)
    g = terms.gradient
    Lt_g = np.einsum("kji,kj->ki", L_new, g)
    means = mix.means - dt * np.einsum("kij,kj->ki", L_new, Lt_g)
    with np.errstate(divide="ignore"):
        log_w = np.log(mix.weights)
    log_w = log_w - dt * (terms.e_phi + terms.log_rho)
    w = normalize_weights(log_w, cfg.weight_floor)
    return GaussianMixture(w, means, np.tril(L_new), validate=False)


def step(mix: GaussianMixture, F: Callable, cfg: SolverConfig) -> GaussianMixture:
    """One iteration of the update; raises ``PositivityLost`` or ``ForwardMapError``."""
    return _apply(mix, step_terms(mix, F, cfg.alpha), cfg)


def stationarity_residuals(mix: GaussianMixture, F: Callable, cfg: SolverConfig) -> dict:
    """Per-component ``|g_k|``, ``|H_k|_F`` and the spread of ``log rho(m_k) + E[Phi]``."""
    return step_terms(mix, F, cfg.alpha).residuals()


def initial_mixture(problem, cfg: SolverConfig) -> GaussianMixture:
    rng = np.random.default_rng(cfg.rng_seed)
    mean0 = np.atleast_1d(np.asarray(problem.init_mean, dtype=float))
    cov0 = np.atleast_2d(np.asarray(problem.init_cov, dtype=float))
    L0 = np.linalg.cholesky(cov0)
    z = rng.standard_normal((cfg.K, mean0.size))
    means = mean0 + z @ L0.T
    if cfg.init == "prior":
        chols = np.broadcast_to(L0, (cfg.K,) + L0.shape)
    else:
        chols = np.broadcast_to(np.eye(mean0.size), (cfg.K, mean0.size, mean0.size))
    return GaussianMixture(np.full(cfg.K, 1.0 / cfg.K), means, chols)


@dataclass
class SolverTrace:
    """History of a run.

    ``snapshots[j]`` is the mixture after ``snapshot_iters[j]`` steps.
    ``residuals[t]`` holds the stationarity residuals of the iterate after
    ``t`` steps; those of the final iterate cost one extra quadrature sweep,
    counted in ``diagnostic_eval_count`` rather than ``f_eval_count``.
    """

    snapshots: list = field(default_factory=list)
    snapshot_iters: list = field(default_factory=list)
    weights: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    wall_times: list = field(default_factory=list)
    f_eval_count: int = 0
    diagnostic_eval_count: int = 0

    @property
    def final(self) -> GaussianMixture:
        return self.snapshots[-1]

    @property
    def n_steps(self) -> int:
        return len(self.weights) - 1


def run(problem, cfg: SolverConfig, init: Optional[GaussianMixture] = None,
        callback: Optional[Callable] = None, final_residuals: bool = True) -> SolverTrace:
    """Initialize per ``cfg`` (unless ``init`` is given) and iterate ``n_iters`` times.

    ``callback(t, mix)`` is invoked for every iterate including the initial one.
    """
    F = problem.forward
    mix = initial_mixture(problem, cfg) if init is None else init
    trace = SolverTrace()
    per_sweep = (2 * mix.dim + 1) * mix.K

    def record(t, m):
        trace.weights.append(np.array(m.weights))
        if t % cfg.snapshot_every == 0 or t == cfg.n_iters:
            trace.snapshots.append(m)
            trace.snapshot_iters.append(t)
        if callback is not None:
            callback(t, m)

    record(0, mix)
    for t in range(1, cfg.n_iters + 1):
        t0 = time.perf_counter()
        terms = step_terms(mix, F, cfg.alpha)
        trace.f_eval_count += per_sweep
        trace.residuals.append(terms.residuals())
        mix = _apply(mix, terms, cfg)
        trace.wall_times.append(time.perf_counter() - t0)
        record(t, mix)
    if final_residuals:
        trace.residuals.append(step_terms(mix, F, cfg.alpha).residuals())
        trace.diagnostic_eval_count += per_sweep
    return trace
