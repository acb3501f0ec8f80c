"""Forward problems and the benchmark catalog.

Every least-squares target is described by a vectorized residual map
``F: (..., N) -> (..., Nx)`` with ``Phi = |F|^2 / 2``.  Catalog entries also
carry analytic first and second derivatives of ``F`` (for the
gradient-based baselines), an initialization Gaussian, and a box on which a
reference density can be tabulated.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.linalg import solve_triangular

from .exceptions import PositivityLost, UnsupportedForm
from .metrics import GridDensity, density_from_log, uniform_axes
from .mixture import GaussianMixture, cholesky_sqrt, component_logpdfs, gm_logpdf, _responsibilities

__all__ = [
    "AnalyticDerivatives",
    "ForwardProblem",
    "augmented_map",
    "bimodal_1d",
    "multi_2d",
    "lift_100d",
    "guidelines_targets",
    "transform_problem",
    "get_problem",
    "list_problems",
]


@dataclass(frozen=True)
class AnalyticDerivatives:
    """Vectorized ``grad Phi`` and ``hess Phi``."""

    grad: Callable[[np.ndarray], np.ndarray]
    hess: Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class ForwardProblem:
    """A target density ``exp(-Phi)`` plus everything the runners need.

    ``F`` is ``None`` for targets without least-squares form; then
    ``phi_fn`` must be given and :meth:`forward` raises ``UnsupportedForm``.
    """

    name: str
    n_theta: int
    n_x: Optional[int]
    F: Optional[Callable[[np.ndarray], np.ndarray]]
    init_mean: np.ndarray
    init_cov: np.ndarray
    phi_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None
    F_jac: Optional[Callable] = None
    F_hess: Optional[Callable] = None
    derivs: Optional[AnalyticDerivatives] = None
    box: Optional[tuple] = None
    reference_indices: Optional[tuple] = None
    reference_grid_n: int = 400
    reference_phi: Optional[Callable] = None
    analytic_posterior: Optional[GaussianMixture] = None
    meta: dict = field(default_factory=dict)

    def forward(self, theta):
        if self.F is None:
            raise UnsupportedForm(f"{self.name} has no least-squares form")
        return self.F(np.asarray(theta, dtype=float))

    def phi(self, theta):
        theta = np.asarray(theta, dtype=float)
        if self.phi_fn is not None:
            return self.phi_fn(theta)
        r = self.forward(theta)
        return 0.5 * np.sum(r * r, axis=-1)

    @property
    def derivatives(self) -> AnalyticDerivatives:
        if self.derivs is not None:
            return self.derivs
        if self.F_jac is None or self.F_hess is None:
            raise UnsupportedForm(f"{self.name} has no analytic derivatives")
        return _ls_derivatives(self.F, self.F_jac, self.F_hess)

    @property
    def reference(self):
        """Analytic posterior mixture when known, else the grid reference."""
        if self.analytic_posterior is not None:
            return self.analytic_posterior
        return self.reference_density() if self.box is not None else None

    @property
    def init_distribution(self):
        return self.init_mean, self.init_cov

    def reference_density(self, n=None) -> GridDensity:
        """Reference posterior normalized on the problem's box.

        Lifted problems return the reference of their 2D marginal.
        """
        if self.box is None:
            raise ValueError(f"{self.name} has no reference box")
        n = self.reference_grid_n if n is None else n
        axes = uniform_axes(self.box, n)
        phi = self.reference_phi or self.phi
        return density_from_log(lambda x: -phi(x), axes)


def _ls_derivatives(F, J, H):
    def grad(theta):
        theta = np.asarray(theta, dtype=float)
        return np.einsum("...xn,...x->...n", J(theta), F(theta))

    def hess(theta):
        theta = np.asarray(theta, dtype=float)
        Jt = J(theta)
        return (np.einsum("...xn,...xm->...nm", Jt, Jt)
                + np.einsum("...x,...xnm->...nm", F(theta), H(theta)))

    return AnalyticDerivatives(grad, hess)


def _batch_solve_lower(L, R):
    """Solve ``L X^T = R^T`` for row-stacked right-hand sides ``R (..., n)``."""
    flat = R.reshape(-1, R.shape[-1])
    out = solve_triangular(L, flat.T, lower=True, check_finite=False).T
    return out.reshape(R.shape)


def augmented_map(G, y, sigma_eta, r0, sigma0, *, G_jac=None, G_hess=None,
                  name="augmented", box=None, **kwargs) -> ForwardProblem:
    """Stack whitened data misfit over whitened prior misfit.

    ``F(theta) = [L_eta^{-1}(y - G(theta)); L_0^{-1}(r0 - theta)]`` where
    ``L`` are Cholesky factors of the covariances, which gives
    ``|F|^2 = (y-G)^T S_eta^{-1} (y-G) + (r0-theta)^T S_0^{-1} (r0-theta)``.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    r0 = np.atleast_1d(np.asarray(r0, dtype=float))
    try:
        L_eta = cholesky_sqrt(np.atleast_2d(sigma_eta))
        L_0 = cholesky_sqrt(np.atleast_2d(sigma0))
    except PositivityLost as exc:
        raise ValueError(f"noise and prior covariances must be SPD: {exc}") from None
    ny, n = y.size, r0.size
    if L_eta.shape != (ny, ny) or L_0.shape != (n, n):
        raise ValueError("covariance shapes inconsistent with y and r0")

    def F(theta):
        g = np.asarray(G(theta), dtype=float)
        return np.concatenate([_batch_solve_lower(L_eta, y - g),
                               _batch_solve_lower(L_0, r0 - theta)], axis=-1)

    jac = hess = None
    if G_jac is not None and G_hess is not None:
        Lei = solve_triangular(L_eta, np.eye(ny), lower=True)
        L0i = solve_triangular(L_0, np.eye(n), lower=True)

        def _jac(theta):
            Jg = np.asarray(G_jac(theta), dtype=float)
            top = -np.einsum("ab,...bn->...an", Lei, Jg)
            bot = np.broadcast_to(-L0i, Jg.shape[:-2] + (n, n))
            return np.concatenate([top, bot], axis=-2)

        def _hess(theta):
            Hg = np.asarray(G_hess(theta), dtype=float)
            top = -np.einsum("ab,...bnm->...anm", Lei, Hg)
            bot = np.zeros(Hg.shape[:-3] + (n, n, n))
            return np.concatenate([top, bot], axis=-3)

        jac, hess = _jac, _hess

    kwargs.setdefault("init_mean", r0)
    kwargs.setdefault("init_cov", np.atleast_2d(np.asarray(sigma0, dtype=float)))
    return ForwardProblem(name=name, n_theta=n, n_x=ny + n, F=F, F_jac=jac, F_hess=hess,
                          box=box, **kwargs)


# --------------------------------------------------------------------------
# 1D bimodal problem

BIMODAL_NOISE = {"A": 0.2, "B": 0.5, "C": 1.0, "D": 2.0}
BIMODAL_BOX = {"A": ((-5.0, 5.0),), "B": ((-5.0, 5.0),), "C": ((-5.0, 5.0),),
               "D": ((-6.0, 8.0),)}


def bimodal_1d(case: str) -> ForwardProblem:
    """``G(theta) = theta^2``, ``y = 1``, prior ``N(3, 2^2)``, noise per case."""
    case = case.upper()
    if case not in BIMODAL_NOISE:
        raise ValueError(f"unknown bimodal case {case!r}")
    sigma = BIMODAL_NOISE[case]
    return augmented_map(
        G=lambda t: t**2,
        y=[1.0], sigma_eta=[[sigma**2]], r0=[3.0], sigma0=[[4.0]],
        G_jac=lambda t: (2.0 * t)[..., None],
        G_hess=lambda t: np.full(t.shape[:-1] + (1, 1, 1), 2.0),
        name=f"bimodal1d:{case}", box=BIMODAL_BOX[case],
        reference_grid_n=2001,
    )


# --------------------------------------------------------------------------
# 2D catalog

CASE_A_MATRIX = np.array([[1.0, 1.0], [1.0, 2.0]])
CASE_A_DATA = np.array([0.0, 1.0])
CASE_B_DATA = np.array([4.2297, 4.2297, 0.5, 0.0])

MULTI_BOX = {
    "A": ((-4.0, 4.0), (-4.0, 4.0)),
    "B": ((-4.0, 4.0), (-4.0, 4.0)),
    "C": ((-4.0, 4.0), (-4.0, 4.0)),
    "D": ((-4.0, 4.0), (-4.0, 4.0)),
    "E": ((-4.0, 4.0), (-4.0, 4.0)),
}


def _zeros_like_hess(theta, nx):
    return np.zeros(theta.shape[:-1] + (nx, 2, 2))


def _case_a():
    A, y = CASE_A_MATRIX, CASE_A_DATA

    def F(t):
        return y - t @ A.T

    def J(t):
        return np.broadcast_to(-A, t.shape[:-1] + (2, 2))

    def H(t):
        return _zeros_like_hess(t, 2)

    AtA = A.T @ A
    post = GaussianMixture.from_covs([1.0], [np.linalg.solve(A, y)], [np.linalg.inv(AtA)])
    return F, J, H, 2, {"analytic_posterior": post}


def _case_b():
    y = CASE_B_DATA

    def F(t):
        t1, t2 = t[..., 0], t[..., 1]
        return y - np.stack([(t1 - t2) ** 2, (t1 + t2) ** 2, t1, t2], axis=-1)

    def J(t):
        t1, t2 = t[..., 0], t[..., 1]
        d, s = t1 - t2, t1 + t2
        one, zero = np.ones_like(t1), np.zeros_like(t1)
        rows = [
            np.stack([-2 * d, 2 * d], -1),
            np.stack([-2 * s, -2 * s], -1),
            np.stack([-one, zero], -1),
            np.stack([zero, -one], -1),
        ]
        return np.stack(rows, axis=-2)

    def H(t):
        out = _zeros_like_hess(t, 4)
        out[..., 0, :, :] = -np.array([[2.0, -2.0], [-2.0, 2.0]])
        out[..., 1, :, :] = -np.array([[2.0, 2.0], [2.0, 2.0]])
        return out

    return F, J, H, 4, {}


def _case_c(scale=0.3):
    def F(t):
        return ((1.0 - np.sum(t * t, axis=-1)) / scale)[..., None]

    def J(t):
        return (-2.0 * t / scale)[..., None, :]

    def H(t):
        out = _zeros_like_hess(t, 1)
        out[..., 0, :, :] = -2.0 * np.eye(2) / scale
        return out

    return F, J, H, 1, {}


def _case_d():
    s = 1.0 / np.sqrt(10.0)

    def F(t):
        t1, t2 = t[..., 0], t[..., 1]
        return s * np.stack([-10.0 * (t2 - t1**2), 1.0 - t1], axis=-1)

    def J(t):
        t1 = t[..., 0]
        zero = np.zeros_like(t1)
        return s * np.stack([np.stack([20.0 * t1, -10.0 * np.ones_like(t1)], -1),
                             np.stack([-np.ones_like(t1), zero], -1)], axis=-2)

    def H(t):
        out = _zeros_like_hess(t, 2)
        out[..., 0, 0, 0] = 20.0 * s
        return out

    return F, J, H, 2, {}


def _case_e(scale=0.3):
    y1 = np.log(101.0)

    def Q(t):
        t1, t2 = t[..., 0], t[..., 1]
        return 100.0 * (t2 - t1**2) ** 2 + (1.0 - t1) ** 2

    def F(t):
        with np.errstate(divide="ignore"):
            f1 = y1 - np.log(Q(t)) / scale
        return np.stack([f1, -t[..., 0], -t[..., 1]], axis=-1)

    def dQ(t):
        t1, t2 = t[..., 0], t[..., 1]
        return np.stack([-400.0 * t1 * (t2 - t1**2) - 2.0 * (1.0 - t1),
                         200.0 * (t2 - t1**2)], axis=-1)

    def d2Q(t):
        t1, t2 = t[..., 0], t[..., 1]
        h11 = -400.0 * (t2 - t1**2) + 800.0 * t1**2 + 2.0
        h12 = -400.0 * t1
        h22 = np.full_like(t1, 200.0)
        return np.stack([np.stack([h11, h12], -1), np.stack([h12, h22], -1)], axis=-2)

    def J(t):
        q = Q(t)[..., None]
        g1 = -dQ(t) / (scale * q)
        eye = np.broadcast_to(-np.eye(2), t.shape[:-1] + (2, 2))
        return np.concatenate([g1[..., None, :], eye], axis=-2)

    def H(t):
        q = Q(t)[..., None, None]
        g = dQ(t)
        h1 = -(d2Q(t) / q - np.einsum("...i,...j->...ij", g, g) / q**2) / scale
        out = _zeros_like_hess(t, 3)
        out[..., 0, :, :] = h1
        return out

    return F, J, H, 3, {}


_CASES = {"A": _case_a, "B": _case_b, "C": _case_c, "D": _case_d, "E": _case_e}


def multi_2d(case: str) -> ForwardProblem:
    """2D benchmark targets: Gaussian, four modes, circle, Rosenbrock, double banana."""
    case = case.upper()
    if case not in _CASES:
        raise ValueError(f"unknown 2D case {case!r}")
    F, J, H, nx, extra = _CASES[case]()
    return ForwardProblem(name=f"multi2d:{case}", n_theta=2, n_x=nx, F=F, F_jac=J, F_hess=H,
                          init_mean=np.zeros(2), init_cov=np.eye(2), box=MULTI_BOX[case],
                          **extra)


def lift_100d(base, n_theta: int = 100) -> ForwardProblem:
    """Append ``theta^c - 1 (theta_1 + theta_2)`` residuals to a 2D problem.

    The posterior marginal on the first two coordinates equals the base
    posterior exactly, so the base reference density is reused.
    """
    if isinstance(base, str):
        base = multi_2d(base)
    if base.n_theta != 2:
        raise ValueError("lift_100d expects a 2D base problem")
    if n_theta < 2:
        raise ValueError("n_theta must be at least 2")
    if n_theta == 2:
        return base
    nc = n_theta - 2
    Fb, Jb, Hb = base.F, base.F_jac, base.F_hess

    def F(t):
        head = t[..., :2]
        return np.concatenate([Fb(head), t[..., 2:] - head.sum(axis=-1, keepdims=True)],
                              axis=-1)

    def J(t):
        head = t[..., :2]
        jb = Jb(head)
        batch = t.shape[:-1]
        top = np.concatenate([jb, np.zeros(batch + (jb.shape[-2], nc))], axis=-1)
        bot = np.concatenate([np.broadcast_to(-np.ones((nc, 2)), batch + (nc, 2)),
                              np.broadcast_to(np.eye(nc), batch + (nc, nc))], axis=-1)
        return np.concatenate([top, bot], axis=-2)

    def H(t):
        hb = Hb(t[..., :2])
        batch = t.shape[:-1]
        out = np.zeros(batch + (hb.shape[-3] + nc, n_theta, n_theta))
        out[..., :hb.shape[-3], :2, :2] = hb
        return out

    case = base.name.split(":")[-1]
    return ForwardProblem(
        name=f"lift100d:{case}" if n_theta == 100 else f"lift{n_theta}d:{case}",
        n_theta=n_theta, n_x=base.n_x + nc, F=F, F_jac=J, F_hess=H,
        init_mean=np.zeros(n_theta), init_cov=np.eye(n_theta), box=base.box,
        reference_indices=(0, 1), reference_phi=base.phi,
        meta={"base": base.name},
    )


# --------------------------------------------------------------------------
# Targets of the quadrature-combination study

GM3_WEIGHTS = np.array([0.3, 0.4, 0.3])
GM3_MEANS = np.array([[1.0, 2.0], [2.0, 1.0], [-1.0, -1.0]])
GM3_COV = np.eye(2) / 4.0


def gm3_target_mixture() -> GaussianMixture:
    return GaussianMixture.from_covs(GM3_WEIGHTS, GM3_MEANS, np.stack([GM3_COV] * 3))


def guidelines_targets():
    """The 3-mode Gaussian-mixture target and the circular target.

    The first has no least-squares form and exposes only ``phi`` and
    analytic derivatives; the second is the circle with scale 0.3.
    """
    target = gm3_target_mixture()

    def phi(t):
        return -gm_logpdf(target, np.atleast_2d(t)).reshape(np.shape(t)[:-1])

    def grad(t):
        t = np.asarray(t, dtype=float)
        X = t.reshape(-1, 2)
        logN, V = component_logpdfs(target, X, with_scores=True)
        p, _ = _responsibilities(target, logN)
        return np.einsum("nk,nkd->nd", p, V).reshape(t.shape)

    def hess(t):
        t = np.asarray(t, dtype=float)
        X = t.reshape(-1, 2)
        logN, V = component_logpdfs(target, X, with_scores=True)
        p, _ = _responsibilities(target, logN)
        vbar = np.einsum("nk,nkd->nd", p, V)
        D = V - vbar[:, None, :]
        cov_v = np.einsum("nk,nkd,nke->nde", p, D, D)
        prec = np.linalg.inv(GM3_COV)
        out = prec[None] - cov_v
        return out.reshape(t.shape + (2,))

    gm3 = ForwardProblem(name="guide:gm3", n_theta=2, n_x=None, F=None, phi_fn=phi,
                         derivs=AnalyticDerivatives(grad, hess),
                         init_mean=np.zeros(2), init_cov=np.eye(2),
                         box=((-4.0, 5.0), (-4.0, 5.0)), analytic_posterior=target)
    F, J, H, nx, _ = _case_c(0.3)
    circle = ForwardProblem(name="guide:circle", n_theta=2, n_x=nx, F=F, F_jac=J, F_hess=H,
                            init_mean=np.zeros(2), init_cov=np.eye(2),
                            box=((-4.0, 4.0), (-4.0, 4.0)))
    return gm3, circle


# --------------------------------------------------------------------------

def transform_problem(problem: ForwardProblem, T, d) -> ForwardProblem:
    """Problem in coordinates ``theta~ = T theta + d``: ``F~(theta~) = F(T^{-1}(theta~ - d))``."""
    T = np.asarray(T, dtype=float)
    d = np.asarray(d, dtype=float)
    lower = np.allclose(T, np.tril(T))
    base_F = problem.F
    base_phi = problem.phi

    def back(tt):
        r = np.asarray(tt, dtype=float) - d
        flat = r.reshape(-1, r.shape[-1]).T
        if lower:
            out = solve_triangular(T, flat, lower=True, check_finite=False)
        else:
            out = np.linalg.solve(T, flat)
        return out.T.reshape(r.shape)

    F = None if base_F is None else (lambda tt: base_F(back(tt)))
    phi_fn = None if problem.phi_fn is None else (lambda tt: base_phi(back(tt)))
    return replace(
        problem, name=f"{problem.name}|affine", F=F, phi_fn=phi_fn, F_jac=None, F_hess=None,
        derivs=None, init_mean=T @ problem.init_mean + d,
        init_cov=T @ problem.init_cov @ T.T, box=None, reference_phi=None,
        analytic_posterior=None,
    )


def get_problem(problem_id: str, **kwargs) -> ForwardProblem:
    """Resolve ids like ``bimodal1d:A``, ``multi2d:E``, ``lift100d:B``, ``guide:gm3``, ``ns``."""
    pid = problem_id.strip()
    family, _, case = pid.partition(":")
    family = family.lower()
    if family == "bimodal1d":
        return bimodal_1d(case)
    if family == "multi2d":
        return multi_2d(case)
    if family.startswith("lift") and family.endswith("d"):
        n = int(family[4:-1]) if family[4:-1] else 100
        return lift_100d(multi_2d(case), kwargs.get("n_theta", n))
    if family == "guide":
        gm3, circle = guidelines_targets()
        if case == "gm3":
            return gm3
        if case == "circle":
            return circle
        raise ValueError(f"unknown guideline target {case!r}")
    if family == "ns":
        from .navier_stokes import ns_problem
        return ns_problem(**kwargs)
    raise ValueError(f"unknown problem id {problem_id!r}")


def list_problems() -> list[str]:
    ids = [f"bimodal1d:{c}" for c in "ABCD"]
    ids += [f"multi2d:{c}" for c in "ABCDE"]
    ids += [f"lift100d:{c}" for c in "ABCDE"]
    ids += ["guide:gm3", "guide:circle", "ns"]
    return ids
