"""Periodic 2D Navier-Stokes in vorticity-streamfunction form.

Pseudo-spectral in space with 2/3-rule dealiasing.  Time stepping is an
integrating-factor Heun (RK2) scheme: diffusion and the uniform background
advection are linear with constant coefficients, so both are integrated
exactly in Fourier space and only the fluctuating advection and the forcing
are stepped explicitly.

The unknown is the vector of Karhunen-Loeve coefficients of the initial
vorticity; the observations are differences ``w(x1, x2) - w(2 pi - x1, x2)``
at a set of points and times.  The whole setup is symmetric under
``w(x) -> -w(2 pi - x1, x2)``, which gives a bimodal posterior.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.fft as sfft

from .exceptions import CFLViolation, ForwardMapError

__all__ = ["NSConfig", "KLBasis", "kl_to_vorticity", "ns_solve", "ns_forward",
           "mirror_coefficients", "mirror_field", "relative_l2_error", "ns_problem",
           "default_obs_points", "NSSetup"]

TWO_PI = 2.0 * np.pi


def default_obs_points(n1: int = 7, n2: int = 5) -> np.ndarray:
    """Equispaced interior lattice of the quadrant ``[0, pi]^2``: ``n1 * n2`` points."""
    x1 = np.pi * np.arange(1, n1 + 1) / (n1 + 1)
    x2 = np.pi * np.arange(1, n2 + 1) / (n2 + 1)
    X1, X2 = np.meshgrid(x1, x2, indexing="ij")
    return np.stack([X1.ravel(), X2.ravel()], axis=1)


@dataclass(frozen=True)
class NSConfig:
    """Flow, discretization and observation settings.

    ``velocity_bound`` is the assumed maximum of the fluctuating velocity
    used for the CFL check; the background velocity is handled exactly by
    the integrating factor and does not enter the bound.
    """

    grid_n: int = 64
    viscosity: float = 0.01
    background_velocity: tuple = (0.0, TWO_PI)
    forcing_amplitude: float = 1.0
    forcing_wavenumber: int = 4
    obs_times: tuple = (0.25, 0.5)
    obs_points: Optional[np.ndarray] = None
    noise_std: float = 0.3
    kl_modes: int = 32
    solver_dt: float = 0.0096
    velocity_bound: float = 5.0
    cfl_safety: float = 0.5
    workers: int = 1
    batch_chunk: int = 64

    def __post_init__(self):
        n = self.grid_n
        if n < 32 or n & (n - 1):
            raise ValueError(f"grid_n must be a power of two >= 32, got {n}")
        if self.viscosity < 0:
            raise ValueError("viscosity must be nonnegative")
        times = tuple(float(t) for t in self.obs_times)
        if not times or any(t <= 0 for t in times) or list(times) != sorted(set(times)):
            raise ValueError("obs_times must be positive and strictly increasing")
        object.__setattr__(self, "obs_times", times)
        pts = default_obs_points() if self.obs_points is None else np.asarray(self.obs_points, float)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] == 0:
            raise ValueError("obs_points must have shape (n, 2)")
        if np.any(pts < 0) or np.any(pts > TWO_PI):
            raise ValueError("obs_points must lie in [0, 2 pi]^2")
        pts = pts.copy()
        pts.setflags(write=False)
        object.__setattr__(self, "obs_points", pts)
        if self.noise_std <= 0:
            raise ValueError("noise_std must be positive")
        if self.kl_modes < 1:
            raise ValueError("kl_modes must be positive")
        if not self.solver_dt > 0:
            raise ValueError("solver_dt must be positive")
        dx = TWO_PI / n
        courant = self.solver_dt * self.velocity_bound / dx
        if courant > self.cfl_safety:
            raise CFLViolation(
                f"solver_dt={self.solver_dt} gives Courant number {courant:.3f} "
                f"> {self.cfl_safety} for velocity bound {self.velocity_bound} on grid {n}")

    @property
    def n_obs(self) -> int:
        return self.obs_points.shape[0] * len(self.obs_times)

    def grid(self) -> np.ndarray:
        return TWO_PI * np.arange(self.grid_n) / self.grid_n


# --------------------------------------------------------------------------
# KL basis

def _canonical_positive(l1, l2):
    return l2 > 0 or (l2 == 0 and l1 > 0)


@dataclass(frozen=True, eq=False)
class KLBasis:
    """Truncated KL basis of the prior with covariance ``(-Laplacian)^{-2}``.

    ``modes[j] = (l1, l2)``; the basis function is ``sin(l.x)/(sqrt(2) pi)``
    when ``l`` is in the upper half-lattice and ``cos(l.x)/(sqrt(2) pi)``
    otherwise, with eigenvalue ``|l|^{-4}``.  Ties in the eigenvalue are broken
    by ``(|l1|, |l2|, l1, l2)``, which keeps mirror pairs ``(l1, l2)``,
    ``(-l1, l2)`` together.
    """

    modes: np.ndarray
    is_sin: np.ndarray
    eigvals: np.ndarray
    prior_var: float = 2.0 * np.pi**2
    mirror_perm: np.ndarray = field(default=None)
    mirror_sign: np.ndarray = field(default=None)

    @classmethod
    def build(cls, n_modes: int) -> "KLBasis":
        if n_modes < 1:
            raise ValueError("n_modes must be positive")
        r = int(np.ceil(np.sqrt(n_modes))) + 2
        cand = [(a, b) for a in range(-r, r + 1) for b in range(-r, r + 1) if (a, b) != (0, 0)]
        cand.sort(key=lambda l: (l[0] ** 2 + l[1] ** 2, abs(l[0]), abs(l[1]), l[0], l[1]))
        chosen = cand[:n_modes]
        index = {l: i for i, l in enumerate(chosen)}
        perm = np.empty(n_modes, dtype=int)
        sign = np.empty(n_modes)
        for i, (a, b) in enumerate(chosen):
            # -psi_l(2 pi - x1, x2): with b != 0 this is -psi_{(-a, b)}(x); with b == 0
            # sin(a x1) flips sign and cos(a x1) does not, so the mode maps to itself
            target = (-a, b) if b != 0 else (a, b)
            if target not in index:
                raise ValueError(
                    f"truncation at {n_modes} modes is not closed under mirroring; "
                    f"mode {(a, b)} has no partner")
            perm[i] = index[target]
            sign[i] = 1.0 if (b == 0 and _canonical_positive(a, b)) else -1.0
        modes = np.array(chosen, dtype=int)
        norms = (modes**2).sum(axis=1).astype(float)
        return cls(modes=modes,
                   is_sin=np.array([_canonical_positive(a, b) for a, b in chosen]),
                   eigvals=norms ** -2.0, mirror_perm=perm, mirror_sign=sign)

    @property
    def n_modes(self) -> int:
        return self.modes.shape[0]

    def functions(self, n: int) -> np.ndarray:
        """Basis functions on the ``n x n`` grid, shape ``(n_modes, n, n)``."""
        x = TWO_PI * np.arange(n) / n
        X1, X2 = np.meshgrid(x, x, indexing="ij")
        out = np.empty((self.n_modes, n, n))
        for j, ((a, b), s) in enumerate(zip(self.modes, self.is_sin)):
            phase = a * X1 + b * X2
            out[j] = (np.sin(phase) if s else np.cos(phase)) / (np.sqrt(2.0) * np.pi)
        return out


def kl_to_vorticity(theta, basis: KLBasis, n: int, _funcs=None) -> np.ndarray:
    """``w0 = sum_l theta_l sqrt(lambda_l) psi_l`` on the grid; batched over leading axes."""
    theta = np.asarray(theta, dtype=float)
    m = theta.shape[-1]
    if m > basis.n_modes:
        raise ValueError(f"{m} coefficients but basis has {basis.n_modes} modes")
    funcs = basis.functions(n) if _funcs is None else _funcs
    scaled = theta * np.sqrt(basis.eigvals[:m])
    return np.tensordot(scaled, funcs[:m], axes=([-1], [0]))


def mirror_coefficients(theta, basis: KLBasis) -> np.ndarray:
    """Coefficients of ``-w0(2 pi - x1, x2)``; a signed permutation."""
    theta = np.asarray(theta, dtype=float)
    out = np.empty_like(theta)
    out[..., basis.mirror_perm] = theta * basis.mirror_sign
    return out


def mirror_field(w) -> np.ndarray:
    """``-w(2 pi - x1, x2)`` on the periodic grid (index ``j -> -j mod n``)."""
    w = np.asarray(w)
    return -np.roll(w[..., ::-1, :], 1, axis=-2)


def relative_l2_error(theta, theta_ref, basis: KLBasis) -> np.ndarray:
    """Relative L2 error of the vorticity, exact from coefficients (orthonormal basis)."""
    theta = np.asarray(theta, dtype=float)
    theta_ref = np.asarray(theta_ref, dtype=float)
    s = np.sqrt(basis.eigvals[:theta.shape[-1]])
    return (np.linalg.norm((theta - theta_ref) * s, axis=-1)
            / np.linalg.norm(theta_ref * s, axis=-1))


# --------------------------------------------------------------------------
# Spectral solver

class _Spectral:
    def __init__(self, cfg: NSConfig):
        n = cfg.grid_n
        self.cfg = cfg
        k = sfft.fftfreq(n, 1.0 / n)
        kr = sfft.rfftfreq(n, 1.0 / n)
        self.k1 = k[:, None]
        self.k2 = kr[None, :]
        ksq = self.k1**2 + self.k2**2
        self.ksq = ksq
        inv = np.zeros_like(ksq)
        inv[ksq > 0] = 1.0 / ksq[ksq > 0]
        self.inv_ksq = inv
        cut = n / 3.0
        self.mask = ((np.abs(self.k1) < cut) & (np.abs(self.k2) < cut)).astype(float)
        vb = cfg.background_velocity
        self.lin = -cfg.viscosity * ksq - 1j * (vb[0] * self.k1 + vb[1] * self.k2)
        x = cfg.grid()
        curl = np.zeros((n, n))
        if cfg.forcing_amplitude != 0:
            # f = (0, A cos(q x1))  =>  curl f = -A q sin(q x1)
            q = cfg.forcing_wavenumber
            curl = np.broadcast_to(-cfg.forcing_amplitude * q * np.sin(q * x)[:, None], (n, n))
        self.forcing_hat = self.fft(curl) * self.mask

    def fft(self, a):
        return sfft.rfft2(a, axes=(-2, -1), workers=self.cfg.workers)

    def ifft(self, a):
        return sfft.irfft2(a, s=(self.cfg.grid_n,) * 2, axes=(-2, -1), workers=self.cfg.workers)

    def nonlinear(self, w_hat):
        """``-(u . grad) w`` for the fluctuating velocity, dealiased."""
        psi_hat = w_hat * self.inv_ksq
        u1 = self.ifft(1j * self.k2 * psi_hat)
        u2 = self.ifft(-1j * self.k1 * psi_hat)
        w1 = self.ifft(1j * self.k1 * w_hat)
        w2 = self.ifft(1j * self.k2 * w_hat)
        return -self.fft(u1 * w1 + u2 * w2) * self.mask

    def advance(self, w_hat, duration):
        n_steps = max(1, int(np.ceil(duration / self.cfg.solver_dt - 1e-9)))
        h = duration / n_steps
        E = np.exp(self.lin * h)
        f = self.forcing_hat
        for _ in range(n_steps):
            a = self.nonlinear(w_hat) + f
            pred = E * (w_hat + h * a)
            b = self.nonlinear(pred) + f
            w_hat = E * (w_hat + 0.5 * h * a) + 0.5 * h * b
        return w_hat


def ns_solve(w0, cfg: NSConfig, times=None) -> np.ndarray:
    """Vorticity fields at ``times`` (default ``cfg.obs_times``).

    ``w0`` has shape ``(..., n, n)``; the result has shape ``(..., n_times, n, n)``.
    Each segment between consecutive output times is split into equal steps
    no longer than ``cfg.solver_dt``.
    """
    w0 = np.asarray(w0, dtype=float)
    n = cfg.grid_n
    if w0.shape[-2:] != (n, n):
        raise ValueError(f"initial field must end in shape ({n}, {n})")
    times = cfg.obs_times if times is None else tuple(float(t) for t in times)
    sp = _Spectral(cfg)
    w_hat = sp.fft(w0)
    w_hat[..., 0, 0] = 0.0
    out = np.empty(w0.shape[:-2] + (len(times), n, n))
    t = 0.0
    for j, t_obs in enumerate(times):
        if t_obs < t:
            raise ValueError("times must be increasing")
        if t_obs > t:
            w_hat = sp.advance(w_hat, t_obs - t)
        t = t_obs
        if not np.all(np.isfinite(w_hat)):
            raise ForwardMapError(f"non-finite vorticity at t={t_obs}; "
                                  f"the step {cfg.solver_dt} is unstable for this state")
        out[..., j, :, :] = sp.ifft(w_hat)
    return out


def _bilinear_weights(points, n):
    h = TWO_PI / n
    u = points / h
    i0 = np.floor(u).astype(int)
    fr = u - i0
    i0 %= n
    i1 = (i0 + 1) % n
    return i0, i1, fr


def sample_points(fields, points, n):
    """Periodic bilinear interpolation of ``(..., n, n)`` fields at ``points``."""
    i0, i1, fr = _bilinear_weights(np.asarray(points, float), n)
    a, b = fr[:, 0], fr[:, 1]
    f00 = fields[..., i0[:, 0], i0[:, 1]]
    f10 = fields[..., i1[:, 0], i0[:, 1]]
    f01 = fields[..., i0[:, 0], i1[:, 1]]
    f11 = fields[..., i1[:, 0], i1[:, 1]]
    return ((1 - a) * (1 - b) * f00 + a * (1 - b) * f10
            + (1 - a) * b * f01 + a * b * f11)


def observe(fields, cfg: NSConfig) -> np.ndarray:
    """Mirrored differences at the observation points, times major: ``(..., n_obs)``."""
    pts = cfg.obs_points
    mirrored = np.stack([TWO_PI - pts[:, 0], pts[:, 1]], axis=1)
    n = cfg.grid_n
    d = sample_points(fields, pts, n) - sample_points(fields, mirrored, n)
    return d.reshape(d.shape[:-2] + (-1,))


def ns_forward(theta, cfg: NSConfig, basis: KLBasis, _funcs=None) -> np.ndarray:
    """Observation vector for KL coefficients ``theta``; batched over leading axes."""
    theta = np.asarray(theta, dtype=float)
    batch = theta.shape[:-1]
    flat = theta.reshape(-1, theta.shape[-1])
    funcs = basis.functions(cfg.grid_n) if _funcs is None else _funcs
    out = np.empty((flat.shape[0], cfg.n_obs))
    for s in range(0, flat.shape[0], cfg.batch_chunk):
        w0 = kl_to_vorticity(flat[s:s + cfg.batch_chunk], basis, cfg.grid_n, funcs)
        out[s:s + cfg.batch_chunk] = observe(ns_solve(w0, cfg), cfg)
    return out.reshape(batch + (cfg.n_obs,))


# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class NSSetup:
    """Synthetic truth and data for a Navier-Stokes inverse problem."""

    cfg: NSConfig
    basis: KLBasis
    theta_true: np.ndarray
    y_clean: np.ndarray
    y: np.ndarray

    @property
    def theta_mirror(self):
        return mirror_coefficients(self.theta_true, self.basis)


def make_setup(cfg: NSConfig, truth_seed: int = 42) -> NSSetup:
    """Draw the truth from the prior and generate noisy data with the same solver."""
    basis = KLBasis.build(cfg.kl_modes)
    rng = np.random.default_rng(truth_seed)
    theta = rng.standard_normal(cfg.kl_modes) * np.sqrt(basis.prior_var)
    y_clean = ns_forward(theta, cfg, basis)
    y = y_clean + cfg.noise_std * rng.standard_normal(y_clean.shape)
    return NSSetup(cfg, basis, theta, y_clean, y)


def ns_problem(cfg: Optional[NSConfig] = None, truth_seed: int = 42, paper_scale: bool = False,
               setup: Optional[NSSetup] = None):
    """Bayesian inverse problem for the KL coefficients of the initial vorticity.

    Desk scale (default): 64x64 grid, 32 modes.  ``paper_scale`` switches to
    128 modes on a 128x128 grid with a correspondingly smaller step.
    """
    from .problems import augmented_map

    if cfg is None:
        cfg = (NSConfig(grid_n=128, kl_modes=128, solver_dt=0.0048) if paper_scale
               else NSConfig())
    if setup is None:
        setup = make_setup(cfg, truth_seed)
    basis = setup.basis
    funcs = basis.functions(cfg.grid_n)
    n = cfg.kl_modes
    var = basis.prior_var
    prob = augmented_map(
        G=lambda t: ns_forward(t, cfg, basis, funcs),
        y=setup.y, sigma_eta=cfg.noise_std**2 * np.eye(cfg.n_obs),
        r0=np.zeros(n), sigma0=var * np.eye(n),
        name="ns", meta={"setup": setup},
    )
    return prob
