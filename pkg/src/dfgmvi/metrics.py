"""Grid densities, total variation and kernel density estimates.

Total variation here is ``integral |p - q|`` with no factor one half, so it
ranges over ``[0, 2]`` for normalized densities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from .mixture import GaussianMixture, component_logpdfs, marginal

__all__ = ["GridDensity", "uniform_axes", "grid_density", "density_from_log",
           "tv_distance", "kde", "silverman_factor", "mixture_tv"]


@dataclass(frozen=True, eq=False)
class GridDensity:
    """Density tabulated at the nodes of a uniform rectangular grid.

    ``values`` has shape ``tuple(len(a) for a in axes)`` with ``ij`` indexing.
    """

    axes: tuple
    values: np.ndarray

    def __post_init__(self):
        axes = tuple(np.asarray(a, dtype=float) for a in self.axes)
        values = np.asarray(self.values, dtype=float)
        if values.shape != tuple(a.size for a in axes):
            raise ValueError(f"values shape {values.shape} does not match axes")
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise ValueError("density values must be finite and nonnegative")
        for a in axes:
            if a.size < 2:
                raise ValueError("each axis needs at least two nodes")
            d = np.diff(a)
            if not np.allclose(d, d[0], rtol=1e-9, atol=0):
                raise ValueError("axes must be uniform")
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "values", values)

    @property
    def ndim(self) -> int:
        return len(self.axes)

    @property
    def spacings(self) -> tuple:
        return tuple(float(a[1] - a[0]) for a in self.axes)

    @property
    def cell_measure(self) -> float:
        return float(np.prod(self.spacings))

    def integral(self) -> float:
        return float(self.values.sum() * self.cell_measure)

    def normalized(self) -> "GridDensity":
        total = self.integral()
        if total <= 0:
            raise ValueError("cannot normalize a density with zero mass on the grid")
        return GridDensity(self.axes, self.values / total)

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)


def uniform_axes(bounds, n):
    """Axes of ``n`` nodes per dimension over ``bounds = [(lo, hi), ...]``."""
    if np.isscalar(n):
        n = [int(n)] * len(bounds)
    return tuple(np.linspace(lo, hi, k) for (lo, hi), k in zip(bounds, n))


def _mesh_points(axes):
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def grid_density(mix: GaussianMixture, axes) -> GridDensity:
    """Pointwise ``exp(gm_logpdf)`` on the grid (1D or 2D mixtures only)."""
    axes = tuple(np.asarray(a, dtype=float) for a in axes)
    if mix.dim > 2:
        raise ValueError("grid_density supports dimension 1 or 2; take a marginal first")
    if mix.dim != len(axes):
        raise ValueError("number of axes must match the mixture dimension")
    pts = _mesh_points(axes)
    logN, _ = component_logpdfs(mix, pts)
    # direct sum; terms that underflow are below any grid resolution of interest
    vals = (np.exp(logN) @ mix.weights).reshape(tuple(a.size for a in axes))
    return GridDensity(axes, vals)


def density_from_log(log_fn, axes, normalize=True) -> GridDensity:
    """Tabulate ``exp(log_fn)`` with max-subtraction, optionally normalized."""
    axes = tuple(np.asarray(a, dtype=float) for a in axes)
    pts = _mesh_points(axes)
    logv = np.asarray(log_fn(pts), dtype=float).reshape(tuple(a.size for a in axes))
    logv = np.where(np.isnan(logv), -np.inf, logv)
    vals = np.exp(logv - np.max(logv))
    g = GridDensity(axes, vals)
    return g.normalized() if normalize else g


def _same_axes(p: GridDensity, q: GridDensity) -> bool:
    return p.ndim == q.ndim and all(np.array_equal(a, b) for a, b in zip(p.axes, q.axes))


def tv_distance(p: GridDensity, q: GridDensity) -> float:
    """``sum |p - q| * cell_measure`` on a shared grid."""
    if not _same_axes(p, q):
        raise ValueError("densities are tabulated on different grids")
    return float(np.abs(p.values - q.values).sum() * p.cell_measure)


def mixture_tv(mix: GaussianMixture, reference: GridDensity, indices=None,
               normalize=True) -> float:
    """TV between a mixture (or its marginal) and a reference grid density.

    With ``normalize`` the mixture is renormalized over the grid box, so the
    comparison is between the two densities conditioned on the box.
    """
    if indices is not None and mix.dim != len(indices):
        mix = marginal(mix, indices)
    g = grid_density(mix, reference.axes)
    if normalize:
        g = g.normalized()
    return tv_distance(g, reference)


def silverman_factor(n: int, d: int) -> float:
    """Silverman's rule-of-thumb bandwidth factor ``(n (d + 2) / 4)^(-1/(d + 4))``."""
    return (n * (d + 2) / 4.0) ** (-1.0 / (d + 4))


def _bandwidth_cov(samples, bandwidth, multiplier):
    n, d = samples.shape
    if isinstance(bandwidth, str):
        if bandwidth != "silverman":
            raise ValueError(f"unknown bandwidth rule {bandwidth!r}")
        if n < 2:
            raise ValueError("Silverman's rule needs at least two samples")
        cov = np.atleast_2d(np.cov(samples, rowvar=False))
        return (multiplier * silverman_factor(n, d)) ** 2 * cov
    bw = np.asarray(bandwidth, dtype=float)
    if bw.ndim == 0:
        return (multiplier * float(bw)) ** 2 * np.eye(d)
    if bw.ndim == 1:
        return np.diag((multiplier * bw) ** 2)
    return multiplier**2 * bw


def kde(samples, axes, bandwidth="silverman", multiplier=1.0, method="auto") -> GridDensity:
    """Gaussian kernel density estimate tabulated on a grid and normalized.

    ``bandwidth`` is ``"silverman"`` (kernel covariance = factor^2 times the
    sample covariance), a scalar or per-axis kernel standard deviation, or a
    full kernel covariance matrix.  ``method="binned"`` uses linear binning
    plus FFT convolution; ``"direct"`` sums kernels exactly; ``"auto"``
    picks direct evaluation for small problems.
    """
    X = np.asarray(samples, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] == 0:
        raise ValueError("kde needs at least one sample")
    axes = tuple(np.asarray(a, dtype=float) for a in axes)
    d = X.shape[1]
    if d not in (1, 2) or d != len(axes):
        raise ValueError("kde supports 1 or 2 dimensions matching the axes")
    H = _bandwidth_cov(X, bandwidth, multiplier)
    n_grid = int(np.prod([a.size for a in axes]))
    if method == "auto":
        method = "direct" if X.shape[0] * n_grid <= 2e7 else "binned"
    if method == "direct":
        vals = _kde_direct(X, axes, H)
    elif method == "binned":
        vals = _kde_binned(X, axes, H)
    else:
        raise ValueError(f"unknown method {method!r}")
    vals = np.clip(vals, 0.0, None)
    return GridDensity(axes, vals).normalized()


def _kde_direct(X, axes, H):
    pts = _mesh_points(axes)
    Lh = np.linalg.cholesky(H)
    Linv = np.linalg.inv(Lh)
    out = np.zeros(pts.shape[0])
    chunk = max(1, int(2e6 // max(1, X.shape[0])))
    for s in range(0, pts.shape[0], chunk):
        diff = pts[s:s + chunk, None, :] - X[None, :, :]
        z = diff @ Linv.T
        out[s:s + chunk] = np.exp(-0.5 * np.sum(z * z, axis=-1)).sum(axis=1)
    return out.reshape(tuple(a.size for a in axes))


def _kde_binned(X, axes, H):
    shape = tuple(a.size for a in axes)
    counts = np.zeros(shape)
    lo = np.array([a[0] for a in axes])
    h = np.array([a[1] - a[0] for a in axes])
    u = (X - lo) / h
    i0 = np.floor(u).astype(int)
    frac = u - i0
    d = X.shape[1]
    for corner in np.ndindex(*(2,) * d):
        corner = np.array(corner)
        idx = i0 + corner
        wt = np.prod(np.where(corner == 1, frac, 1.0 - frac), axis=1)
        ok = np.all((idx >= 0) & (idx < np.array(shape)), axis=1)
        np.add.at(counts, tuple(idx[ok].T), wt[ok])
    half = [int(np.ceil(5.0 * np.sqrt(H[i, i]) / h[i])) for i in range(d)]
    half = [min(hh, s) for hh, s in zip(half, shape)]
    offs = [np.arange(-hh, hh + 1) * hi for hh, hi in zip(half, h)]
    kpts = _mesh_points(offs)
    Hinv = np.linalg.inv(H)
    kern = np.exp(-0.5 * np.einsum("ni,ij,nj->n", kpts, Hinv, kpts))
    kern = kern.reshape(tuple(o.size for o in offs))
    return fftconvolve(counts, kern, mode="same")
