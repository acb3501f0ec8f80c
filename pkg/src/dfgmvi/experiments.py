"""Method-agnostic experiment runs shared by the CLI and the acceptance suite."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import baselines as bl
from .metrics import GridDensity, kde, mixture_tv, tv_distance
from .solver import SolverConfig, run as run_dfgmvi

__all__ = ["METHODS", "RunResult", "run_method", "evaluate_tv", "ns_errors"]

METHODS = ("dfgmvi", "ngf", "ngf-d", "wgf", "bbvi", "mcmc")


@dataclass
class RunResult:
    method: str
    seed: int
    status: str = "ok"
    message: str = ""
    trace: object = None
    tv: dict = field(default_factory=dict)
    final_tv: Optional[float] = None
    f_evals: int = 0
    wall_time: float = 0.0
    density: Optional[GridDensity] = None
    samples: Optional[np.ndarray] = None
    extras: dict = field(default_factory=dict)
    n_iters: int = 0

    @property
    def final(self):
        return None if self.trace is None else self.trace.final


def evaluate_tv(problem, mix, reference: Optional[GridDensity]):
    """TV of the mixture (or its reference marginal) against the reference grid."""
    if reference is None:
        return None
    idx = problem.reference_indices
    if idx is None and mix.dim > 2:
        return None
    return mixture_tv(mix, reference, indices=idx)


def ns_errors(problem, mix):
    """Relative L2 vorticity errors of every component mean against truth and mirror."""
    from .navier_stokes import relative_l2_error

    setup = problem.meta["setup"]
    return {
        "rel_error_truth": relative_l2_error(mix.means, setup.theta_true, setup.basis).tolist(),
        "rel_error_mirror": relative_l2_error(mix.means, setup.theta_mirror, setup.basis).tolist(),
    }


def _wgf_dt(problem, settings):
    dt = settings.get("dt")
    if dt is not None:
        return float(dt)
    case = problem.name.split(":")[-1]
    if case not in bl.WGF_DT:
        raise ValueError(f"no default WGF step for {problem.name}; set dt")
    return bl.WGF_DT[case]


def run_method(problem, method: str, seed: int, settings: Optional[dict] = None,
               reference: Optional[GridDensity] = None, tv_every: int = 1) -> RunResult:
    """Run one method with one seed; failures of baselines are recorded, not raised.

    DF-GMVI positivity failures propagate because they signal a bug.
    """
    settings = dict(settings or {})
    res = RunResult(method, seed)
    t0 = time.perf_counter()
    snap = int(settings.pop("snapshot_every", tv_every))
    if method == "dfgmvi":
        cfg = SolverConfig(rng_seed=seed, snapshot_every=snap, **settings)
        tr = run_dfgmvi(problem, cfg)
        res.trace = tr
        res.f_evals = tr.f_eval_count
    elif method in ("ngf", "ngf-d"):
        dt = settings.pop("dt", None)
        quad = _quad(settings.pop("quadrature", "meanpoint"), settings.pop("J", 20))
        lquad = settings.pop("log_quadrature", None)
        lquad = None if lquad is None else _quad(lquad, settings.pop("log_J", 20))
        tr = bl.run_ngf(problem, seed=seed, dt=dt, quad_phi=quad, quad_log=lquad,
                        diagonal=(method == "ngf-d"), snapshot_every=snap, **settings)
        res.trace = tr
    elif method == "wgf":
        dt = _wgf_dt(problem, settings)
        settings.pop("dt", None)
        tr = bl.run_wgf(problem, dt, seed=seed, snapshot_every=snap, **settings)
        res.trace = tr
    elif method == "bbvi":
        tr = bl.run_bbvi(problem, seed=seed, snapshot_every=snap, **settings)
        res.trace = tr
        res.f_evals = tr.phi_eval_count
    elif method == "mcmc":
        mult = settings.pop("bandwidth_multiplier", 1.0)
        samples, acc = bl.run_stretch(problem, seed=seed, **settings)
        res.samples = samples
        res.extras["acceptance_rate"] = acc
        res.n_iters = settings.get("n_iters", 500)
        J = settings.get("J", 1000)
        res.f_evals = J * (settings.get("n_iters", 500) + 1)
        if reference is not None:
            idx = problem.reference_indices
            pts = samples if idx is None else samples[:, list(idx)]
            res.density = kde(pts, reference.axes, multiplier=mult)
            res.final_tv = tv_distance(res.density, reference)
    else:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    res.wall_time = time.perf_counter() - t0
    tr = res.trace
    if tr is not None:
        if getattr(tr, "failure", None):
            res.status = tr.failure.split(":")[0]
            res.message = f"{tr.failure} (iteration {tr.failed_at})"
        if reference is not None:
            for it, mix in zip(tr.snapshot_iters, tr.snapshots):
                res.tv[it] = evaluate_tv(problem, mix, reference)
            if res.status == "ok":
                res.final_tv = res.tv[tr.snapshot_iters[-1]]
        if problem.name == "ns":
            res.extras.update(ns_errors(problem, tr.final))
    return res


def _quad(name, J):
    name = str(name).lower()
    if name in ("meanpoint", "mp"):
        return bl.MEANPOINT
    if name in ("unscented", "ut"):
        return bl.UNSCENTED
    if name in ("montecarlo", "mc"):
        return bl.montecarlo(int(J))
    raise ValueError(f"unknown quadrature {name!r}")
