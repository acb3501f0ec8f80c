"""Command-line experiment runner.

Usage::

    python -m dfgmvi run CONFIG [--output-dir DIR] [--threads N] [--seed S]
    python -m dfgmvi sweep CONFIG [--output-dir DIR] [--threads N] [--seed S]
    python -m dfgmvi list-problems

Configs are INI files.  Unknown sections or keys are rejected before any
file is written (exit 1); a runtime failure writes ``error.json`` into the
output directory and exits with status 2.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .exceptions import ConfigError
from .experiments import METHODS, RunResult, run_method
from .metrics import grid_density
from .mixture import marginal
from .problems import get_problem, list_problems

CONFIG_VERSION = 1
THREADS_ENV = "DFGMVI_THREADS"


def _floats(s):
    return [float(v) for v in s.replace(",", " ").split()]


def _ints(s):
    return [int(v) for v in s.replace(",", " ").split()]


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _dt(s):
    return None if s.strip().lower() == "adaptive" else float(s)


def _words(s):
    return [v for v in s.replace(",", " ").split() if v]


SCHEMA = {
    "experiment": {"version": int, "problem": str, "methods": _words, "seeds": _ints,
                   "output_dir": str, "snapshot_every": int, "reference_grid_n": int},
    "dfgmvi": {"K": int, "dt": float, "alpha": float, "n_iters": int, "weight_floor": float,
               "init": str},
    "ngf": {"K": int, "n_iters": int, "dt": _dt, "quadrature": str, "J": int,
            "log_quadrature": str, "log_J": int, "dt_max": float, "beta": float},
    "wgf": {"K": int, "n_iters": int, "dt": float},
    "bbvi": {"K": int, "J": int, "n_iters": int, "dt_max": float, "beta": float},
    "mcmc": {"J": int, "n_iters": int, "a": float, "keep_last": int,
             "bandwidth_multiplier": float},
    "ns": {"grid_n": int, "kl_modes": int, "solver_dt": float, "truth_seed": int,
           "paper_scale": _bool, "noise_std": float},
    "sweep": {"version": int, "problem": str, "K": int, "n_iters": int, "alphas": _floats,
              "dts": _floats, "base_dt": float, "base_alpha": float, "seeds": _ints,
              "output_dir": str, "snapshot_every": int, "reference_grid_n": int},
}
SCHEMA["ngf-d"] = SCHEMA["ngf"]

DEFAULTS = {
    "dfgmvi": {"K": 40, "n_iters": 200},
    "ngf": {"K": 40, "n_iters": 500},
    "ngf-d": {"K": 40, "n_iters": 500},
    "wgf": {"K": 40, "n_iters": 500},
    "bbvi": {"K": 40, "J": 5, "n_iters": 500},
    "mcmc": {"J": 1000, "n_iters": 500},
}


@dataclass
class Experiment:
    problem: str
    methods: list
    seeds: list
    output_dir: Path
    snapshot_every: int | None = None
    reference_grid_n: int | None = None
    method_settings: dict = field(default_factory=dict)
    ns: dict = field(default_factory=dict)


@dataclass
class Sweep:
    problem: str = "multi2d:E"
    K: int = 40
    n_iters: int = 200
    alphas: list = field(default_factory=lambda: [1e-1, 1e-3, 1e-5])
    dts: list = field(default_factory=lambda: [0.25, 0.5, 0.75])
    base_dt: float = 0.5
    base_alpha: float = 1e-3
    seeds: list = field(default_factory=lambda: [0])
    output_dir: Path = Path("sweep_out")
    snapshot_every: int = 5
    reference_grid_n: int | None = None

    def settings(self):
        out = [(f"alpha={a:g}", {"alpha": a, "dt": self.base_dt}) for a in self.alphas]
        out += [(f"dt={d:g}", {"alpha": self.base_alpha, "dt": d}) for d in self.dts]
        return out


def _parse_sections(path, allowed):
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    out = {}
    for sec in cp.sections():
        if sec not in allowed:
            raise ConfigError(f"unknown section [{sec}]")
        types = SCHEMA[sec]
        vals = {}
        for key, raw in cp.items(sec):
            if key not in types:
                raise ConfigError(f"unknown key {key!r} in [{sec}]")
            try:
                vals[key] = types[key](raw)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {sec}.{key}: {raw!r} ({exc})") from None
        out[sec] = vals
    return out


def _check_version(v):
    if v is not None and v != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {v}; expected {CONFIG_VERSION}")


def load_experiment(path) -> Experiment:
    secs = _parse_sections(path, set(SCHEMA) - {"sweep"})
    if "experiment" not in secs:
        raise ConfigError("missing [experiment] section")
    ex = secs["experiment"]
    _check_version(ex.get("version"))
    if "problem" not in ex:
        raise ConfigError("experiment.problem is required")
    methods = ex.get("methods", ["dfgmvi"])
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
    for sec in secs:
        if sec in DEFAULTS and sec not in methods:
            raise ConfigError(f"section [{sec}] given but method not listed")
    if "ns" in secs and not ex["problem"].startswith("ns"):
        raise ConfigError("[ns] section only applies to problem 'ns'")
    if ex["problem"] not in list_problems():
        raise ConfigError(f"unknown problem {ex['problem']!r}")
    settings = {m: {**DEFAULTS[m], **secs.get(m, {})} for m in methods}
    return Experiment(problem=ex["problem"], methods=methods, seeds=ex.get("seeds", [0]),
                      output_dir=Path(ex.get("output_dir", "out")),
                      snapshot_every=ex.get("snapshot_every"),
                      reference_grid_n=ex.get("reference_grid_n"),
                      method_settings=settings, ns=secs.get("ns", {}))


def load_sweep(path) -> Sweep:
    secs = _parse_sections(path, {"sweep"})
    if "sweep" not in secs:
        raise ConfigError("missing [sweep] section")
    s = dict(secs["sweep"])
    _check_version(s.pop("version", None))
    if "output_dir" in s:
        s["output_dir"] = Path(s["output_dir"])
    sw = Sweep(**s)
    if sw.problem not in list_problems() or sw.problem == "ns":
        raise ConfigError(f"sweep needs a catalog problem with a reference, got {sw.problem!r}")
    for d in sw.dts + [sw.base_dt]:
        if not 0 < d < 1:
            raise ConfigError(f"dt must lie in (0, 1), got {d}")
    for a in sw.alphas + [sw.base_alpha]:
        if not a > 0:
            raise ConfigError(f"alpha must be positive, got {a}")
    return sw


def _build_problem(pid, ns_opts, threads):
    if pid != "ns":
        return get_problem(pid)
    from .navier_stokes import NSConfig, ns_problem

    opts = dict(ns_opts)
    paper = opts.pop("paper_scale", False)
    truth_seed = opts.pop("truth_seed", 42)
    base = (dict(grid_n=128, kl_modes=128, solver_dt=0.0048) if paper else {})
    base.update(opts)
    cfg = NSConfig(workers=threads, **base)
    return ns_problem(cfg, truth_seed=truth_seed)


def _validate_method_settings(exp: Experiment):
    # dry construction catches invalid combinations before any output exists
    from .solver import SolverConfig

    if "dfgmvi" in exp.methods:
        try:
            SolverConfig(**exp.method_settings["dfgmvi"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid [dfgmvi] settings: {exc}") from None


# --------------------------------------------------------------------------
# artifact writing

def _trace_rows(res: RunResult):
    tr = res.trace
    K = tr.final.K
    header = ["iteration", "dt", "tv", "grad_norm_max", "hess_norm_max", "spread"]
    header += [f"w_{k}" for k in range(K)]
    dts = list(getattr(tr, "dts", []))
    fixed_dt = None
    if not dts and hasattr(tr, "f_eval_count") and res.method == "dfgmvi":
        fixed_dt = res.extras.get("dt")
    rows = []
    for t, w in enumerate(tr.weights):
        r = tr.residuals[t] if t < len(tr.residuals) else None
        dt = fixed_dt if t > 0 else None
        if dts and t > 0:
            dt = dts[t - 1]
        rows.append([t, dt, res.tv.get(t),
                     None if r is None else float(np.max(r["grad_norm"])),
                     None if r is None else float(np.max(r["hess_norm"])),
                     None if r is None else r["spread"]] + list(w))
    return header, rows


def _write_run(out: Path, problem, res: RunResult, reference):
    out.mkdir(parents=True, exist_ok=True)
    if res.trace is not None:
        header, rows = _trace_rows(res)
        io.write_csv(out / "trace.csv", header, rows)
        for it, mix in zip(res.trace.snapshot_iters, res.trace.snapshots):
            io.write_mixture(out / f"mixture_{it:04d}.json", mix, it)
        if reference is not None:
            mix = res.trace.final
            if problem.reference_indices is not None:
                mix = marginal(mix, problem.reference_indices)
            if mix.dim <= 2:
                io.write_grid_csv(out / "density.csv", grid_density(mix, reference.axes).normalized())
    elif res.density is not None:
        io.write_csv(out / "trace.csv", ["iteration", "dt", "tv"],
                     [[res.n_iters, None, res.final_tv]])
        io.write_grid_csv(out / "density.csv", res.density)


def _report_entry(res: RunResult):
    e = {"method": res.method, "seed": res.seed, "status": res.status,
         "final_tv": res.final_tv, "f_evals": int(res.f_evals)}
    if res.message:
        e["message"] = res.message
    for k, v in res.extras.items():
        if k != "dt":
            e[k] = v
    return e


def _write_ns_artifacts(out: Path, problem):
    from .navier_stokes import kl_to_vorticity, mirror_field

    setup = problem.meta["setup"]
    cfg = setup.cfg
    w0 = kl_to_vorticity(setup.theta_true, setup.basis, cfg.grid_n)
    io.write_field(out / "truth_vorticity", w0, grid_n=cfg.grid_n)
    io.write_field(out / "truth_vorticity_mirrored", mirror_field(w0), grid_n=cfg.grid_n)
    pts = cfg.obs_points
    rows = []
    for j, t in enumerate(cfg.obs_times):
        for i, (x1, x2) in enumerate(pts):
            idx = j * len(pts) + i
            rows.append([t, x1, x2, setup.y_clean[idx], setup.y[idx]])
    io.write_csv(out / "observations.csv", ["time", "x1", "x2", "clean", "observed"], rows)


def _threads(arg):
    if arg is not None:
        return max(1, int(arg))
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return 1


def _fail(out: Path, exc: BaseException, context: dict):
    out.mkdir(parents=True, exist_ok=True)
    diag = {"error": type(exc).__name__, "message": str(exc), "context": context,
            "traceback": traceback.format_exc()}
    for attr in ("index", "component"):
        if getattr(exc, attr, None) is not None:
            diag[attr] = getattr(exc, attr)
    (out / "error.json").write_text(json.dumps(diag, indent=1, default=str) + "\n",
                                    encoding="utf-8")
    print(f"error: {type(exc).__name__}: {exc} (details in {out / 'error.json'})", file=sys.stderr)
    return 2


def run_experiment(exp: Experiment, threads: int = 1) -> int:
    out = exp.output_dir
    context = {"problem": exp.problem}
    try:
        problem = _build_problem(exp.problem, exp.ns, threads)
        reference = None
        if problem.box is not None:
            reference = problem.reference_density(exp.reference_grid_n)
        snap = exp.snapshot_every or (1 if problem.n_theta <= 2 else 25)
        jobs = [(m, s) for m in exp.methods for s in exp.seeds]

        def job(ms):
            m, s = ms
            settings = dict(exp.method_settings[m])
            settings["snapshot_every"] = snap
            res = run_method(problem, m, s, settings, reference, tv_every=snap)
            if m == "dfgmvi":
                res.extras["dt"] = settings.get("dt", 0.5)
            return res

        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, jobs))
        out.mkdir(parents=True, exist_ok=True)
        timing = {}
        for res in results:
            _write_run(out / res.method / f"seed_{res.seed}", problem, res, reference)
            timing[f"{res.method}/seed_{res.seed}"] = res.wall_time
        if problem.name == "ns":
            _write_ns_artifacts(out, problem)
        report = {"version": CONFIG_VERSION, "problem": exp.problem,
                  "runs": [_report_entry(r) for r in results]}
        io.write_json(out / "report.json", report, io.REPORT_SCHEMA)
        io.write_json(out / "timing.json", timing)
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 2
        return _fail(out, exc, context)
    return 0


def run_sweep(sw: Sweep, threads: int = 1) -> int:
    out = sw.output_dir
    try:
        problem = get_problem(sw.problem)
        reference = problem.reference_density(sw.reference_grid_n)
        jobs = [(label, s, seed) for label, s in sw.settings() for seed in sw.seeds]

        def job(j):
            label, s, seed = j
            settings = {"K": sw.K, "n_iters": sw.n_iters, "snapshot_every": sw.snapshot_every, **s}
            res = run_method(problem, "dfgmvi", seed, settings, reference, tv_every=sw.snapshot_every)
            res.extras["dt"] = s["dt"]
            return label, res

        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, jobs))
        out.mkdir(parents=True, exist_ok=True)
        columns = []
        for label, res in results:
            _write_run(out / label / f"seed_{res.seed}", problem, res, reference)
            columns.append((f"{label}/seed_{res.seed}", res.tv))
        iters = sorted(set().union(*[tv.keys() for _, tv in columns]))
        io.write_csv(out / "tv_curves.csv", ["iteration"] + [c for c, _ in columns],
                     [[t] + [tv.get(t) for _, tv in columns] for t in iters])
        report = {"version": CONFIG_VERSION, "problem": sw.problem,
                  "runs": [dict(_report_entry(r), method=f"dfgmvi[{label}]")
                           for label, r in results]}
        io.write_json(out / "report.json", report, io.REPORT_SCHEMA)
        io.write_json(out / "timing.json",
                      {f"{label}/seed_{r.seed}": r.wall_time for label, r in results})
    except Exception as exc:  # noqa: BLE001
        return _fail(out, exc, {"problem": sw.problem})
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="dfgmvi",
                                description="Derivative-free Gaussian-mixture VI experiments")
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in (("run", "run an experiment config"),
                           ("sweep", "run the alpha / dt sensitivity sweep")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("config", help="INI config file")
        sp.add_argument("--output-dir", help="override the output directory")
        sp.add_argument("--threads", type=int,
                        help=f"worker threads (default ${THREADS_ENV} or 1)")
        sp.add_argument("--seed", type=int, help="run only this seed")
    sub.add_parser("list-problems", help="print the available problem ids")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "list-problems":
        for pid in list_problems():
            print(pid)
        return 0
    try:
        threads = _threads(args.threads)
        if args.command == "run":
            exp = load_experiment(args.config)
            if args.output_dir:
                exp.output_dir = Path(args.output_dir)
            if args.seed is not None:
                exp.seeds = [args.seed]
            _validate_method_settings(exp)
            return run_experiment(exp, threads)
        sw = load_sweep(args.config)
        if args.output_dir:
            sw.output_dir = Path(args.output_dir)
        if args.seed is not None:
            sw.seeds = [args.seed]
        return run_sweep(sw, threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
