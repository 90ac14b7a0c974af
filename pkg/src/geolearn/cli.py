"""Command-line experiment runner.

Usage::

    geolearn run <config.toml | manifest.json> [--out DIR] [--seed N]
    geolearn plot <table.csv> <plot-spec.toml> [--out FILE]
    geolearn presets list
    geolearn presets show <name>

Configs are TOML documents. The top level holds ``experiment``, ``seed``,
``outputs`` and ``out_dir``; each experiment reads a fixed set of tables
(see ``SECTIONS``). Unknown keys are rejected. An optional ``[check]``
table maps metric names (dotted paths for list entries, e.g.
``band_decades.1``) to ``{min = ..., max = ...}`` bounds; any failed bound
makes the run exit with status 3.

Exit status: 0 success, 1 config error, 2 runtime error, 3 check failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import math
import os
import platform
import sys
import tempfile
import time
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy
from scipy import stats
from scipy.integrate import trapezoid

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .errors import (
    ConfigError,
    DomainError,
    GeoLearnError,
    InvariantViolation,
    MissingColumn,
    ParseError,
    StabilityViolation,
    UnknownKey,
)
from .evolution import AcceptanceRule, JumpModel, detailed_balance_ratio, evolve_chain, lande_vs_chain
from .fokker_planck import (
    FokkerPlanckOperator,
    GridDensity,
    GridSpec,
    density_cdf_1d,
    entropy_change,
    entropy_production,
    l1_distance,
    shannon_entropy,
    stationary_boltzmann,
    total_mass,
)
from .landscape import Flat, Quadratic, landscape_from_dict, noise_from_dict
from .langevin import Ensemble, SimConfig, empirical_density, run_ensemble
from .optimizer import OptRun, phase_sweep, regime_reductions, run_benchmark
from .quantum import (
    SplitStepPropagator,
    WaveField,
    continuity_step,
    effective_potential,
    ground_state,
    madelung_decompose,
    planck_mass_from,
    quantum_potential,
)
from .spd import local_geometry, metric_spec_from_dict

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3

EXPERIMENTS = (
    "langevin",
    "fokker_planck",
    "evolution",
    "quantum",
    "optimize",
    "phase_sweep",
    "langevin_vs_fp",
    "lande_check",
)
FORMATS = ("csv", "json", "svg")


class _Required:
    def __repr__(self):
        return "<required>"


REQ = _Required()

# Free-form tables are validated by the module constructors they feed.
FREE = object()

TOP_LEVEL = {"experiment": REQ, "seed": 0, "outputs": ["csv", "json"], "out_dir": "out"}

SCHEMAS: Dict[str, Any] = {
    "landscape": FREE,
    "noise": FREE,
    "metric": {"kind": "power_law", "alpha": FREE, "epsilon": FREE, "zeta": FREE},
    "grid": {"lo": REQ, "hi": REQ, "n": REQ},
    "initial": {"kind": "uniform", "q0": None, "mean": None, "std": None},
    "langevin": {
        "gamma": REQ,
        "dt": REQ,
        "steps": None,
        "t_end": None,
        "ensemble_size": 1000,
        "snapshot_every": None,
        "drift_correction": None,
        "write_members": False,
    },
    "fokker_planck": {
        "gamma": REQ,
        "dt": REQ,
        "t_end": REQ,
        "scheme": "explicit",
        "form": "general",
        "record_every": 1,
        "stationary_check": False,
    },
    "evolution": {
        "beta_selection": REQ,
        "acceptance": "sigmoid",
        "jump_covariance": REQ,
        "steps": REQ,
        "q0": REQ,
        "burn_in_fraction": 0.1,
        "chain_every": 1,
        "balance_pairs": 0,
        "balance_rules": ["sigmoid", "metropolis"],
        "balance_scale": 3.0,
        "extra_landscapes": [],
    },
    "lande": {
        "beta_selection": REQ,
        "jump_covariance": REQ,
        "q0": REQ,
        "horizon": REQ,
        "ensemble_size": 10000,
        "snapshots": 20,
    },
    "quantum": {
        "gamma": REQ,
        "beta_quantum": REQ,
        "f": 0.0,
        "boundary": "dirichlet",
        "dt": 0.005,
        "periods": 3.0,
        "displacement": 1.0,
        "continuity_periods": 1.0,
        "support_threshold": 1e-6,
    },
    "optimize": {
        "gamma": REQ,
        "steps": REQ,
        "q0": REQ,
        "mode": "diagonal",
        "decay": 0.99,
        "epsilon_floor": 1e-8,
        "record_every": 1,
        "grad_tol": 1e-6,
        "reductions": False,
    },
    "phase_sweep": {
        "pairs": REQ,
        "lambda_lo_factor": 1e-6,
        "lambda_hi_factor": 1e6,
        "points_per_decade": 100,
    },
}

SECTIONS = {
    "langevin": (("landscape", "noise", "metric", "langevin", "initial"), ("grid",)),
    "fokker_planck": (("landscape", "noise", "metric", "grid", "fokker_planck", "initial"), ()),
    "langevin_vs_fp": (
        ("landscape", "noise", "metric", "grid", "langevin", "fokker_planck", "initial"),
        (),
    ),
    "evolution": (("landscape", "evolution"), ()),
    "lande_check": (("landscape", "lande"), ()),
    "quantum": (("landscape", "grid", "quantum"), ()),
    "optimize": (("landscape", "metric", "optimize"), ("noise",)),
    "phase_sweep": (("phase_sweep",), ()),
}
# sections that may be omitted entirely and take their defaults
DEFAULTED = {"metric", "initial"}


@dataclass
class ExperimentConfig:
    experiment: str
    seed: int
    outputs: List[str]
    out_dir: str
    sections: Dict[str, Any]
    check: Dict[str, Dict[str, float]] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        d = {"experiment": self.experiment, "seed": self.seed, "outputs": list(self.outputs),
             "out_dir": self.out_dir}
        d.update(copy.deepcopy(self.sections))
        if self.check:
            d["check"] = copy.deepcopy(self.check)
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


# -- parsing ------------------------------------------------------------------------


def _resolve_table(name: str, raw: Any, schema: Any) -> Any:
    if schema is FREE:
        if not isinstance(raw, dict):
            raise ParseError(f"[{name}] must be a table")
        return copy.deepcopy(raw)
    if not isinstance(raw, dict):
        raise ParseError(f"[{name}] must be a table")
    for key in raw:
        if key not in schema:
            raise UnknownKey(f"unknown key '{name}.{key}'", key=f"{name}.{key}")
    out = {}
    for key, default in schema.items():
        if key in raw:
            out[key] = copy.deepcopy(raw[key])
        elif default is REQ:
            raise InvariantViolation(f"missing required key '{name}.{key}'")
        elif default is FREE:
            continue
        else:
            out[key] = copy.deepcopy(default)
    return out


def config_from_dict(doc: Dict[str, Any]) -> ExperimentConfig:
    """Validate a parsed document and fill in defaults."""
    doc = dict(doc)
    exp = doc.get("experiment")
    if exp is None:
        raise InvariantViolation("missing required key 'experiment'")
    if exp not in EXPERIMENTS:
        raise InvariantViolation(f"experiment must be one of {EXPERIMENTS}, got {exp!r}")
    required, optional = SECTIONS[exp]
    allowed = set(TOP_LEVEL) | set(required) | set(optional) | {"check"}
    for key in doc:
        if key not in allowed:
            raise UnknownKey(f"unknown key '{key}' for experiment {exp!r}", key=key)
    seed = doc.get("seed", TOP_LEVEL["seed"])
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise InvariantViolation("seed must be a non-negative integer")
    outputs = list(doc.get("outputs", TOP_LEVEL["outputs"]))
    for o in outputs:
        if o not in FORMATS:
            raise InvariantViolation(f"output format {o!r} not in {FORMATS}")
    sections = {}
    for name in required + optional:
        if name in doc:
            sections[name] = _resolve_table(name, doc[name], SCHEMAS[name])
        elif name in required and name not in DEFAULTED:
            raise InvariantViolation(f"experiment {exp!r} needs a [{name}] table")
        elif name in DEFAULTED:
            sections[name] = _resolve_table(name, {}, SCHEMAS[name])
    metric = sections.get("metric")
    if metric is not None and metric["kind"] == "power_law" and "alpha" not in metric:
        metric["alpha"] = 1.0  # the natural-gradient metric
    check = doc.get("check", {})
    if not isinstance(check, dict):
        raise ParseError("[check] must be a table")
    for metric, bound in check.items():
        if not isinstance(bound, dict) or not bound or set(bound) - {"min", "max"}:
            raise UnknownKey(f"check '{metric}' needs a table with 'min' and/or 'max'", key=f"check.{metric}")
    cfg = ExperimentConfig(exp, seed, outputs, str(doc.get("out_dir", TOP_LEVEL["out_dir"])),
                           sections, copy.deepcopy(check))
    _validate(cfg)
    return cfg


def parse_config(text: str) -> ExperimentConfig:
    """Parse TOML text (or a manifest's JSON) into a validated config."""
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(f"JSON parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
        doc = doc.get("config", doc)
    else:
        try:
            doc = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ParseError(f"TOML parse error: {exc}") from exc
    return config_from_dict(doc)


def _metric_dict(sec):
    return {k: v for k, v in sec.items() if v is not None}


def _build(cfg: ExperimentConfig, name: str):
    sec = cfg.sections.get(name)
    try:
        if name == "landscape":
            return landscape_from_dict(sec)
        if name == "noise":
            return None if sec is None else noise_from_dict(sec)
        if name == "metric":
            return metric_spec_from_dict(_metric_dict(sec))
        if name == "grid":
            return None if sec is None else GridSpec(tuple(sec["lo"]), tuple(sec["hi"]), tuple(sec["n"]))
    except KeyError as exc:
        raise InvariantViolation(f"[{name}] is missing key {exc}") from exc
    except TypeError as exc:
        raise InvariantViolation(f"[{name}] has missing or inapplicable parameters: {exc}") from exc
    except (GeoLearnError, ValueError) as exc:
        raise InvariantViolation(f"[{name}] {exc}") from exc
    raise KeyError(name)


def _steps(sec, what):
    if sec.get("steps") is not None:
        return int(sec["steps"])
    if sec.get("t_end") is not None:
        return int(round(sec["t_end"] / sec["dt"]))
    raise InvariantViolation(f"[{what}] needs 'steps' or 't_end'")


def _validate(cfg: ExperimentConfig) -> None:
    """Cross-field invariants that can be checked before running."""
    s = cfg.sections
    built = {n: _build(cfg, n) for n in ("landscape", "noise", "metric", "grid") if n in s}
    if "fokker_planck" in s:
        fp = s["fokker_planck"]
        try:
            op = FokkerPlanckOperator(built["grid"], built["landscape"], built["noise"], built["metric"],
                                      fp["gamma"], form=fp["form"], scheme=fp["scheme"])
        except (GeoLearnError, ValueError) as exc:
            raise InvariantViolation(f"[fokker_planck] {exc}") from exc
        if fp["dt"] > op.stability_bound:
            raise InvariantViolation(
                f"fokker_planck.dt = {fp['dt']} exceeds the stability bound {op.stability_bound:.6g}"
            )
    if "langevin" in s:
        _steps(s["langevin"], "langevin")
        if int(s["langevin"]["ensemble_size"]) < 1:
            raise InvariantViolation("langevin.ensemble_size must be >= 1")
    if "initial" in s and s["initial"]["kind"] not in ("uniform", "point", "gaussian", "boltzmann"):
        raise InvariantViolation("initial.kind must be uniform, point, gaussian or boltzmann")
    if "quantum" in s:
        q = s["quantum"]
        if built["grid"].dims != 1 or not isinstance(built["landscape"], Quadratic):
            raise InvariantViolation("the quantum experiment needs a 1D grid and a quadratic landscape")
        if q["boundary"] not in ("dirichlet", "periodic"):
            raise InvariantViolation("quantum.boundary must be 'dirichlet' or 'periodic'")
        if not (q["gamma"] > 0 and q["beta_quantum"] > 0):
            raise InvariantViolation("quantum.gamma and quantum.beta_quantum must be positive")
    if "evolution" in s and s["evolution"]["acceptance"] not in ("sigmoid", "metropolis"):
        raise InvariantViolation("evolution.acceptance must be 'sigmoid' or 'metropolis'")
    if "optimize" in s and s["optimize"]["mode"] not in ("diagonal", "full"):
        raise InvariantViolation("optimize.mode must be 'diagonal' or 'full'")


# -- output helpers ------------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path: Path, columns: Sequence[str], rows) -> None:
    """Header row plus rows; floats in shortest round-trip form."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(x) for x in r])
    _atomic_write(Path(path), buf.getvalue().encode())


def read_csv(path: Path) -> Tuple[List[str], List[List[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise MissingColumn(f"{path} is empty")
    return rows[0], rows[1:]


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.bool_,)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else repr(x)
    return x


def write_json(path: Path, obj) -> None:
    _atomic_write(Path(path), (json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n").encode())


# -- experiment runners --------------------------------------------------------------


@dataclass
class Result:
    metrics: Dict[str, Any] = field(default_factory=dict)
    tables: Dict[str, Tuple[List[str], List[list]]] = field(default_factory=dict)
    documents: Dict[str, Any] = field(default_factory=dict)
    plots: Dict[str, Dict[str, Any]] = field(default_factory=dict)  # table name -> plot spec


def _initial_ensemble(cfg, grid, size, dim):
    ini = cfg.sections["initial"]
    kind = ini["kind"]
    if kind == "uniform":
        if grid is None:
            raise InvariantViolation("a uniform initial ensemble needs a [grid]")
        return Ensemble.uniform(grid, size, cfg.seed)
    if kind == "point":
        return Ensemble.at_point(_vec(ini["q0"], dim, "initial.q0"), size)
    if kind == "gaussian":
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5EED]))
        mean = _vec(ini["mean"], dim, "initial.mean")
        std = _vec(ini["std"], dim, "initial.std")
        return Ensemble(mean + std * rng.standard_normal((size, dim)))
    raise InvariantViolation(f"initial.kind {kind!r} is not available for ensembles")


def _initial_density(cfg, op: FokkerPlanckOperator, land, gamma):
    ini = cfg.sections["initial"]
    grid = op.grid
    kind = ini["kind"]
    if kind == "uniform":
        return GridDensity.uniform(grid, op.volumes)
    if kind == "boltzmann":
        return stationary_boltzmann(land, gamma, grid, op.volumes)
    if kind == "gaussian":
        mean = _vec(ini["mean"], grid.dims, "initial.mean")
        std = _vec(ini["std"], grid.dims, "initial.std")
        fn = lambda x: np.exp(-0.5 * np.sum(((x - mean) / std) ** 2, axis=-1))
        return GridDensity.from_function(grid, fn, op.volumes)
    if kind == "point":
        q0 = _vec(ini["q0"], grid.dims, "initial.q0")
        vals = np.zeros(grid.shape)
        idx = tuple(
            int(np.clip(np.floor((q0[a] - grid.lo[a]) / grid.dx[a]), 0, grid.n[a] - 1)) for a in range(grid.dims)
        )
        vals[idx] = 1.0
        return GridDensity(grid, vals, op.volumes).normalized()
    raise InvariantViolation(f"unknown initial.kind {kind!r}")


def _vec(x, dim, name):
    if x is None:
        raise InvariantViolation(f"{name} is required")
    v = np.atleast_1d(np.asarray(x, dtype=float))
    if v.shape != (dim,):
        raise InvariantViolation(f"{name} must have {dim} entries")
    return v


def _axis_columns(dim, prefix):
    return [f"{prefix}_{i}" for i in range(dim)]


def _run_langevin(cfg: ExperimentConfig, res: Result, grid=None):
    sec = cfg.sections["langevin"]
    land, noise, spec = _build(cfg, "landscape"), _build(cfg, "noise"), _build(cfg, "metric")
    grid = grid if grid is not None else _build(cfg, "grid")
    steps = _steps(sec, "langevin")
    sim = SimConfig(sec["gamma"], sec["dt"], steps, int(sec["ensemble_size"]), cfg.seed, spec,
                    sec["drift_correction"], sec["snapshot_every"])
    ens = _initial_ensemble(cfg, grid, sim.ensemble_size, land.dim)
    traj = run_ensemble(land, noise, sim, ens)
    dim = land.dim
    cols = ["time", "members"] + _axis_columns(dim, "mean") + _axis_columns(dim, "var")
    rows = []
    for m in traj.moments():
        var = np.diag(np.atleast_2d(m["cov"])).tolist() if m["cov"] is not None else [float("nan")] * dim
        rows.append([m["time"], m["members"]] + list(m["mean"]) + var)
    res.tables["moments"] = (cols, rows)
    res.documents["moments"] = traj.moments()
    if sec["write_members"]:
        member_rows = []
        for snap in traj.snapshots:
            for i, q in enumerate(snap.states):
                member_rows.append([snap.time, i] + q.tolist())
        res.tables["trajectories"] = (["time", "member"] + [f"q_{i}" for i in range(dim)], member_rows)
    res.plots["moments"] = {"kind": "line", "x": "time", "y": _axis_columns(dim, "var"),
                            "xlabel": "time", "ylabel": "variance"}
    final = traj.final.states
    ok = np.all(np.isfinite(final), axis=1)
    res.metrics["failures"] = len(traj.failures)
    res.metrics["final_mean"] = final[ok].mean(axis=0).tolist()
    res.metrics["final_var"] = final[ok].var(axis=0, ddof=1).tolist()
    if steps == 1 and cfg.sections["initial"]["kind"] == "point":
        # one-step increments against gamma^2 dt g^-1 kappa g^-1 at the start point
        q0 = ens.states[0]
        inc = final[ok] - q0
        emp = np.atleast_2d(np.cov(inc, rowvar=False))
        geo = local_geometry(noise.kappa_field(q0), spec)
        pred = sim.gamma ** 2 * sim.dt * np.asarray(geo.diffusion)
        res.metrics["increment_cov"] = emp.tolist()
        res.metrics["increment_cov_predicted"] = pred.tolist()
        res.metrics["increment_cov_rel_error"] = float(np.max(np.abs(emp - pred)) / np.max(np.abs(pred)))
    if grid is not None and grid.dims == 1:
        dens = empirical_density(traj.final, grid)
        x = grid.axis_centers(0)
        res.tables["histogram"] = (["x", "density"], [[a, b] for a, b in zip(x, dens.values)])
    return traj


def _run_fokker_planck(cfg: ExperimentConfig, res: Result):
    sec = cfg.sections["fokker_planck"]
    land, noise, spec, grid = (_build(cfg, n) for n in ("landscape", "noise", "metric", "grid"))
    gamma, dt = sec["gamma"], sec["dt"]
    op = FokkerPlanckOperator(grid, land, noise, spec, gamma, form=sec["form"], scheme=sec["scheme"])
    steps = int(round(sec["t_end"] / dt))
    every = int(sec["record_every"])
    p0 = _initial_density(cfg, op, land, gamma)
    traj = op.evolve(p0, dt, steps, every=every)
    final = traj[-1]
    try:
        eq = stationary_boltzmann(land, gamma, grid, op.volumes)
    except GeoLearnError:
        eq = None
    times = [min(i * every, steps) * dt for i in range(len(traj))]
    cols = ["time", "mass", "entropy"] + _axis_columns(grid.dims, "mean") + _axis_columns(grid.dims, "var")
    rows = [[t, total_mass(p), shannon_entropy(p)] + p.mean().tolist() + p.variance().tolist()
            for t, p in zip(times, traj)]
    res.tables["history"] = (cols, rows)
    res.plots["history"] = {"kind": "line", "x": "time", "y": ["entropy"], "xlabel": "time", "ylabel": "entropy"}
    pts = grid.points().reshape(-1, grid.dims)
    dcols = _axis_columns(grid.dims, "x") + ["density"] + (["boltzmann"] if eq is not None else [])
    flat = [final.values.ravel()] + ([eq.values.ravel()] if eq is not None else [])
    res.tables["density"] = (dcols, [list(pts[i]) + [f[i] for f in flat] for i in range(pts.shape[0])])
    m = res.metrics
    m["steps"] = steps
    m["mass_error"] = abs(total_mass(final) - 1.0)
    m["final_mean"] = final.mean().tolist()
    m["final_variance"] = final.variance().tolist()
    if eq is not None:
        m["l1_to_boltzmann"] = l1_distance(final, eq)
    if every == 1 or steps % every == 0:
        ds = entropy_change(traj)
        prod = entropy_production(traj, land, noise, spec, gamma, dt * every, form=sec["form"])
        m["entropy_change"] = ds
        m["production_integral"] = prod
        m["production_rel_error"] = abs(prod - ds) / abs(ds) if ds != 0 else abs(prod)
    if sec["stationary_check"]:
        if eq is None:
            raise InvariantViolation("stationary_check needs a representable stationary state")
        st = op.evolve(eq, dt, steps, every=steps)
        m["stationary_entropy_change"] = entropy_change(st)
    return op, traj


def _run_langevin_vs_fp(cfg: ExperimentConfig, res: Result):
    grid = _build(cfg, "grid")
    if grid.dims != 1:
        raise InvariantViolation("langevin_vs_fp compares 1D marginals; use a 1D grid")
    lang = Result()
    traj = _run_langevin(cfg, lang, grid)
    fpres = Result()
    op, fp_traj = _run_fokker_planck(cfg, fpres)
    t_l = traj.final.time
    t_f = cfg.sections["fokker_planck"]["dt"] * fpres.metrics["steps"]
    if not math.isclose(t_l, t_f, rel_tol=1e-9, abs_tol=1e-12):
        raise InvariantViolation(f"langevin and fokker_planck end times differ ({t_l} vs {t_f})")
    x = traj.final.states[:, 0]
    x = np.sort(x[np.isfinite(x)])
    final = fp_traj[-1]
    ks = float(stats.kstest(x, lambda s: density_cdf_1d(final, s)).statistic)
    emp = empirical_density(traj.final, grid, op.volumes)
    centers = grid.axis_centers(0)
    res.tables["densities"] = (["x", "fokker_planck", "langevin"],
                               [[c, a, b] for c, a, b in zip(centers, final.values, emp.values)])
    res.plots["densities"] = {"kind": "line", "x": "x", "y": ["fokker_planck", "langevin"],
                              "xlabel": "q", "ylabel": "density"}
    res.tables.update({f"fp_{k}": v for k, v in fpres.tables.items() if k == "history"})
    res.metrics.update({f"fp_{k}": v for k, v in fpres.metrics.items()})
    res.metrics.update({f"langevin_{k}": v for k, v in lang.metrics.items()})
    res.metrics["ks_distance"] = ks
    res.metrics["outside_grid"] = emp.overflow


def _canonical_grid(land, beta, lo, hi, n=200001):
    """Normalised ``exp(-beta H)`` on a fine 1D grid: points, pdf and CDF."""
    x = np.linspace(lo, hi, n)
    h = np.asarray(land.value(x[:, None]), dtype=float)
    w = np.exp(-beta * (h - h.min()))
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (w[1:] + w[:-1]) * np.diff(x))])
    z = cdf[-1]
    return x, w / z, cdf / z


def _jump(sec, dim):
    c = np.atleast_2d(np.asarray(sec["jump_covariance"], dtype=float))
    if c.shape != (dim, dim):
        raise InvariantViolation(f"jump_covariance must be {dim}x{dim}")
    return JumpModel(c)


def _run_evolution(cfg: ExperimentConfig, res: Result):
    sec = cfg.sections["evolution"]
    land = _build(cfg, "landscape")
    beta = float(sec["beta_selection"])
    rule = AcceptanceRule(sec["acceptance"], beta)
    jm = _jump(sec, land.dim)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xC4A1]))
    chain = evolve_chain(_vec(sec["q0"], land.dim, "evolution.q0"), land, jm, rule, int(sec["steps"]), rng,
                         sec["burn_in_fraction"])
    every = int(sec["chain_every"])
    cols = ["step"] + _axis_columns(land.dim, "q") + ["accepted"]
    acc = np.concatenate([[False], chain.accepted])
    rows = [[i] + chain.samples[i].tolist() + [bool(acc[i])] for i in range(0, chain.samples.shape[0], every)]
    res.tables["chain"] = (cols, rows)
    post = chain.post_burn_in
    m = res.metrics
    m["post_burn_in_samples"] = int(post.shape[0])
    m["acceptance_rate"] = chain.acceptance_rate
    m["sample_mean"] = post.mean(axis=0).tolist()
    m["sample_variance"] = post.var(axis=0, ddof=1).tolist()
    if land.dim == 1:
        span = 12.0 * math.sqrt(max(float(post.var()), 1e-12))
        lo, hi = float(post.min()) - span, float(post.max()) + span
        xs, pdf, cdf = _canonical_grid(land, beta, lo, hi)
        mean = trapezoid(xs * pdf, xs)
        var = trapezoid((xs - mean) ** 2 * pdf, xs)
        m["canonical_variance"] = float(var)
        m["variance_rel_error"] = abs(float(post.var(ddof=1)) - var) / var
        m["ks_distance"] = float(stats.kstest(post[:, 0], lambda s: np.interp(s, xs, cdf)).statistic)
    n_pairs = int(sec["balance_pairs"])
    if n_pairs:
        lands = [land] + [landscape_from_dict(d) for d in sec["extra_landscapes"]]
        brng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xBA1]))
        worst = 0.0
        for ls in lands:
            for kind in sec["balance_rules"]:
                q = sec["balance_scale"] * brng.standard_normal((n_pairs, ls.dim))
                qp = sec["balance_scale"] * brng.standard_normal((n_pairs, ls.dim))
                r = detailed_balance_ratio(q, qp, ls, AcceptanceRule(kind, beta))
                worst = max(worst, float(np.max(np.abs(r - 1.0))))
        m["max_balance_error"] = worst


def _run_lande(cfg: ExperimentConfig, res: Result):
    sec = cfg.sections["lande"]
    land = _build(cfg, "landscape")
    beta = float(sec["beta_selection"])
    jm = _jump(sec, land.dim)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        cmp = lande_vs_chain(_vec(sec["q0"], land.dim, "lande.q0"), land, jm, AcceptanceRule("sigmoid", beta),
                             beta, int(sec["horizon"]), int(sec["ensemble_size"]), int(sec["snapshots"]),
                             seed=cfg.seed)
    dim = land.dim
    cols = ["time"] + _axis_columns(dim, "ode") + _axis_columns(dim, "chain") + _axis_columns(dim, "stderr")
    rows = [[t] + cmp.ode_mean[k].tolist() + cmp.chain_mean[k].tolist() + cmp.stderr[k].tolist()
            for k, t in enumerate(cmp.times)]
    res.tables["lande"] = (cols, rows)
    res.plots["lande"] = {"kind": "line", "x": "time", "y": ["ode_0", "chain_0"], "xlabel": "proposals",
                          "ylabel": "mean trait"}
    res.documents["lande"] = cmp.to_dict()
    res.metrics.update(max_z=cmp.max_z, max_deviation=cmp.max_deviation,
                       expansion_parameter=cmp.expansion_parameter,
                       expansion_warning=bool(caught))


def _run_quantum(cfg: ExperimentConfig, res: Result):
    sec = cfg.sections["quantum"]
    land, grid = _build(cfg, "landscape"), _build(cfg, "grid")
    gamma, beta = sec["gamma"], sec["beta_quantum"]
    hbar, mass = planck_mass_from(gamma, beta)
    v = effective_potential(land, None, gamma, beta, sec["f"], grid)
    k = float(land.hessian.entries[0, 0])
    # V = gamma k^2 (q-c)^2 + const = M omega^2 (q-c)^2 / 2
    omega = math.sqrt(2.0 * gamma * k * k / mass)
    v_min = sec["f"] - gamma * k / beta
    ref = v_min + 0.5 * hbar * omega
    energy, psi = ground_state(v, hbar, mass, boundary=sec["boundary"])
    p, _ = madelung_decompose(psi, hbar)
    qpot = quantum_potential(p, None, gamma, beta)
    total = v + qpot
    support = p.values > sec["support_threshold"] * p.values.max()
    mean_vq, std_vq = total.stats(support)
    x = grid.axis_centers(0)
    res.tables["ground_state"] = (["x", "V", "psi", "Q", "V_plus_Q"],
                                  [list(r) for r in zip(x, v.values, psi.re, qpot.values, total.values)])
    c = float(land.center[0])
    shape = np.exp(-(mass * omega / (2 * hbar)) * (x - c - sec["displacement"]) ** 2)
    psi0 = WaveField.from_complex(grid, shape)
    dt = sec["dt"]
    period = 2 * math.pi / omega
    prop = SplitStepPropagator(v, hbar, mass, dt, sec["boundary"])
    steps = int(round(sec["periods"] * period / dt))
    cont_steps = int(round(sec["continuity_periods"] * period / dt))
    cur = psi0.psi
    means = [psi0.position_mean()]
    dens = p0 = GridDensity(grid, psi0.density())
    _, phi = madelung_decompose(psi0, hbar)
    l1_cont = None
    for i in range(1, steps + 1):
        cur = prop.step(cur)
        means.append(float(np.sum(np.abs(cur) ** 2 * x) * grid.dx[0]))
        if i <= cont_steps:
            wf = WaveField(grid, cur.real, cur.imag)
            p_exact, phi_next = madelung_decompose(wf, hbar)
            dens = continuity_step(dens, phi, gamma, dt, phi_next)
            phi = phi_next
            if i == cont_steps:
                l1_cont = l1_distance(dens, p_exact)
    norm_drift = abs(float(np.sum(np.abs(cur) ** 2) * grid.dx[0]) - 1.0)
    times = np.arange(steps + 1) * dt
    freq = _fit_frequency(times, np.array(means), omega)
    res.tables["oscillation"] = (["time", "mean_q"], [[t, mq] for t, mq in zip(times, means)])
    res.plots["oscillation"] = {"kind": "line", "x": "time", "y": ["mean_q"], "xlabel": "time",
                                "ylabel": "<q>"}
    res.metrics.update(
        hbar=hbar, mass=mass, omega=omega,
        ground_energy=energy, reference_energy=ref,
        energy_rel_error=abs(energy - ref) / abs(0.5 * hbar * omega),
        v_plus_q_mean=mean_vq, v_plus_q_std=std_vq,
        v_plus_q_rel_std=std_vq / abs(mean_vq) if mean_vq else float("inf"),
        oscillation_frequency=freq, frequency_rel_error=abs(freq - omega) / omega,
        norm_drift=norm_drift,
    )
    if l1_cont is not None:
        res.metrics["continuity_l1"] = l1_cont


def _fit_frequency(t, y, guess):
    from scipy.optimize import curve_fit

    def model(tt, a, b, w, c):
        return a * np.cos(w * tt) + b * np.sin(w * tt) + c

    popt, _ = curve_fit(model, t, y, p0=[y[0] - y.mean(), 0.0, guess, y.mean()])
    return abs(float(popt[2]))


def _run_optimize(cfg: ExperimentConfig, res: Result):
    sec = cfg.sections["optimize"]
    land, spec = _build(cfg, "landscape"), _build(cfg, "metric")
    noise = _build(cfg, "noise") if "noise" in cfg.sections else None
    run = OptRun(land, noise, spec, sec["gamma"], int(sec["steps"]), _vec(sec["q0"], land.dim, "optimize.q0"),
                 cfg.seed, int(sec["record_every"]), sec["mode"], sec["decay"], sec["epsilon_floor"],
                 sec["grad_tol"])
    rec = run_benchmark(run)
    res.tables["convergence"] = (rec.columns, rec.rows)
    res.plots["convergence"] = {"kind": "line", "x": "step", "y": ["loss"], "logy": True, "xlabel": "step",
                                "ylabel": "U(q)"}
    res.metrics.update(final_loss=rec.rows[-1][1], final_grad_norm=rec.rows[-1][2],
                       steps_to_tol=rec.steps_to_tol if rec.steps_to_tol is not None else -1)
    if sec["reductions"]:
        res.metrics.update(regime_reductions(land.dim, cfg.seed))


def _run_phase_sweep(cfg: ExperimentConfig, res: Result):
    sec = cfg.sections["phase_sweep"]
    rows, decades, low_err, high_err = [], [], [], []
    for pair in sec["pairs"]:
        if len(pair) != 2:
            raise InvariantViolation("phase_sweep.pairs entries must be [epsilon, zeta]")
        e, z = float(pair[0]), float(pair[1])
        lo = math.log10(sec["lambda_lo_factor"] * e * e)
        hi = math.log10(sec["lambda_hi_factor"] / (z * z))
        n = max(2, int(round((hi - lo) * sec["points_per_decade"])) + 1)
        lam = np.logspace(lo, hi, n)
        pm = phase_sweep([e], [z], lam)
        decades.append(pm.band_decades(0, 0))
        low_err.append(abs(float(pm.alpha_eff[0, 0, 0])))
        high_err.append(abs(float(pm.alpha_eff[0, 0, -1]) - 1.0))
        rows.extend(list(r[:3]) + [e * z] + list(r[3:]) for r in pm.rows())
    res.tables["phase_map"] = (["epsilon", "zeta", "lambda_kappa", "epsilon_zeta", "lambda_g", "alpha_eff",
                                "regime"], rows)
    res.plots["phase_map"] = {"kind": "heatmap", "x": "lambda_kappa", "y": "epsilon_zeta", "value": "alpha_eff",
                              "logx": True, "logy": True, "xlabel": "lambda_kappa",
                              "ylabel": "epsilon * zeta"}
    res.metrics.update(band_decades=decades, limit_low_error=low_err, limit_high_error=high_err)


RUNNERS = {
    "langevin": _run_langevin,
    "fokker_planck": _run_fokker_planck,
    "langevin_vs_fp": _run_langevin_vs_fp,
    "evolution": _run_evolution,
    "lande_check": _run_lande,
    "quantum": _run_quantum,
    "optimize": _run_optimize,
    "phase_sweep": _run_phase_sweep,
}


def _lookup(metrics, path):
    cur = metrics
    for part in path.split("."):
        if isinstance(cur, dict) and part in cur:
            cur = cur[part]
        elif isinstance(cur, list) and part.lstrip("-").isdigit():
            cur = cur[int(part)]
        else:
            return None
    return cur


def evaluate_checks(check: Dict[str, Dict[str, float]], metrics: Dict[str, Any]) -> List[Dict[str, Any]]:
    out = []
    for name, bound in check.items():
        val = _lookup(metrics, name)
        values = val if isinstance(val, list) else [val]
        ok = val is not None and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in values)
        if ok:
            for v in values:
                if "min" in bound and not v >= bound["min"]:
                    ok = False
                if "max" in bound and not v <= bound["max"]:
                    ok = False
        out.append({"metric": name, "value": val, **bound, "passed": bool(ok)})
    return out


@dataclass
class RunOutcome:
    status: int
    out_dir: Path
    manifest: Dict[str, Any]


def _versions():
    return {"geolearn": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def run_experiment(cfg: ExperimentConfig, out_dir: Optional[os.PathLike] = None) -> RunOutcome:
    """Run one experiment, write its artifacts and manifest, return the exit status."""
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res = Result()
    manifest: Dict[str, Any] = {
        "config": cfg.to_dict(),
        "config_sha256": cfg.digest(),
        "seed": cfg.seed,
        "versions": _versions(),
    }
    start = time.perf_counter()
    status = EXIT_OK
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            RUNNERS[cfg.experiment](cfg, res)
    except ConfigError as exc:
        status = EXIT_CONFIG
        manifest["error"] = {"type": type(exc).__name__, "message": str(exc)}
    except Exception as exc:  # serialised into the manifest, reported via exit status
        status = EXIT_RUNTIME
        manifest["error"] = {"type": type(exc).__name__, "message": str(exc)}
    wall = time.perf_counter() - start
    res.metrics["wall_time"] = wall
    manifest["wall_time"] = wall
    manifest["metrics"] = res.metrics
    files = []
    if status == EXIT_OK:
        checks = evaluate_checks(cfg.check, res.metrics)
        manifest["checks"] = checks
        if not all(c["passed"] for c in checks):
            status = EXIT_CHECK
        if "csv" in cfg.outputs or "svg" in cfg.outputs:
            for name, (cols, rows) in res.tables.items():
                path = out / f"{name}.csv"
                write_csv(path, cols, rows)
                files.append(path.name)
                if "svg" in cfg.outputs and name in res.plots:
                    svg = out / f"{name}.svg"
                    emit_plot(path, res.plots[name], svg)
                    files.append(svg.name)
        if "json" in cfg.outputs:
            for name, doc in res.documents.items():
                write_json(out / f"{name}.json", doc)
                files.append(f"{name}.json")
            write_json(out / "metrics.json", res.metrics)
            files.append("metrics.json")
    manifest["status"] = status
    manifest["outputs"] = files
    write_json(out / "manifest.json", manifest)
    return RunOutcome(status, out, manifest)


# -- plotting ------------------------------------------------------------------------


def _load_plot_spec(spec) -> Dict[str, Any]:
    if isinstance(spec, dict):
        return dict(spec)
    text = Path(spec).read_text()
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ParseError(f"plot spec: {exc}") from exc


PLOT_KEYS = {"kind", "x", "y", "value", "logx", "logy", "title", "xlabel", "ylabel"}


def emit_plot(csv_path, plot_spec, svg_path=None) -> Path:
    """Render a line plot or heatmap of CSV columns to SVG.

    ``plot_spec`` is a mapping or a TOML file with ``kind`` (``line`` or
    ``heatmap``), ``x``, ``y`` (a list of columns for lines, one column for
    heatmaps), ``value`` (heatmaps), and optional ``logx``, ``logy``,
    ``title``, ``xlabel``, ``ylabel``.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    spec = _load_plot_spec(plot_spec)
    extra = set(spec) - PLOT_KEYS
    if extra:
        raise UnknownKey(f"unknown plot-spec keys {sorted(extra)}", key=sorted(extra)[0])
    header, rows = read_csv(csv_path)
    if not rows:
        raise MissingColumn(f"{csv_path} has no data rows")
    kind = spec.get("kind", "line")
    ys = spec.get("y", [])
    ys = [ys] if isinstance(ys, str) else list(ys)
    needed = [spec.get("x")] + ys + ([spec.get("value")] if kind == "heatmap" else [])
    for col in needed:
        if col is None or col not in header:
            raise MissingColumn(f"column {col!r} not in {csv_path}")

    def col(name):
        i = header.index(name)
        return np.array([float(r[i]) for r in rows])

    fig, ax = plt.subplots(figsize=(6, 4))
    if kind == "line":
        x = col(spec["x"])
        for y in ys:
            ax.plot(x, col(y), label=y)
        if len(ys) > 1:
            ax.legend()
    elif kind == "heatmap":
        x, y, v = col(spec["x"]), col(ys[0]), col(spec["value"])
        xs, ys_u = np.unique(x), np.unique(y)
        grid = np.full((ys_u.size, xs.size), np.nan)
        grid[np.searchsorted(ys_u, y), np.searchsorted(xs, x)] = v
        mesh = ax.pcolormesh(xs, ys_u, grid, shading="nearest")
        fig.colorbar(mesh, ax=ax, label=spec["value"])
    else:
        plt.close(fig)
        raise InvariantViolation(f"plot kind must be 'line' or 'heatmap', got {kind!r}")
    if spec.get("logx"):
        ax.set_xscale("log")
    if spec.get("logy"):
        ax.set_yscale("log")
    ax.set_xlabel(spec.get("xlabel", spec["x"]))
    ax.set_ylabel(spec.get("ylabel", ", ".join(ys)))
    if "title" in spec:
        ax.set_title(spec["title"])
    fig.tight_layout()
    buf = io.BytesIO()
    # fixed salt keeps element ids, and so the file bytes, reproducible
    with plt.rc_context({"svg.hashsalt": "geolearn"}):
        fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    target = Path(svg_path) if svg_path is not None else Path(csv_path).with_suffix(".svg")
    _atomic_write(target, buf.getvalue())
    return target


# -- presets ---------------------------------------------------------------------------


def preset_names() -> List[str]:
    files = resources.files("geolearn").joinpath("presets")
    return sorted(p.name[:-5] for p in files.iterdir() if p.name.endswith(".toml"))


def preset_text(name: str) -> str:
    path = resources.files("geolearn").joinpath("presets", f"{name}.toml")
    if not path.is_file():
        raise ConfigError(f"no preset named {name!r}; available: {', '.join(preset_names())}")
    return path.read_text()


def _summary(text: str) -> str:
    for line in text.splitlines():
        if line.startswith("#"):
            return line.lstrip("# ").strip()
    return ""


# -- entry point -------------------------------------------------------------------------


def _parser():
    p = argparse.ArgumentParser(prog="geolearn", description="Learning-dynamics experiment runner.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment from a TOML config, a manifest, or a preset name")
    r.add_argument("config")
    r.add_argument("--out", default=None, help="output directory (overrides out_dir)")
    r.add_argument("--seed", type=int, default=None, help="override the config seed")
    pl = sub.add_parser("plot", help="render a CSV artifact to SVG")
    pl.add_argument("csv")
    pl.add_argument("spec")
    pl.add_argument("--out", default=None)
    pr = sub.add_parser("presets", help="list or show built-in presets")
    pr.add_argument("action", choices=["list", "show"])
    pr.add_argument("name", nargs="?")
    return p


def _load_config_text(arg: str) -> str:
    path = Path(arg)
    if path.is_file():
        return path.read_text()
    if arg in preset_names():
        return preset_text(arg)
    raise ConfigError(f"config {arg!r} is neither a file nor a preset name")


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "presets":
            if args.action == "list":
                for name in preset_names():
                    print(f"{name}\t{_summary(preset_text(name))}")
            else:
                if not args.name:
                    raise ConfigError("presets show needs a name")
                print(preset_text(args.name), end="")
            return EXIT_OK
        if args.command == "plot":
            print(emit_plot(args.csv, args.spec, args.out))
            return EXIT_OK
        cfg = parse_config(_load_config_text(args.config))
        if args.seed is not None:
            if args.seed < 0:
                raise InvariantViolation("--seed must be non-negative")
            cfg.seed = args.seed
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (GeoLearnError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    outcome = run_experiment(cfg, args.out)
    for c in outcome.manifest.get("checks", []):
        print(f"{'PASS' if c['passed'] else 'FAIL'} {c['metric']} = {c['value']}")
    if "error" in outcome.manifest:
        err = outcome.manifest["error"]
        print(f"{err['type']}: {err['message']}", file=sys.stderr)
    print(f"wrote {outcome.out_dir} (status {outcome.status})")
    return outcome.status


if __name__ == "__main__":
    sys.exit(main())
