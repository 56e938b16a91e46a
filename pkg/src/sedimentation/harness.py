"""
Monte Carlo campaigns: ensembles of solves at fixed ``L``, sweeps over ``L``
with power-law and log-law fits, persistence and plot-data export.

Every realization ``(L, i)`` draws its configuration from the ensemble's own
seed stream, so records do not depend on the order or process in which they
are computed.  Aggregates are always formed in ``(L, i)`` order, which makes
them bitwise reproducible for any worker count.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .point_process import EnsembleSpec
from .statistics import LogLawFit, PowerLawFit, fit_log_law, fit_power_law, jackknife

__all__ = [
    "SCHEMA_VERSION",
    "MODELS",
    "ExperimentConfig",
    "ObservableSeries",
    "ScalingResult",
    "EnsembleFailure",
    "SchemaVersionError",
    "run_ensemble",
    "scaling_sweep",
    "aggregate_records",
    "scaling_from_values",
    "persist_result",
    "load_result",
    "emit_plot_data",
    "resolve_workers",
]

SCHEMA_VERSION = 1
MODELS = ("linear", "full", "scalar_proxy", "synthetic")
WORKERS_ENV = "SEDIMENTATION_WORKERS"
MAX_FAILURE_FRACTION = 0.05


class EnsembleFailure(RuntimeError):
    """Too many failed realizations (all of them, or more than 5% in a sweep)."""

    def __init__(self, message, records=None):
        super().__init__(message)
        self.records = records or []


class SchemaVersionError(ValueError):
    """A persisted result was written with an unsupported schema version."""


@dataclass
class ExperimentConfig:
    """Everything needed to rerun a campaign.

    ``points_per_length`` fixes the grid spacing ``h = 1 / points_per_length``
    for every ``L``; each ``L * points_per_length`` must be an admissible
    grid size.  ``estimator`` selects the primary fluctuation observable of
    the linear and full models (``"field"`` or ``"particle"``).
    """

    model: str
    ensemble: EnsembleSpec
    L_values: tuple
    points_per_length: float = 4.0
    e: tuple = ()
    tol: float = 1e-8
    output_dir: str = "runs"
    estimator: str = "field"
    k_cut: float = 4.0
    synthetic_exponent: float = 0.5
    max_iter: int = 500

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"unknown model {self.model!r}; expected one of {MODELS}")
        if isinstance(self.ensemble, dict):
            self.ensemble = EnsembleSpec.from_dict(self.ensemble)
        self.L_values = tuple(float(v) for v in self.L_values)
        if not self.L_values:
            raise ValueError("L list is empty")
        if any(b <= a for a, b in zip(self.L_values, self.L_values[1:])):
            raise ValueError("L list must be strictly increasing")
        d = self.ensemble.d
        if not self.e:
            self.e = tuple([0.0] * (d - 1) + [-1.0])
        self.e = tuple(float(v) for v in self.e)
        if len(self.e) != d:
            raise ValueError("gravity vector length must equal the dimension")
        if self.estimator not in ("field", "particle"):
            raise ValueError("estimator must be 'field' or 'particle'")
        if self.model in ("linear", "full"):
            for L in self.L_values:
                self.n_grid(L)

    @property
    def d(self) -> int:
        return self.ensemble.d

    @property
    def n_realizations(self) -> int:
        return self.ensemble.n_realizations

    def n_grid(self, L: float) -> int:
        n = L * self.points_per_length
        if abs(n - round(n)) > 1e-9:
            raise ValueError(f"L={L} times {self.points_per_length} points per unit length is not an integer")
        return int(round(n))

    def to_dict(self) -> dict:
        return {"model": self.model, "ensemble": self.ensemble.to_dict(), "L_values": list(self.L_values),
                "points_per_length": self.points_per_length, "e": list(self.e), "tol": self.tol,
                "output_dir": str(self.output_dir), "estimator": self.estimator, "k_cut": self.k_cut,
                "synthetic_exponent": self.synthetic_exponent, "max_iter": self.max_iter}

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        known = {f for f in cls.__dataclass_fields__}
        extra = set(data) - known
        if extra:
            raise ValueError(f"unknown experiment keys: {sorted(extra)}")
        if "ensemble" not in data or "model" not in data or "L_values" not in data:
            raise ValueError("experiment config needs 'model', 'ensemble' and 'L_values'")
        data["ensemble"] = EnsembleSpec.from_dict(data["ensemble"])
        data["L_values"] = tuple(data["L_values"])
        data["e"] = tuple(data.get("e") or ())
        return cls(**data)

    def fingerprint(self) -> str:
        """Hash of everything that affects a single realization (not the L list or output path)."""
        payload = self.to_dict()
        for key in ("L_values", "output_dir"):
            payload.pop(key)
        payload["ensemble"].pop("n_realizations")
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------- single realization

def _solve_one(config: ExperimentConfig, L: float, index: int) -> dict:
    """Sample and solve realization ``index`` at side ``L``; never raises."""
    rec = {"L": float(L), "index": int(index), "status": "ok", "error": None}
    t0 = time.perf_counter()
    try:
        if config.model == "synthetic":
            rec.update(n_particles=0, volume_fraction=0.0,
                       observables={"value": float(L) ** config.synthetic_exponent})
            return rec
        conf = config.ensemble.sample(L, index)
        rec["n_particles"] = conf.n_particles
        rec["volume_fraction"] = conf.volume_fraction
        if config.model == "scalar_proxy":
            from .linear_model import scalar_proxy_samples
            speed, fluct = scalar_proxy_samples(conf, config.k_cut)
            rec["observables"] = {"speed_proxy": speed, "fluctuation_proxy": fluct}
            return rec
        e = np.asarray(config.e, float)
        ne = float(np.linalg.norm(e))
        n_grid = config.n_grid(L)
        if config.model == "linear":
            from .linear_model import solve_linear
            sol = solve_linear(None, conf, e, n_grid=n_grid)
            rec["volume_fraction"] = sol.volume_fraction
            diag = {}
        else:
            from .stokes import solve_sedimentation
            sol = solve_sedimentation(None, conf, e, n_grid=n_grid, tol=config.tol, max_iter=config.max_iter)
            rec["volume_fraction"] = sol.volume_fraction
            diag = {k: sol.residuals[k] for k in ("iterations", "cg_residual", "constraint_residual", "rigidity")
                    if k in sol.residuals}
        v = np.asarray(sol.particle_velocities, float).reshape(-1, config.d)
        field_ms = sol.velocity.l2_norm() ** 2 / sol.domain.volume
        rec["observables"] = {
            "speed": float(np.mean(v @ e) / ne) if len(v) else 0.0,
            "field_ms": float(field_ms),
            "particle_sum": v.sum(axis=0).tolist(),
            "particle_sumsq": float(np.sum(v**2)),
            "particle_spread": float(np.sqrt(np.sum(np.var(v, axis=0)))) if len(v) else 0.0,
        }
        rec["diagnostics"] = diag
    except Exception as exc:  # recorded, never dropped
        rec["status"] = "failed"
        rec["error"] = f"{type(exc).__name__}: {exc}"
        rec["traceback"] = traceback.format_exc(limit=4)
    finally:
        rec["seconds"] = time.perf_counter() - t0
    return rec


def _solve_task(args):
    return _solve_one(*args)


def resolve_workers(workers: int | None = None) -> int:
    """Worker count from the argument, else the environment variable, else 1."""
    if workers is None:
        env = os.environ.get(WORKERS_ENV)
        workers = int(env) if env else 1
    if workers < 1:
        raise ValueError("workers must be >= 1")
    return workers


def _record_path(root: Path, L: float, index: int) -> Path:
    return root / f"L{L:g}" / f"r{index:05d}.json"


def _execute(config: ExperimentConfig, tasks: list, workers: int, record_dir: Path | None) -> dict:
    """Run ``(L, i)`` tasks, reusing matching on-disk records; returns {(L, i): record}."""
    done = {}
    todo = []
    fp = config.fingerprint()
    for L, i in tasks:
        if record_dir is not None:
            p = _record_path(record_dir, L, i)
            if p.exists():
                try:
                    rec = json.loads(p.read_text())
                except json.JSONDecodeError:
                    rec = None
                if rec and rec.get("fingerprint") == fp and rec.get("status") == "ok":
                    rec["resumed"] = True
                    done[(L, i)] = rec
                    continue
        todo.append((L, i))
    args = [(config, L, i) for L, i in todo]
    if workers > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_solve_task, args, chunksize=1))
    else:
        results = [_solve_task(a) for a in args]
    for (L, i), rec in zip(todo, results):
        rec["fingerprint"] = fp
        rec["resumed"] = False
        if record_dir is not None:
            p = _record_path(record_dir, L, i)
            p.parent.mkdir(parents=True, exist_ok=True)
            p.write_text(json.dumps(rec, indent=1))
        done[(L, i)] = rec
    return done


def run_ensemble(config: ExperimentConfig, L: float, workers: int | None = None,
                 record_dir=None) -> list[dict]:
    """Solve every realization of the ensemble at side ``L``.

    Returns one record per realization in index order.  Failed realizations
    are kept with ``status == "failed"`` and the error message.

    Raises
    ------
    EnsembleFailure
        If every realization failed.
    """
    L = float(L)
    if config.model in ("linear", "full"):
        config.n_grid(L)
    m = config.n_realizations
    rd = None if record_dir is None else Path(record_dir)
    done = _execute(config, [(L, i) for i in range(m)], resolve_workers(workers), rd)
    recs = [done[(L, i)] for i in range(m)]
    if all(r["status"] != "ok" for r in recs):
        raise EnsembleFailure(f"all {m} realizations failed at L={L:g}: {recs[0]['error']}", recs)
    return recs


# ---------------------------------------------------------------- aggregation

@dataclass
class ObservableSeries:
    """Per-L means with errors, a power-law fit and a log-law fit.

    The log law is fitted to the squared value for amplitudes (speeds and
    fluctuations) and to the value itself for observables that are already
    variances (the scalar proxies).
    """

    name: str
    values: np.ndarray
    stderr: np.ndarray
    power: PowerLawFit
    log: LogLawFit

    @property
    def exponent(self) -> float:
        return self.power.exponent

    def to_dict(self) -> dict:
        return {"name": self.name, "values": _floats(self.values), "stderr": _floats(self.stderr),
                "power": _fit_dict(self.power), "log": _fit_dict(self.log)}

    @classmethod
    def from_dict(cls, data: dict) -> "ObservableSeries":
        return cls(data["name"], np.array(data["values"], float), np.array(data["stderr"], float),
                   PowerLawFit(**_unfloat(data["power"])), LogLawFit(**_unfloat(data["log"])))


def _floats(a):
    return [None if not math.isfinite(float(x)) else float(x) for x in np.asarray(a, float)]


def _fit_dict(fit) -> dict:
    return {k: (None if not math.isfinite(v) else v) for k, v in fit.__dict__.items()}


def _unfloat(d: dict) -> dict:
    return {k: (math.nan if v is None else float(v)) for k, v in d.items()}


@dataclass
class ScalingResult:
    """Aggregated sweep: per-L ensemble statistics and fitted exponents.

    ``observables`` maps names to :class:`ObservableSeries`; ``primary``
    names the default series.  ``failures`` itemizes every failed
    realization as ``(L, index, error)``.
    """

    L_values: np.ndarray
    n_used: np.ndarray
    n_failed: np.ndarray
    mean_particles: np.ndarray
    mean_fraction: np.ndarray
    observables: dict
    primary: str
    config: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    def __getitem__(self, name: str) -> ObservableSeries:
        return self.observables[name]

    @property
    def exponent(self) -> float:
        return self.observables[self.primary].exponent

    def to_dict(self) -> dict:
        return {"schema_version": self.schema_version, "primary": self.primary, "config": self.config,
                "L_values": _floats(self.L_values), "n_used": [int(v) for v in self.n_used],
                "n_failed": [int(v) for v in self.n_failed], "mean_particles": _floats(self.mean_particles),
                "mean_fraction": _floats(self.mean_fraction),
                "observables": {k: v.to_dict() for k, v in self.observables.items()},
                "failures": [list(f) for f in self.failures]}

    @classmethod
    def from_dict(cls, data: dict) -> "ScalingResult":
        version = data.get("schema_version")
        if not isinstance(version, int):
            raise ValueError("result file has no integer schema_version")
        if version != SCHEMA_VERSION:
            raise SchemaVersionError(f"result schema version {version} is not supported (expected {SCHEMA_VERSION})")
        try:
            obs = {k: ObservableSeries.from_dict(v) for k, v in data["observables"].items()}
            return cls(np.array(data["L_values"], float), np.array(data["n_used"], int),
                       np.array(data["n_failed"], int), np.array(data["mean_particles"], float),
                       np.array(data["mean_fraction"], float), obs, data["primary"], data.get("config", {}),
                       [tuple(f) for f in data.get("failures", [])], version)
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed result file: {exc}") from exc

    def equals(self, other: "ScalingResult") -> bool:
        return json.dumps(self.to_dict(), sort_keys=True) == json.dumps(other.to_dict(), sort_keys=True)


def _nan_power():
    return PowerLawFit(math.nan, math.nan, math.nan, math.nan)


def _nan_log():
    return LogLawFit(math.nan, math.nan, math.nan, math.nan)


def _series(name: str, L, values, stderr, squared: bool = True) -> ObservableSeries:
    L, values, stderr = (np.asarray(a, float) for a in (L, values, stderr))
    ok = np.isfinite(values)
    try:
        power = fit_power_law(L[ok], values[ok], stderr[ok])
    except ValueError:
        power = _nan_power()
    try:
        if squared:
            log = fit_log_law(L[ok], values[ok] ** 2, 2 * np.abs(values[ok]) * stderr[ok])
        else:
            log = fit_log_law(L[ok], values[ok], stderr[ok])
    except ValueError:
        log = _nan_log()
    return ObservableSeries(name, values, stderr, power, log)


def scaling_from_values(L_values, values, stderr=None, name: str = "value") -> ScalingResult:
    """Wrap externally computed per-L values in a :class:`ScalingResult`."""
    L = np.asarray(L_values, float)
    v = np.asarray(values, float)
    se = np.zeros_like(v) if stderr is None else np.asarray(stderr, float)
    if not (len(L) == len(v) == len(se)):
        raise ValueError("L_values, values and stderr must have equal length")
    zeros = np.zeros(len(L))
    return ScalingResult(L, zeros.astype(int), zeros.astype(int), zeros, zeros, {name: _series(name, L, v, se)}, name)


def _per_L_stats(model: str, recs: list, d: int) -> dict:
    """Ensemble statistics at one L from successful records: name -> (value, stderr)."""
    obs = [r["observables"] for r in recs]
    if model == "synthetic":
        v = np.array([o["value"] for o in obs])
        return {"value": (float(v.mean()), float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0)}
    if model == "scalar_proxy":
        out = {}
        for key in ("speed_proxy", "fluctuation_proxy"):
            v = np.array([o[key] for o in obs])
            out[key] = (float(v.mean()), float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else math.nan)
        return out
    speed = np.array([o["speed"] for o in obs])
    fms = np.array([o["field_ms"] for o in obs])
    n = np.array([r["n_particles"] for r in recs], float)
    rows = np.column_stack([n, [o["particle_sumsq"] for o in obs], np.array([o["particle_sum"] for o in obs])])

    def particle_sigma(r):
        tot = r[:, 0].sum()
        if tot == 0:
            return 0.0
        mean = r[:, 2:].sum(axis=0) / tot
        return math.sqrt(max(r[:, 1].sum() / tot - float(mean @ mean), 0.0))

    sp = jackknife(speed, lambda x: float(np.mean(x)))
    sf = jackknife(fms, lambda x: math.sqrt(max(float(np.mean(x)), 0.0)))
    spart = jackknife(rows, particle_sigma)
    return {"speed": sp, "sigma_field": sf, "sigma_particle": spart}


def aggregate_records(config: ExperimentConfig, records: dict) -> ScalingResult:
    """Build a :class:`ScalingResult` from ``{L: [records]}`` in sorted-L order."""
    Ls = sorted(records)
    if not Ls:
        raise ValueError("no records to aggregate")
    stats, n_used, n_failed, mean_n, mean_frac, failures = [], [], [], [], [], []
    for L in Ls:
        recs = sorted(records[L], key=lambda r: r["index"])
        ok = [r for r in recs if r["status"] == "ok"]
        bad = [r for r in recs if r["status"] != "ok"]
        failures += [(L, r["index"], r["error"]) for r in bad]
        if not ok:
            raise EnsembleFailure(f"no successful realization at L={L:g}", recs)
        stats.append(_per_L_stats(config.model, ok, config.d))
        n_used.append(len(ok))
        n_failed.append(len(bad))
        mean_n.append(float(np.mean([r["n_particles"] for r in ok])))
        mean_frac.append(float(np.mean([r["volume_fraction"] for r in ok])))
    observables = {}
    for name in stats[0]:
        vals = [s[name][0] for s in stats]
        ses = [s[name][1] for s in stats]
        observables[name] = _series(name, Ls, vals, ses, squared=config.model != "scalar_proxy")
    if config.model in ("linear", "full"):
        primary = "sigma_field" if config.estimator == "field" else "sigma_particle"
        observables["sigma"] = ObservableSeries("sigma", *(getattr(observables[primary], a)
                                                            for a in ("values", "stderr", "power", "log")))
        primary = "sigma"
    elif config.model == "scalar_proxy":
        primary = "fluctuation_proxy"
    else:
        primary = "value"
    return ScalingResult(np.array(Ls, float), np.array(n_used), np.array(n_failed), np.array(mean_n),
                         np.array(mean_frac), observables, primary, config.to_dict(), failures)


def scaling_sweep(config: ExperimentConfig, workers: int | None = None, record_dir=None,
                  min_points: int = 3, min_realizations: int = 20) -> ScalingResult:
    """Run the ensemble at every ``L`` and fit the size dependence.

    With ``record_dir`` set, each realization is stored as JSON and a rerun
    reuses every stored successful record with a matching configuration
    fingerprint.

    Raises
    ------
    ValueError
        Fewer than ``min_points`` sizes or ``min_realizations`` realizations.
    EnsembleFailure
        More than 5% of the realizations failed at some ``L``.
    """
    if len(config.L_values) < min_points:
        raise ValueError(f"a sweep needs at least {min_points} values of L")
    m = config.n_realizations
    if m < min_realizations:
        raise ValueError(f"a sweep needs at least {min_realizations} realizations per L, got {m}")
    rd = None if record_dir is None else Path(record_dir)
    tasks = [(L, i) for L in config.L_values for i in range(m)]
    done = _execute(config, tasks, resolve_workers(workers), rd)
    records = {L: [done[(L, i)] for i in range(m)] for L in config.L_values}
    for L, recs in records.items():
        bad = sum(r["status"] != "ok" for r in recs)
        if bad > MAX_FAILURE_FRACTION * m:
            first = next(r for r in recs if r["status"] != "ok")
            raise EnsembleFailure(f"{bad}/{m} realizations failed at L={L:g} (first: {first['error']})",
                                  [r for rs in records.values() for r in rs])
    return aggregate_records(config, records)


# ---------------------------------------------------------------- persistence

def persist_result(result: ScalingResult, path) -> tuple[Path, Path]:
    """Write ``result`` as JSON plus a per-L CSV next to it; returns both paths."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(result.to_dict(), indent=2))
    csv_path = path.with_suffix(".csv")
    names = list(result.observables)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["L", "n_used", "n_failed", "mean_particles", "mean_fraction"]
                   + [f"{n}{s}" for n in names for s in ("", "_stderr")])
        for j, L in enumerate(result.L_values):
            row = [repr(float(L)), int(result.n_used[j]), int(result.n_failed[j]),
                   repr(float(result.mean_particles[j])), repr(float(result.mean_fraction[j]))]
            for n in names:
                row += [repr(float(result[n].values[j])), repr(float(result[n].stderr[j]))]
            w.writerow(row)
    return path, csv_path


def load_result(path) -> ScalingResult:
    """Read a result written by :func:`persist_result`.

    Raises
    ------
    SchemaVersionError
        Unsupported schema version.
    ValueError
        Malformed file.
    """
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed result file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ValueError(f"malformed result file {path}: top level is not an object")
    return ScalingResult.from_dict(data)


def emit_plot_data(result: ScalingResult, path, observables: Sequence[str] | None = None,
                   n_points: int = 50) -> list[Path]:
    """Write ``(L, value, stderr)`` and a sampled fit curve per observable.

    For ``path = out/sweep`` the files are ``out/sweep_<name>.csv`` and
    ``out/sweep_<name>_fit.csv``; the fit file has columns ``L``,
    ``power_fit`` and ``log_fit`` (the log law converted back to the value,
    ``sqrt(max(a + b log L, 0))`` for amplitudes) on ``n_points``
    log-spaced sizes.
    """
    if len(result.L_values) == 0 or not result.observables:
        raise ValueError("empty result: nothing to emit")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(observables) if observables is not None else list(result.observables)
    lo, hi = float(np.min(result.L_values)), float(np.max(result.L_values))
    grid = np.geomspace(lo, hi, n_points) if hi > lo else np.full(n_points, lo)
    out = []
    for name in names:
        s = result[name]
        p1 = path.parent / f"{path.name}_{name}.csv"
        with open(p1, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["L", "value", "stderr"])
            for L, v, e in zip(result.L_values, s.values, s.stderr):
                w.writerow([repr(float(L)), repr(float(v)), repr(float(e))])
        p2 = path.parent / f"{path.name}_{name}_fit.csv"
        with open(p2, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["L", "power_fit", "log_fit"])
            pw = s.power.evaluate(grid)
            lg = s.log.evaluate(grid)
            if not name.endswith("_proxy"):
                lg = np.sqrt(np.maximum(lg, 0.0))
            for row in zip(grid, pw, lg):
                w.writerow([repr(float(x)) for x in row])
        out += [p1, p2]
    return out
