"""
Command-line entry point.

    sedimentation {sample,stats,solve,sweep,verify} --config run.yaml --out DIR
                  [--seed N] [--set key.sub=value ...] [--workers N]

Exit codes: 0 success, 1 verification failure, 2 configuration or input
error, 3 solver non-convergence or too many failed realizations,
4 hard-core violation in generated configurations.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import platform
import re
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .point_process import EnsembleSpec, HardcoreViolation, ParticleConfiguration, min_pairwise_distance

__all__ = ["main", "load_config", "apply_overrides", "DEFAULTS"]

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_SOLVER, EXIT_HARDCORE = 0, 1, 2, 3, 4

DEFAULTS = {
    "ensemble": {"kind": "matern_hardcore", "d": 2, "params": {"volume_fraction": 0.1}, "delta": 0.1,
                 "n_realizations": 20, "seed": 0},
    "L": 16.0,
    "stats": {"input": None, "estimators": ["pair_correlation", "structure_factor", "number_variance",
                                            "hyperuniformity"],
              "r_max": None, "n_bins": 30, "k_max": 4.0, "bin_width": 0.3, "radii": None, "n_windows": 64},
    "solve": {"model": "full", "configuration": None, "index": 0, "n_grid": None, "points_per_length": 4.0,
              "e": None, "tol": 1e-8, "max_iter": 500},
    "experiment": {"model": "linear", "L_values": [8.0, 12.0, 16.0], "points_per_length": 4.0, "e": None,
                   "tol": 1e-8, "estimator": "field", "k_cut": 4.0, "synthetic_exponent": 0.5,
                   "max_iter": 500},
    "verify": {"criteria": [5, 6, 7, 8, 9, 10], "tol": None},
}


class ConfigError(ValueError):
    pass


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads exponent floats without a dot (``1e-8``)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
    |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
    |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
    |[-+]?\.(?:inf|Inf|INF)
    |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."))


def _yaml_load(text: str):
    return yaml.load(text, Loader=_Loader)


# ---------------------------------------------------------------- configuration

def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        key = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(base[k], dict) and k != "params":
            if not isinstance(v, dict):
                raise ConfigError(f"config key {key!r} must be a mapping")
            out[k] = _merge(base[k], v, key + ".")
        else:
            out[k] = v
    return out


def load_config(path) -> dict:
    """Defaults updated by the YAML file at ``path`` (None for defaults only)."""
    if path is None:
        return copy.deepcopy(DEFAULTS)
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} not found")
    try:
        data = _yaml_load(p.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {p}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a mapping at the top level")
    return _merge(DEFAULTS, data)


def apply_overrides(cfg: dict, overrides) -> dict:
    """Apply ``dotted.key=value`` strings; values are parsed as YAML scalars or lists."""
    cfg = copy.deepcopy(cfg)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = _yaml_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse override value {raw!r}") from exc
        parts = key.strip().split(".")
        node = cfg
        for i, part in enumerate(parts[:-1]):
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"unknown config key {'.'.join(parts[:i + 1])!r}")
            node = node[part]
            if node is None:
                raise ConfigError(f"config key {'.'.join(parts[:i + 1])!r} is not a mapping")
        if not isinstance(node, dict) or (parts[-1] not in node and parts[-2:-1] != ["params"]):
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return cfg


def _ensemble(cfg) -> EnsembleSpec:
    try:
        return EnsembleSpec.from_dict(cfg["ensemble"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid ensemble: {exc}") from exc


def _L_list(cfg) -> list:
    L = cfg["L"]
    vals = L if isinstance(L, (list, tuple)) else [L]
    try:
        return [float(v) for v in vals]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid L: {L!r}") from exc


def _gravity(e, d):
    if e is None:
        return np.array([0.0] * (d - 1) + [-1.0])
    e = np.asarray(e, float)
    if e.shape != (d,):
        raise ConfigError(f"gravity vector must have {d} components")
    return e


def _write_log(out: Path, command: str, cfg: dict, payload: dict, t0: float):
    log = {"command": command, "config": cfg, "versions": {
        "sedimentation": __version__, "python": platform.python_version(), "numpy": np.__version__,
        "scipy": __import__("scipy").__version__, "matplotlib": __import__("matplotlib").__version__},
        "seconds": time.perf_counter() - t0}
    log.update(payload)
    path = out / f"run_log_{command}.json"
    path.write_text(json.dumps(log, indent=2, default=lambda o: o.tolist() if hasattr(o, "tolist") else str(o)))
    return path


# ---------------------------------------------------------------- subcommands

def _finite_or_none(x):
    return float(x) if np.isfinite(x) else None


def _config_dir(out: Path, L: float) -> Path:
    return out / "configs" / f"L{L:g}"


def cmd_sample(cfg, out: Path, args) -> tuple[int, dict]:
    spec = _ensemble(cfg)
    rows = []
    for L in _L_list(cfg):
        d = _config_dir(out, L)
        d.mkdir(parents=True, exist_ok=True)
        for i in range(spec.n_realizations):
            conf = spec.sample(L, i)
            try:
                conf.check_hardcore()
            except HardcoreViolation as exc:
                return EXIT_HARDCORE, {"error": f"L={L:g} realization {i}: {exc}"}
            conf.to_json(d / f"r{i:05d}.json")
            md = min_pairwise_distance(conf) if conf.n_particles >= 2 else float("inf")
            rows.append([L, i, conf.n_particles, conf.density, conf.volume_fraction, md])
    with open(out / "sample_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["L", "index", "n_particles", "density", "volume_fraction", "min_distance"])
        for r in rows:
            w.writerow([repr(float(r[0])), r[1], r[2]] + [repr(float(v)) for v in r[3:]])
    summary = {"nominal_density": spec.nominal_density, "files": len(rows), "per_L": {}}
    for L in _L_list(cfg):
        sel = [r for r in rows if r[0] == L]
        summary["per_L"][f"{L:g}"] = {"mean_density": float(np.mean([r[3] for r in sel])),
                                      "mean_volume_fraction": float(np.mean([r[4] for r in sel])),
                                      "min_distance": _finite_or_none(min(r[5] for r in sel))}
    (out / "sample_summary.json").write_text(json.dumps(summary, indent=2))
    print(f"wrote {len(rows)} configurations under {out / 'configs'}")
    return EXIT_OK, {"summary": summary}


def _load_configs(root: Path) -> dict:
    groups = {}
    dirs = [root] if any(root.glob("r*.json")) else sorted(p for p in root.iterdir() if p.is_dir())
    for d in dirs:
        files = sorted(d.glob("r*.json"))
        if files:
            groups[d.name] = [ParticleConfiguration.from_json(f) for f in files]
    return groups


def cmd_stats(cfg, out: Path, args) -> tuple[int, dict]:
    from . import statistics as st
    from .plotting import plot_estimate
    sc = cfg["stats"]
    root = Path(sc["input"]) if sc["input"] else out / "configs"
    if not root.is_dir():
        raise ConfigError(f"input directory {root} does not exist")
    groups = _load_configs(root)
    if not groups:
        raise ConfigError(f"no configuration files (r*.json) under {root}")
    known = {"pair_correlation", "structure_factor", "number_variance", "hyperuniformity"}
    unknown = set(sc["estimators"]) - known
    if unknown:
        raise ConfigError(f"unknown estimators {sorted(unknown)}")
    report = {}
    for name, confs in groups.items():
        L, d = confs[0].L, confs[0].d
        sub = out / "stats" / name
        sub.mkdir(parents=True, exist_ok=True)
        rep = report.setdefault(name, {"n_realizations": len(confs)})
        if "pair_correlation" in sc["estimators"]:
            g2 = st.estimate_pair_correlation(confs, r_max=sc["r_max"] or L / 4, n_bins=sc["n_bins"])
            g2.to_csv(sub / "pair_correlation.csv")
            plot_estimate(g2, sub / "pair_correlation.png", f"g2, {name}", reference=0.0)
        if "structure_factor" in sc["estimators"]:
            sk = st.estimate_structure_factor(confs, k_max=sc["k_max"], bin_width=sc["bin_width"])
            sk.to_csv(sub / "structure_factor.csv")
            plot_estimate(sk, sub / "structure_factor.png", f"S(k), {name}", reference=1.0)
            rep["structure_factor_mean"] = float(np.mean(sk.value))
        if "number_variance" in sc["estimators"] and len(confs) >= 20:
            radii = sc["radii"] or list(np.geomspace(1.0, L / 4, 8))
            nv = st.number_variance_curve(confs, radii, sc["n_windows"])
            nv.to_csv(sub / "number_variance.csv")
            plot_estimate(nv, sub / "number_variance.png", f"number variance, {name}", loglog=True)
        if "hyperuniformity" in sc["estimators"] and len(confs) >= 20:
            m, se = st.hyperuniformity_metric(confs)
            rep["hyperuniformity_metric"] = m
            rep["hyperuniformity_metric_stderr"] = se
        print(f"{name}: {len(confs)} configurations, d={d}, L={L:g} -> {sub}")
    (out / "stats_summary.json").write_text(json.dumps(report, indent=2))
    return EXIT_OK, {"report": report}


def _solve_configuration(cfg) -> ParticleConfiguration:
    sc = cfg["solve"]
    src = sc["configuration"]
    if isinstance(src, dict):
        return ParticleConfiguration.from_dict(src)
    if src:
        p = Path(src)
        if not p.is_file():
            raise ConfigError(f"configuration file {p} not found")
        return ParticleConfiguration.from_json(p)
    return _ensemble(cfg).sample(_L_list(cfg)[0], int(sc["index"]))


def cmd_solve(cfg, out: Path, args) -> tuple[int, dict]:
    from .linear_model import solve_linear
    from .stokes import ConvergenceError, check_energy_identity, settling_identity, solve_sedimentation
    sc = cfg["solve"]
    try:
        conf = _solve_configuration(cfg)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid configuration: {exc}") from exc
    n_grid = sc["n_grid"] or int(round(conf.L * sc["points_per_length"]))
    e = _gravity(sc["e"], conf.d)
    conf.to_json(out / "configuration.json")
    payload = {"n_particles": conf.n_particles, "n_grid": n_grid}
    try:
        conf.require_hardcore()
    except HardcoreViolation as exc:
        payload["error"] = str(exc)
        print(f"hard-core violation: {exc}", file=sys.stderr)
        return EXIT_HARDCORE, payload
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if sc["model"] == "linear":
        try:
            sol = solve_linear(None, conf, e, n_grid=n_grid)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        payload["volume_fraction"] = sol.volume_fraction
    elif sc["model"] == "full":
        try:
            sol = solve_sedimentation(None, conf, e, n_grid=n_grid, tol=sc["tol"], max_iter=sc["max_iter"])
        except ConvergenceError as exc:
            part = exc.solution
            payload["error"] = str(exc)
            payload["residual_history"] = part.residuals.get("history") if part is not None else None
            print(f"solver did not converge: {exc}", file=sys.stderr)
            return EXIT_SOLVER, payload
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        energy, work, res = check_energy_identity(sol)
        lhs, rhs, gap = settling_identity(sol)
        payload.update(sol.run_log())
        payload["energy_identity"] = {"energy": energy, "work": work, "relative_residual": res}
        payload["settling_identity"] = {"particle_mean": lhs, "energy_route": rhs, "relative_gap": gap}
    else:
        raise ConfigError(f"unknown solve model {sc['model']!r}")
    sol.velocity.to_raw(out / "velocity.raw")
    with open(out / "particle_velocities.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index"] + [f"x{j + 1}" for j in range(conf.d)] + [f"V{j + 1}" for j in range(conf.d)])
        for i, (c, v) in enumerate(zip(conf.centers, np.asarray(sol.particle_velocities).reshape(-1, conf.d))):
            w.writerow([i] + [repr(float(x)) for x in c] + [repr(float(x)) for x in v])
    if conf.d == 2:
        from .plotting import plot_configuration
        plot_configuration(conf, out / "particles.png", sol.particle_velocities)
    print(f"solved {sc['model']} model, {conf.n_particles} particles, n_grid={n_grid} -> {out}")
    return EXIT_OK, payload


def cmd_sweep(cfg, out: Path, args) -> tuple[int, dict]:
    from .harness import EnsembleFailure, ExperimentConfig, emit_plot_data, persist_result, scaling_sweep
    from .plotting import plot_scaling
    ex = dict(cfg["experiment"])
    ex["ensemble"] = cfg["ensemble"]
    ex["output_dir"] = str(out)
    if ex.get("e") is None:
        ex["e"] = ()
    try:
        econf = ExperimentConfig.from_dict(ex)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid experiment: {exc}") from exc
    try:
        result = scaling_sweep(econf, workers=args.workers, record_dir=out / "records")
    except EnsembleFailure as exc:
        print(f"sweep failed: {exc}", file=sys.stderr)
        return EXIT_SOLVER, {"error": str(exc)}
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    persist_result(result, out / "sweep.json")
    emit_plot_data(result, out / "sweep")
    plot_scaling(result, out / "sweep.png")
    for name, s in result.observables.items():
        print(f"{name}: exponent {s.power.exponent:.4f} +- {s.power.stderr:.4f}, log-law R^2 {s.log.r2:.4f}")
    resumed = sum(1 for p in (out / "records").rglob("*.json"))
    return EXIT_OK, {"exponents": {k: v.power.exponent for k, v in result.observables.items()},
                     "records_on_disk": resumed}


def cmd_verify(cfg, out: Path, args) -> tuple[int, dict]:
    from .checks import CRITERIA, run_criteria
    vc = cfg["verify"]
    nums = vc["criteria"] or sorted(CRITERIA)
    bad = [n for n in nums if int(n) not in CRITERIA]
    if bad:
        raise ConfigError(f"unknown criteria {bad}")
    results = run_criteria([int(n) for n in nums], workers=args.workers, tol=vc["tol"])
    lines = [ln for r in results for ln in r.lines()]
    print("\n".join(lines))
    (out / "verify_report.txt").write_text("\n".join(lines) + "\n")
    with open(out / "verify_report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["criterion", "check", "value", "threshold", "status"])
        for r in results:
            for c in r.checks:
                status = "INFO" if c.passed is None else ("PASS" if c.passed else "FAIL")
                w.writerow([r.number, c.name, repr(c.value), c.threshold, status])
    ok = all(r.passed for r in results)
    return (EXIT_OK if ok else EXIT_FAIL), {"results": [r.to_dict() for r in results]}


COMMANDS = {"sample": cmd_sample, "stats": cmd_stats, "solve": cmd_solve, "sweep": cmd_sweep, "verify": cmd_verify}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sedimentation", description="Sedimentation on the periodic torus.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML configuration file")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, help="override ensemble.seed")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted-key override")
        p.add_argument("--workers", type=int, help="worker processes (default: SEDIMENTATION_WORKERS or 1)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    t0 = time.perf_counter()
    out = Path(args.out)
    try:
        cfg = apply_overrides(load_config(args.config), args.set)
        if args.seed is not None:
            cfg["ensemble"]["seed"] = args.seed
        if args.workers is not None and args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        out.mkdir(parents=True, exist_ok=True)
        code, payload = COMMANDS[args.command](cfg, out, args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    _write_log(out, args.command, cfg, {"exit_code": code, **payload}, t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
