"""
Desk-scale acceptance battery shared by ``sedimentation verify`` and the test
suite.

Each ``criterion_<k>`` function runs one scenario and returns a
:class:`CriterionResult`: a list of asserted checks (measured value against a
threshold) plus reported, non-asserted diagnostics.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .harness import ExperimentConfig, scaling_sweep
from .linear_model import scalar_proxy_statistics, solve_linear
from .oracles import DenseStokes2D
from .point_process import EnsembleSpec, ParticleConfiguration
from .statistics import (efron_stein_bound, estimate_structure_factor, fit_log_law, fit_power_law,
                         hyperuniformity_metric, linear_functional_variance, number_variance_curve)
from .stokes import (check_energy_identity, effective_viscosity, project_rigid, settling_identity,
                     solve_by_reflections, solve_sedimentation)
from .torus import TorusDomain

__all__ = ["Check", "CriterionResult", "CRITERIA", "run_criteria"]


@dataclass
class Check:
    """One measured quantity; ``passed is None`` marks a reported diagnostic."""

    name: str
    value: float
    threshold: str
    passed: bool | None

    def line(self) -> str:
        tag = "INFO" if self.passed is None else ("ok" if self.passed else "FAIL")
        return f"  [{tag}] {self.name} = {self.value:.6g} ({self.threshold})"


@dataclass
class CriterionResult:
    number: int
    title: str
    checks: list = field(default_factory=list)
    seconds: float = 0.0
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks if c.passed is not None)

    def add(self, name, value, threshold, passed):
        self.checks.append(Check(name, float(value), threshold, None if passed is None else bool(passed)))

    def report(self, name, value, note=""):
        self.add(name, value, note or "reported", None)

    def headline(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} criterion {self.number}: {self.title} ({self.seconds:.1f}s)"

    def lines(self) -> list[str]:
        return [self.headline()] + [c.line() for c in self.checks]

    def to_dict(self) -> dict:
        return {"number": self.number, "title": self.title, "passed": self.passed, "seconds": self.seconds,
                "checks": [c.__dict__ for c in self.checks], "details": self.details}


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


# ---------------------------------------------------------------- scaling sweeps

def _sweep(model, ensemble, L_values, ppl, workers, estimator="field"):
    cfg = ExperimentConfig(model, ensemble, tuple(L_values), ppl, estimator=estimator)
    return scaling_sweep(cfg, workers=workers)


@_timed
def criterion_1(workers=None, n_realizations=100, seed=2024) -> CriterionResult:
    """Three-dimensional mixing ensemble: fluctuation grows like L^{1/2}."""
    res = CriterionResult(1, "d=3 Matern linearized fluctuation exponent 0.5 +- 0.15")
    ens = EnsembleSpec("matern_hardcore", 3, {"volume_fraction": 0.03}, 0.1, n_realizations, seed)
    out = _sweep("linear", ens, (8.0, 12.0, 16.0, 24.0, 32.0), 4.0, workers)
    p = out["sigma_field"].power
    res.add("exponent(sigma, field average)", p.exponent, "|x - 0.5| <= 0.15", abs(p.exponent - 0.5) <= 0.15)
    res.report("exponent stderr", p.stderr)
    res.report("exponent(sigma, pooled particle velocities)", out["sigma_particle"].exponent,
               "literal per-particle estimator, not asserted")
    res.report("mean volume fraction", float(np.mean(out.mean_fraction)))
    res.details = out.to_dict()
    return res


@_timed
def criterion_2(workers=None, n_realizations=100, seed=2025) -> CriterionResult:
    """Three-dimensional perturbed lattice: fluctuation and speed stay bounded."""
    res = CriterionResult(2, "d=3 perturbed lattice: exponents of sigma and V <= 0.15")
    a = 16.0 / 3.0
    ens = EnsembleSpec("perturbed_lattice", 3, {"spacing": a, "u_max": 0.3 * a}, 0.05, n_realizations, seed)
    out = _sweep("linear", ens, tuple(k * a for k in range(2, 7)), 4.5, workers)
    ps, pv = out["sigma_field"].power, out["speed"].power
    res.add("exponent(sigma, field average)", ps.exponent, "<= 0.15", ps.exponent <= 0.15)
    res.add("exponent(V)", pv.exponent, "<= 0.15", pv.exponent <= 0.15)
    res.report("exponent(sigma, pooled particle velocities)", out["sigma_particle"].exponent,
               "literal per-particle estimator, not asserted")
    res.report("mean volume fraction", float(np.mean(out.mean_fraction)))
    res.details = out.to_dict()
    return res


@_timed
def criterion_3(workers=None, n_realizations=20, seed=2026) -> CriterionResult:
    """Two dimensions: V^2 grows like log L for Matern, stays bounded on a lattice."""
    res = CriterionResult(3, "d=2 speed: V^2 linear in log L (Matern); bounded (lattice)")
    Ls = (16.0, 32.0, 64.0, 128.0)
    m = _sweep("linear", EnsembleSpec("matern_hardcore", 2, {"volume_fraction": 0.1}, 0.1, n_realizations, seed),
               Ls, 4.0, workers)
    lat = _sweep("linear", EnsembleSpec("perturbed_lattice", 2, {"spacing": 4.0, "u_max": 0.8}, 0.1,
                                        n_realizations, seed), Ls, 4.0, workers)
    res.add("R^2 of V^2 vs log L (Matern)", m["speed"].log.r2, ">= 0.9", m["speed"].log.r2 >= 0.9)
    res.report("slope of V^2 vs log L (Matern)", m["speed"].log.slope)
    res.add("exponent(V) (lattice)", lat["speed"].power.exponent, "<= 0.1", lat["speed"].power.exponent <= 0.1)
    res.details = {"matern": m.to_dict(), "lattice": lat.to_dict()}
    return res


@_timed
def criterion_4(workers=None, n_realizations=20, seed=2027) -> CriterionResult:
    """Four dimensions, scalar proxy: fluctuation variance linear in log L vs bounded."""
    res = CriterionResult(4, "d=4 scalar proxy: log growth (Matern) vs bounded (lattice)")
    Ls = (8.0, 12.0, 16.0, 24.0)
    m = _sweep("scalar_proxy", EnsembleSpec("matern_hardcore", 4, {"volume_fraction": 0.02}, 0.1,
                                            n_realizations, seed), Ls, 4.0, workers)
    lat = _sweep("scalar_proxy", EnsembleSpec("perturbed_lattice", 4, {"spacing": 4.0, "u_max": 0.8}, 0.1,
                                              n_realizations, seed), Ls, 4.0, workers)
    mf, lf = m["fluctuation_proxy"], lat["fluctuation_proxy"]
    res.add("R^2 of fluctuation variance vs log L (Matern)", mf.log.r2, ">= 0.85", mf.log.r2 >= 0.85)
    res.add("exponent(fluctuation variance) (lattice)", lf.power.exponent, "<= 0.1", lf.power.exponent <= 0.1)
    res.report("exponent(fluctuation variance) (Matern)", mf.power.exponent)
    res.details = {"matern": m.to_dict(), "lattice": lat.to_dict()}
    return res


# ---------------------------------------------------------------- full solver

def tiny_instance() -> ParticleConfiguration:
    """Two particles on the L=8 square torus used by the solver checks."""
    return ParticleConfiguration(2, 8.0, [[-1.7, 0.3], [1.6, -0.4]], 0.1)


GRAVITY_2D = (0.0, -1.0)


@_timed
def criterion_5(tol=1e-8) -> CriterionResult:
    """Full solver against a dense oracle, and the energy and settling identities."""
    res = CriterionResult(5, "full solver: dense oracle, energy and settling identities")
    cfg = tiny_instance()
    sols = {n: solve_sedimentation(None, cfg, GRAVITY_2D, n_grid=n, tol=tol, raise_on_failure=False)
            for n in (64, 128)}
    s64 = sols[64]
    ref = DenseStokes2D(cfg.L, 64).solve_sedimentation(cfg, GRAVITY_2D)
    err = np.linalg.norm(s64.velocity.values - ref) / np.linalg.norm(ref)
    res.add("relative L2 distance to dense oracle", err, "<= 1e-6", err <= 1e-6)
    rig = s64.residuals["constraint_residual"]
    res.add("rigidity (Galerkin constraint residual)", rig, "<= 1e-6", rig <= 1e-6)
    e64, e128 = check_energy_identity(s64)[2], check_energy_identity(sols[128])[2]
    res.add("energy identity residual, n=64", e64, "<= 1e-4", e64 <= 1e-4)
    res.add("energy identity residual, n=128", e128, "<= half of n=64", e128 <= 0.5 * e64)
    g64, g128 = settling_identity(s64)[2], settling_identity(sols[128])[2]
    res.add("settling identity gap, n=64", g64, "<= 1e-3", g64 <= 1e-3)
    res.add("settling identity gap, n=128", g128, "<= half of n=64", g128 <= 0.5 * g64)
    res.report("CG iterations, n=64", s64.residuals["iterations"])
    return res


@_timed
def criterion_6(tol=1e-8) -> CriterionResult:
    """Rigid projection of the linearized field reproduces the full solution."""
    res = CriterionResult(6, "projection reformulation")
    cfg = tiny_instance()
    sol = solve_sedimentation(None, cfg, GRAVITY_2D, n_grid=64, tol=tol)
    lin = solve_linear(None, cfg, GRAVITY_2D, n_grid=64)
    proj = project_rigid(lin.velocity, cfg, tol=tol)
    phi = sol.velocity.values
    err = np.linalg.norm(proj.values / (1 - sol.volume_fraction) - phi) / np.linalg.norm(phi)
    res.add("relative distance (1-lambda)^-1 pi(phi_lin) vs phi", err, "<= 1e-6", err <= 1e-6)
    again = project_rigid(proj, cfg, tol=tol)
    idem = np.linalg.norm(again.values - proj.values) / np.linalg.norm(proj.values)
    res.report("idempotence defect of the projection", idem)
    return res


@_timed
def criterion_7(tol=1e-8) -> CriterionResult:
    """Reflections converge for a dilute pair; the near-contact regime is reported."""
    res = CriterionResult(7, "method of reflections: dilute convergence, near-contact report")
    cfg = ParticleConfiguration(3, 24.0, [[-6.1, 0.2, 0.3], [6.0, -0.3, 0.1]], 0.1)
    e = (0.0, 0.0, -1.0)
    direct = solve_sedimentation(None, cfg, e, n_grid=96, tol=tol)
    refl = solve_by_reflections(None, cfg, e, n_grid=96, tol=tol)
    err = np.linalg.norm(refl.solution.values - direct.velocity.values) / np.linalg.norm(direct.velocity.values)
    gap = float(np.linalg.norm(cfg.centers[0] - cfg.centers[1])) - 2
    res.add("dilute pair gap", gap, ">= 10", gap >= 10)
    res.add("dilute pair converged", float(refl.converged), "== 1", refl.converged)
    res.add("dilute pair distance to direct solve", err, "<= 1e-4", err <= 1e-4)
    res.report("dilute pair sweeps", refl.sweeps)
    near = ParticleConfiguration(2, 8.0, [[-1.05, 0.0], [1.05, 0.0]], 0.05)
    for mode in ("jacobi", "gauss_seidel"):
        r = solve_by_reflections(None, near, GRAVITY_2D, n_grid=64, tol=tol, max_sweeps=200, mode=mode)
        res.report(f"near-contact {mode}: converged", float(r.converged))
        res.report(f"near-contact {mode}: sweeps", r.sweeps)
        res.report(f"near-contact {mode}: final residual", r.history[-1] if r.history else 0.0)
    return res


# ---------------------------------------------------------------- statistics

@_timed
def criterion_8(seed=2028) -> CriterionResult:
    """Structure factor, hyperuniformity metric and number-variance exponents."""
    res = CriterionResult(8, "statistics: Poisson S(k)=1, lattice metric 0, number-variance exponents")
    pois2 = list(EnsembleSpec("poisson", 2, {"rho": 0.1}, -1.0, 500, seed).realizations(32.0))
    sk = estimate_structure_factor(pois2, k_max=4.0, bin_width=0.3)
    z = np.abs(sk.value - 1.0) / sk.stderr
    res.add("max |S(k)-1| / stderr (Poisson, d=2, M=500)", float(np.max(z)), "<= 3", np.all(z <= 3))
    lat = list(EnsembleSpec("perturbed_lattice", 2, {"spacing": 4.0, "u_max": 0.8}, 0.1, 20, seed).realizations(32.0))
    metric = hyperuniformity_metric(lat)[0]
    res.add("hyperuniformity metric (perturbed lattice)", metric, "== 0", metric == 0.0)
    pois3 = list(EnsembleSpec("poisson", 3, {"rho": 0.05}, -1.0, 40, seed).realizations(32.0))
    radii = np.geomspace(2.0, 8.0, 7)
    nv = number_variance_curve(pois3, radii, 256, seed)
    ep = fit_power_law(radii, nv.value, nv.stderr).exponent
    res.add("number-variance exponent (Poisson, d=3)", ep, "|x - 3| <= 0.3", abs(ep - 3) <= 0.3)
    lat3 = list(EnsembleSpec("perturbed_lattice", 3, {"spacing": 4.0, "u_max": 0.9}, 0.05, 40, seed)
                .realizations(64.0))
    radii = np.geomspace(4.0, 16.0, 12)
    nv = number_variance_curve(lat3, radii, 512, seed)
    el = fit_power_law(radii, nv.value, nv.stderr).exponent
    res.add("number-variance exponent (perturbed lattice, d=3)", el, "|x - 2| <= 0.4", abs(el - 2) <= 0.4)
    return res


def _test_functionals(L):
    k = 2 * math.pi / L
    return {
        "cos(k x1)": lambda x: np.cos(k * x[:, 0]),
        "sin(k (x1 + x2))": lambda x: np.sin(k * (x[:, 0] + x[:, 1])),
        "cos(k x1) cos(2 k x2)": lambda x: np.cos(k * x[:, 0]) * np.cos(2 * k * x[:, 1]),
    }


@_timed
def criterion_9(seed=2029, n_realizations=400) -> CriterionResult:
    """Variance of linear statistics: gradient bound (lattice) versus L2 bound (Matern)."""
    res = CriterionResult(9, "linear statistics: gradient bound (lattice), L2 scaling (Matern), Efron-Stein")
    L = 32.0
    mat = list(EnsembleSpec("matern_hardcore", 2, {"volume_fraction": 0.18}, 0.1, n_realizations, seed)
               .realizations(L))
    lat = list(EnsembleSpec("perturbed_lattice", 2, {"spacing": 4.0, "u_max": 0.8}, 0.1, n_realizations, seed)
               .realizations(L))
    for name, zeta in _test_functionals(L).items():
        fl = linear_functional_variance(lat, zeta)
        fm = linear_functional_variance(mat, zeta)
        r_lat = fl.variance / fl.hyperuniform_bound
        r_mat = fm.variance / fm.mixing_bound
        res.add(f"lattice Var / rho^2 int|grad zeta|^2 [{name}]", r_lat, "<= 10", r_lat <= 10)
        res.add(f"Matern Var / rho^2 int|zeta|^2 [{name}]", r_mat, "in [0.1, 10]", 0.1 <= r_mat <= 10)
        es = efron_stein_bound(lat, zeta, seed=seed)
        res.add(f"lattice Var / Efron-Stein bound [{name}]", fl.variance / es, "<= 1", fl.variance <= es)
        res.report(f"Matern Var / rho^2 int|grad zeta|^2 [{name}]", fm.variance / fm.hyperuniform_bound)
    return res


# ---------------------------------------------------------------- effective viscosity

@_timed
def criterion_10(seed=2030, n_realizations=20, tol=1e-8) -> CriterionResult:
    """Effective viscosity: symmetric, positive definite, identity without particles."""
    res = CriterionResult(10, "effective viscosity: symmetric, positive definite, empty limit = Id")
    dom = TorusDomain(2, 16.0, 64)
    confs = list(EnsembleSpec("matern_hardcore", 2, {"volume_fraction": 0.1}, 0.1, n_realizations, seed)
                 .realizations(16.0))
    b = effective_viscosity(dom, confs, tol=tol)
    off = np.abs(b.matrix - b.matrix.T)
    err = np.sqrt(b.stderr**2 + b.stderr.T**2)
    worst = float(np.max(np.where(err > 0, off / np.where(err > 0, err, 1), off > 0)))
    res.add("max |B - B^T| / jackknife error", worst, "<= 3", worst <= 3)
    z = b.min_eigenvalue / b.min_eigenvalue_stderr if b.min_eigenvalue_stderr > 0 else math.inf
    res.add("smallest eigenvalue / stderr", z, ">= 3", b.min_eigenvalue > 0 and z >= 3)
    res.report("smallest eigenvalue", b.min_eigenvalue)
    empty = [ParticleConfiguration(2, 16.0, np.zeros((0, 2)), 0.1) for _ in range(5)]
    be = effective_viscosity(dom, empty, tol=tol)
    dev = float(np.max(np.abs(be.matrix - np.eye(len(be.basis)))))
    res.add("max |B - Id| without particles", dev, "== 0", dev == 0.0)
    res.details = {"matrix": b.matrix.tolist(), "stderr": b.stderr.tolist()}
    return res


CRITERIA = {1: criterion_1, 2: criterion_2, 3: criterion_3, 4: criterion_4, 5: criterion_5, 6: criterion_6,
            7: criterion_7, 8: criterion_8, 9: criterion_9, 10: criterion_10}


def run_criteria(numbers=None, workers=None, tol=None) -> list[CriterionResult]:
    """Run the selected criteria in order; ``tol`` overrides the solver tolerance where used."""
    out = []
    for k in numbers or sorted(CRITERIA):
        fn = CRITERIA[int(k)]
        kwargs = {}
        if k in (1, 2, 3, 4):
            kwargs["workers"] = workers
        if tol is not None and k in (5, 6, 7, 10):
            kwargs["tol"] = tol
        out.append(fn(**kwargs))
    return out
