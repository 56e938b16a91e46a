"""
Rigid-particle suspension solver on the periodic torus.

The velocity field is rigid on every particle and solves the Stokes equations
in the fluid with a uniform backflow.  Rigidity is imposed with Lagrange
multipliers (force densities) on the inclusion grid cells that are
orthogonal to rigid motions, so each particle carries zero net force
correction and zero torque.  With ``S`` the spectral Stokes solution operator
and ``C`` the map "restrict to inclusion cells, remove the rigid part", the
cell-wise Schur operator ``C S C^T`` has eigenvalues that decay without a
gap, so the full cell system is numerically ill-posed.  Multipliers are
therefore restricted, particle by particle, to the span ``Z_n`` of the
eigenvectors of the single-particle block whose eigenvalue exceeds
``MULTIPLIER_THRESHOLD`` times the largest one.  The reduced system

    Z^T C S C^T Z c = -Z^T C S f

is solved by conjugate gradients, one FFT Stokes solve per iteration,
with the (diagonal) single-particle eigenvalues as preconditioner.
Rigidity then holds in the Galerkin sense ``Z^T C phi = 0``.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .point_process import ParticleConfiguration, min_pairwise_distance
from .statistics import jackknife
from .torus import SpectralField, TorusDomain, ball_cells, irfft, rfft, stokes_solve

__all__ = [
    "ConvergenceError",
    "RigidConstraint",
    "SuspensionSolution",
    "ReflectionReport",
    "CorrectorSolution",
    "EffectiveViscosity",
    "solve_sedimentation",
    "project_rigid",
    "solve_by_reflections",
    "check_energy_identity",
    "settling_identity",
    "solve_colloidal_corrector",
    "effective_viscosity",
    "strain_basis",
    "solution_space_projection",
]

DEFAULT_TOL = 1e-8
MULTIPLIER_THRESHOLD = 1e-6


class ConvergenceError(RuntimeError):
    """Iterative solve stopped before reaching the tolerance."""

    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution


def _rigid_modes(offsets: np.ndarray) -> np.ndarray:
    """Rigid motions sampled at the cell offsets, shape ``(m*d, r)``, ordered (cell, component)."""
    m, d = offsets.shape
    cols = []
    for j in range(d):
        t = np.zeros((m, d))
        t[:, j] = 1.0
        cols.append(t)
    if d == 2:
        cols.append(np.column_stack([-offsets[:, 1], offsets[:, 0]]))
    elif d == 3:
        for axis in range(3):
            w = np.zeros(3)
            w[axis] = 1.0
            cols.append(np.cross(w, offsets))
    return np.stack([c.ravel() for c in cols], axis=1)


@lru_cache(maxsize=8)
def _stokes_kernel(domain: TorusDomain) -> np.ndarray:
    """Response ``K[j, i]`` of velocity component ``i`` to a unit force value at cell 0 in direction ``j``."""
    out = np.empty((domain.d, domain.d) + domain.shape)
    for j in range(domain.d):
        f = np.zeros((domain.d,) + domain.shape)
        f[(j,) + (0,) * domain.d] = 1.0
        out[j], _ = stokes_solve(domain, f, pressure=False)
    out.flags.writeable = False
    return out


class RigidConstraint:
    """Inclusion cells, rigid-motion projectors and single-particle Schur blocks.

    Multiplier vectors are flat arrays: particle blocks concatenated, each
    block ordered (cell, component).
    """

    def __init__(self, domain: TorusDomain, config: ParticleConfiguration, threshold: float | None = None):
        if domain.d != config.d or abs(domain.L - config.L) > 1e-12:
            raise ValueError("configuration and domain disagree on dimension or side length")
        self.domain = domain
        self.config = config
        self.cells = [ball_cells(domain, c, config.radius) for c in config.centers]
        self.index = [idx for idx, _ in self.cells]
        self.offsets = [off for _, off in self.cells]
        self.sizes = np.array([len(off) * domain.d for off in self.offsets], dtype=int)
        self.starts = np.concatenate([[0], np.cumsum(self.sizes)])
        self.modes = [_rigid_modes(off) for off in self.offsets]
        self.ortho = [np.linalg.qr(r)[0] for r in self.modes]
        self._blocks = None
        self._eig_cache = {}
        self.threshold = MULTIPLIER_THRESHOLD if threshold is None else threshold
        self.n_stokes = 0
        chi = np.zeros(domain.shape)
        for idx in self.index:
            if np.any(chi[idx]):
                raise ValueError("particles overlap on the grid")
            chi[idx] = 1.0
        self.indicator = chi

    @property
    def size(self) -> int:
        return int(self.starts[-1])

    @property
    def n_particles(self) -> int:
        return len(self.index)

    def split(self, vec):
        return [vec[self.starts[n]:self.starts[n + 1]] for n in range(self.n_particles)]

    def restrict(self, u: np.ndarray) -> list:
        """Cell values of a vector field per particle, each flattened (cell, component)."""
        return [u[(slice(None),) + idx].T.ravel() for idx in self.index]

    def nonrigid(self, blocks: list) -> np.ndarray:
        out = []
        for q, b in zip(self.ortho, blocks):
            out.append(b - q @ (q.T @ b))
        return np.concatenate(out) if out else np.zeros(0)

    def apply_c(self, u: np.ndarray) -> np.ndarray:
        return self.nonrigid(self.restrict(u))

    def inject(self, vec: np.ndarray) -> np.ndarray:
        """Force density field carrying the multiplier values on the inclusion cells."""
        d = self.domain.d
        f = np.zeros((d,) + self.domain.shape)
        for n, idx in enumerate(self.index):
            block = vec[self.starts[n]:self.starts[n + 1]].reshape(-1, d)
            f[(slice(None),) + idx] += block.T
        return f

    def stokes(self, force: np.ndarray, pressure: bool = False):
        self.n_stokes += 1
        return stokes_solve(self.domain, force, pressure=pressure)

    def apply_schur(self, vec: np.ndarray) -> np.ndarray:
        """``C S C^T`` applied to a multiplier vector (one FFT Stokes solve)."""
        u, _ = self.stokes(self.inject(self.nonrigid(self.split(vec))))
        return self.apply_c(u)

    # single-particle blocks ------------------------------------------------

    def _dense_block(self, n: int) -> np.ndarray:
        d = self.domain.d
        kern = _stokes_kernel(self.domain)
        idx = np.stack(self.index[n], axis=1)
        diff = np.mod(idx[:, None, :] - idx[None, :, :], self.domain.n_grid)
        where = tuple(diff[..., a] for a in range(d))
        m = len(idx)
        block = np.empty((m, d, m, d))
        for j in range(d):
            for i in range(d):
                block[:, i, :, j] = kern[(j, i) + where]
        block = block.reshape(m * d, m * d)
        q = self.ortho[n]
        proj = np.eye(m * d) - q @ q.T
        return proj @ block @ proj

    def _spectral_block(self, n: int):
        """Eigen-decomposition of the single-particle Schur block, cached by sub-grid offset."""
        key = tuple(np.round(self.offsets[n][0], 9)) + (len(self.offsets[n]),)
        hit = self._eig_cache.get(key)
        if hit is None:
            a = self._dense_block(n)
            w, v = np.linalg.eigh(0.5 * (a + a.T))
            keep = w > self.threshold * w.max()
            hit = (w[keep], v[:, keep])
            self._eig_cache[key] = hit
        return hit

    def multiplier_bases(self):
        """Per-particle orthonormal multiplier bases and their block eigenvalues."""
        if self._blocks is None:
            self._blocks = [self._spectral_block(n) for n in range(self.n_particles)]
            sizes = np.array([v.shape[1] for _, v in self._blocks], dtype=int)
            self.coef_starts = np.concatenate([[0], np.cumsum(sizes)])
        return self._blocks

    def expand(self, coef: np.ndarray) -> np.ndarray:
        """Multiplier cell values from basis coefficients."""
        bases = self.multiplier_bases()
        return np.concatenate([v @ coef[self.coef_starts[n]:self.coef_starts[n + 1]]
                               for n, (_, v) in enumerate(bases)])

    def test(self, vec: np.ndarray) -> np.ndarray:
        """Coefficients of a cell-value vector against the multiplier bases."""
        bases = self.multiplier_bases()
        return np.concatenate([v.T @ vec[self.starts[n]:self.starts[n + 1]] for n, (_, v) in enumerate(bases)])

    def galerkin_residual(self, u: np.ndarray) -> np.ndarray:
        return self.test(self.apply_c(u))

    def apply_reduced(self, coef: np.ndarray) -> np.ndarray:
        """Reduced Schur operator ``Z^T C S C^T Z`` (one FFT Stokes solve)."""
        u, _ = self.stokes(self.inject(self.expand(coef)))
        return self.galerkin_residual(u)

    def precondition(self, coef: np.ndarray) -> np.ndarray:
        bases = self.multiplier_bases()
        return np.concatenate([coef[self.coef_starts[n]:self.coef_starts[n + 1]] / w
                               for n, (w, _) in enumerate(bases)])

    def single_block(self, n: int) -> np.ndarray:
        return self._dense_block(n)

    # rigid fits ------------------------------------------------------------

    def rigid_fit(self, u: np.ndarray):
        """Least-squares translation and rotation of ``u`` on every particle."""
        d = self.domain.d
        trans, rot = [], []
        for r, b in zip(self.modes, self.restrict(u)):
            coef = np.linalg.lstsq(r, b, rcond=None)[0]
            trans.append(coef[:d])
            rot.append(coef[d:])
        n_rot = d * (d - 1) // 2
        rot = np.array(rot, dtype=float).reshape(self.n_particles, n_rot)
        if d == 2:
            rot = rot[:, 0]
        return np.array(trans).reshape(-1, d), rot

    def cell_means(self, u: np.ndarray) -> np.ndarray:
        return np.array([u[(slice(None),) + idx].mean(axis=1) for idx in self.index]).reshape(-1, self.domain.d)

    def rigidity_residual(self, u: np.ndarray) -> float:
        """RMS of the non-rigid part on inclusion cells, relative to the RMS of ``u`` there."""
        if self.n_particles == 0:
            return 0.0
        full = np.concatenate(self.restrict(u))
        scale = np.sqrt(np.mean(full**2))
        if scale == 0:
            return 0.0
        return float(np.sqrt(np.mean(self.apply_c(u) ** 2)) / scale)


def _pcg(constraint: RigidConstraint, rhs: np.ndarray, tol: float, max_iter: int, precondition: bool = True):
    """Preconditioned CG on the reduced Schur system (multiplier basis coordinates)."""
    constraint.multiplier_bases()
    x = np.zeros_like(rhs)
    bnorm = np.linalg.norm(rhs)
    history = []
    if bnorm == 0:
        return x, 0, [0.0], True
    r = rhs.copy()
    z = constraint.precondition(r) if precondition else r.copy()
    p = z.copy()
    rz = r @ z
    for it in range(1, max_iter + 1):
        ap = constraint.apply_reduced(p)
        pap = p @ ap
        if pap <= 0:
            break
        a = rz / pap
        x += a * p
        r -= a * ap
        res = np.linalg.norm(r) / bnorm
        history.append(float(res))
        if res <= tol:
            return x, it, history, True
        z = constraint.precondition(r) if precondition else r.copy()
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, len(history), history, False


def solution_space_projection(domain: TorusDomain, values: np.ndarray) -> np.ndarray:
    """Project a vector field onto the discrete solution space.

    The space holds mean-zero, divergence-free fields without Nyquist modes,
    which is the range of the spectral Stokes operator.
    """
    w = domain.waves
    keep = ~(w.nyquist | w.zero)
    c = rfft(values, domain.d)
    kc = sum(w.k[j] * c[j] for j in range(domain.d))
    out = np.stack([np.where(keep, c[j] - w.k[j] * kc * w.inv_k2, 0.0) for j in range(domain.d)])
    return irfft(out, domain)


# ---------------------------------------------------------------- solutions

@dataclass(eq=False)
class SuspensionSolution:
    """Velocity and pressure of a sedimenting suspension plus particle motions.

    ``angular_velocities`` is a scalar per particle in d=2 and a vector in d=3.
    ``residuals`` records the stopping criteria of the solve.
    """

    domain: TorusDomain
    config: ParticleConfiguration
    e: np.ndarray
    velocity: SpectralField
    pressure: SpectralField
    particle_velocities: np.ndarray
    angular_velocities: np.ndarray
    backflow: float
    volume_fraction: float
    residuals: dict
    cell_counts: np.ndarray = None

    @property
    def n_particles(self) -> int:
        return self.config.n_particles

    def to_csv(self, path) -> Path:
        path = Path(path)
        d = self.domain.d
        rot_cols = ["theta"] if d == 2 else [f"theta{j + 1}" for j in range(3)]
        with open(path, "w") as fh:
            fh.write(",".join(["index"] + [f"x{j + 1}" for j in range(d)] + [f"V{j + 1}" for j in range(d)]
                              + rot_cols) + "\n")
            for n in range(self.n_particles):
                rot = np.atleast_1d(self.angular_velocities[n])
                vals = list(self.config.centers[n]) + list(self.particle_velocities[n]) + list(rot)
                fh.write(",".join([str(n)] + [repr(float(v)) for v in vals]) + "\n")
        return path

    def run_log(self) -> dict:
        return {
            "domain": self.domain.to_dict(),
            "n_particles": self.n_particles,
            "e": self.e.tolist(),
            "backflow": self.backflow,
            "volume_fraction": self.volume_fraction,
            "residuals": self.residuals,
        }


def _rigid_solve(domain, config, force, constraint_rhs, tol, max_iter, precondition=True):
    """Constrained solve shared by sedimentation and corrector problems."""
    cons = RigidConstraint(domain, config)
    t0 = time.perf_counter()
    if cons.n_particles == 0:
        u, p = stokes_solve(domain, force)
        return cons, np.zeros(0), u, p, {"iterations": 0, "cg_residual": 0.0, "constraint_residual": 0.0,
                                         "converged": True, "stokes_solves": 1, "seconds": 0.0, "history": []}
    cons.multiplier_bases()
    u0, _ = cons.stokes(force)
    target = constraint_rhs(cons)
    rhs = cons.test(target - cons.apply_c(u0))
    coef, it, hist, ok = _pcg(cons, rhs, tol, max_iter, precondition)
    mu = cons.expand(coef)
    u, p = cons.stokes(force + cons.inject(mu), pressure=True)
    cres = float(np.linalg.norm(cons.test(target - cons.apply_c(u))) / max(np.linalg.norm(rhs), 1e-300))
    info = {"iterations": it, "cg_residual": hist[-1] if hist else 0.0, "constraint_residual": cres,
            "converged": bool(ok), "stokes_solves": cons.n_stokes, "seconds": time.perf_counter() - t0,
            "history": hist}
    info["stop_value"] = max(info["cg_residual"], cres)
    return cons, mu, u, p, info


def _fluid_mean_zero(p: np.ndarray, chi: np.ndarray) -> np.ndarray:
    fluid = chi == 0
    return p - p[fluid].mean() if fluid.any() else p - p.mean()


def _sedimentation_force(domain, cons, e):
    lam = float(cons.indicator.sum()) / cons.indicator.size
    alpha = lam / (1 - lam)
    force = (1 + alpha) * (cons.indicator - lam)[None] * e.reshape((-1,) + (1,) * domain.d)
    return force, lam, alpha


def _resolve_domain(domain, config, n_grid):
    if domain is None:
        if n_grid is None:
            raise ValueError("give either a domain or n_grid")
        domain = TorusDomain(config.d, config.L, n_grid)
    elif n_grid is not None and n_grid != domain.n_grid:
        domain = TorusDomain(domain.d, domain.L, n_grid)
    if domain.d not in (2, 3):
        raise ValueError("vector Stokes solves need d in {2, 3}")
    domain.check_resolution()
    config.require_hardcore()
    return domain


def solve_sedimentation(domain: TorusDomain | None, config: ParticleConfiguration, e, n_grid: int | None = None,
                        tol: float = DEFAULT_TOL, max_iter: int = 500, precondition: bool = True,
                        raise_on_failure: bool = True) -> SuspensionSolution:
    """Velocity of rigid particles settling under the uniform force ``e``.

    The fluid carries the backflow ``-alpha e`` with ``alpha = lambda / (1 - lambda)``
    and ``lambda`` the discrete inclusion volume fraction.  Raises
    ConvergenceError (with the partial solution attached) when the stopping
    value ``max(CG residual, constraint residual)`` does not reach ``tol``.
    """
    domain = _resolve_domain(domain, config, n_grid)
    e = np.asarray(e, dtype=float).reshape(domain.d)
    probe = RigidConstraint(domain, config)
    force, lam, alpha = _sedimentation_force(domain, probe, e)
    zero = lambda cons: np.zeros(cons.size)
    cons, mu, u, p, info = _rigid_solve(domain, config, force, zero, tol, max_iter, precondition)
    if cons.n_particles == 0:
        u = np.zeros_like(u)
        p = np.zeros_like(p)
    p = _fluid_mean_zero(p, cons.indicator)
    info["rigidity"] = cons.rigidity_residual(u)
    v = cons.cell_means(u)
    _, rot = cons.rigid_fit(u)
    sol = SuspensionSolution(domain, config, e, SpectralField(domain, u, True, True, "phi"),
                             SpectralField(domain, p, name="Pi"), v, rot, alpha, lam, info,
                             np.array([len(i[0]) for i in cons.index], dtype=int))
    if cons.n_particles and info["stop_value"] > tol and raise_on_failure:
        raise ConvergenceError(f"solver stopped at residual {info['stop_value']:.3g} > tol {tol:.3g}", sol)
    return sol


def project_rigid(field_: SpectralField, config: ParticleConfiguration, tol: float = DEFAULT_TOL,
                  max_iter: int = 500) -> SpectralField:
    """Dirichlet-orthogonal projection onto fields that are rigid on every particle.

    The input is first projected onto mean-zero divergence-free fields
    without Nyquist modes.
    """
    domain = field_.domain
    v = solution_space_projection(domain, field_.values)
    cons = RigidConstraint(domain, config)
    if cons.n_particles == 0:
        return SpectralField(domain, v, True, True, "rigid_projection")
    rhs = -cons.galerkin_residual(v)
    coef, it, hist, ok = _pcg(cons, rhs, tol, max_iter)
    corr, _ = stokes_solve(domain, cons.inject(cons.expand(coef)), pressure=False)
    out = SpectralField(domain, v + corr, True, True, "rigid_projection",
                        meta={"iterations": it, "converged": ok, "cg_residual": hist[-1] if hist else 0.0})
    return out


def check_energy_identity(solution: SuspensionSolution) -> tuple[float, float, float]:
    """Dirichlet energy versus ``(1 + alpha) sum_n e . int_{I_n} phi``.

    Returns ``(energy, work, relative residual)``; all zero without particles.
    """
    if solution.n_particles == 0:
        return 0.0, 0.0, 0.0
    dom = solution.domain
    lhs = solution.velocity.dirichlet_energy()
    chi = np.zeros(dom.shape, dtype=bool)
    for idx in RigidConstraint(dom, solution.config).index:
        chi[idx] = True
    proj = np.tensordot(solution.e, solution.velocity.values, axes=(0, 0))
    rhs = (1 + solution.backflow) * float(proj[chi].sum()) * dom.cell_volume
    return lhs, rhs, abs(lhs - rhs) / abs(lhs) if lhs else abs(rhs)


def settling_identity(solution: SuspensionSolution) -> tuple[float, float, float]:
    """Mean settling speed from particle velocities versus the energy route.

    ``lhs = mean_n (e/|e|) . V_n`` and ``rhs = mean |grad phi|^2 / (alpha |e|)``;
    the gap is ``|lhs - rhs| / |lhs|``.
    """
    if solution.n_particles == 0:
        return 0.0, 0.0, 0.0
    ne = float(np.linalg.norm(solution.e))
    lhs = float(np.mean(solution.particle_velocities @ solution.e)) / ne
    rhs = solution.velocity.dirichlet_energy() / solution.domain.volume / (solution.backflow * ne)
    return lhs, rhs, abs(lhs - rhs) / abs(lhs)


# ---------------------------------------------------------------- reflections

@dataclass(eq=False)
class ReflectionReport:
    """Outcome of the method of reflections.

    ``history`` holds the relative rigidity residual after each sweep.
    ``solution`` is the sedimentation velocity ``(1 + alpha) psi`` with
    ``psi`` the reflected approximation of the rigid projection of the
    linearized field.
    """

    converged: bool
    sweeps: int
    history: list
    mode: str
    solution: SpectralField
    particle_velocities: np.ndarray
    stokes_solves: int
    min_distance: float = math.inf

    def summary(self) -> dict:
        return {"converged": self.converged, "sweeps": self.sweeps, "mode": self.mode,
                "final_residual": self.history[-1] if self.history else 0.0, "history": self.history,
                "stokes_solves": self.stokes_solves, "min_distance": self.min_distance}


def solve_by_reflections(domain: TorusDomain | None, config: ParticleConfiguration, e, n_grid: int | None = None,
                         tol: float = DEFAULT_TOL, max_sweeps: int = 50, mode: str = "jacobi",
                         divergence_factor: float = 1e3) -> ReflectionReport:
    """Method of reflections for the rigid projection of the linearized field.

    Each sweep applies the single-particle projections ``q^n`` (exact dense
    single-particle solves) to the field left by the other particles; the
    ``jacobi`` mode updates all particles from the previous sweep (one FFT
    per sweep), ``gauss_seidel`` updates them in turn.  Iteration stops at
    ``tol`` or after ``max_sweeps``, or early when the residual grows by
    ``divergence_factor``.
    """
    if mode not in ("jacobi", "gauss_seidel"):
        raise ValueError(f"unknown reflection mode {mode!r}")
    domain = _resolve_domain(domain, config, n_grid)
    e = np.asarray(e, dtype=float).reshape(domain.d)
    cons = RigidConstraint(domain, config)
    lam = float(cons.indicator.sum()) / cons.indicator.size
    alpha = lam / (1 - lam) if lam < 1 else math.inf
    base, _ = stokes_solve(domain, (cons.indicator - lam)[None] * e.reshape((-1,) + (1,) * domain.d), pressure=False)
    if cons.n_particles == 0:
        return ReflectionReport(True, 0, [], mode, SpectralField(domain, np.zeros_like(base), True, True), np.zeros((0, domain.d)), 1)
    bases = cons.multiplier_bases()
    cs = cons.coef_starts
    g_base = cons.galerkin_residual(base)
    scale = max(np.linalg.norm(g_base), 1e-300)
    coef = np.zeros(cs[-1])
    w_total = np.zeros_like(base)
    history = []
    converged = False
    sweeps = 0
    first = None
    for sweeps in range(1, max_sweeps + 1):
        if mode == "jacobi":
            g = g_base - cons.galerkin_residual(w_total)
            new = np.concatenate([g[cs[n]:cs[n + 1]] / w + coef[cs[n]:cs[n + 1]] for n, (w, _) in enumerate(bases)])
            coef = new
            w_total, _ = cons.stokes(cons.inject(cons.expand(coef)))
        else:
            for n, (w, _) in enumerate(bases):
                g = (g_base - cons.galerkin_residual(w_total))[cs[n]:cs[n + 1]]
                delta = np.zeros_like(coef)
                delta[cs[n]:cs[n + 1]] = g / w
                dw, _ = cons.stokes(cons.inject(cons.expand(delta)))
                w_total = w_total + dw
                coef += delta
        res = float(np.linalg.norm(g_base - cons.galerkin_residual(w_total)) / scale)
        history.append(res)
        first = res if first is None else first
        if res <= tol:
            converged = True
            break
        if not np.isfinite(res) or res > divergence_factor * max(first, 1e-300):
            break
    phi = (1 + alpha) * (base - w_total)
    gap = min_pairwise_distance(config) if config.n_particles >= 2 else math.inf
    return ReflectionReport(converged, sweeps, history, mode, SpectralField(domain, phi, True, True, "phi_reflections"),
                            cons.cell_means(phi), cons.n_stokes + 1, gap)


# ---------------------------------------------------------------- colloidal corrector

def strain_basis(d: int) -> list:
    """Orthonormal basis (Frobenius) of symmetric trace-free d x d matrices."""
    out = []
    for i in range(d - 1):
        m = np.zeros((d, d))
        m[:i + 1, :i + 1][np.diag_indices(i + 1)] = 1.0
        m[i + 1, i + 1] = -(i + 1)
        out.append(m / np.linalg.norm(m))
    for i in range(d):
        for j in range(i + 1, d):
            m = np.zeros((d, d))
            m[i, j] = m[j, i] = 1 / math.sqrt(2)
            out.append(m)
    return out


@dataclass(eq=False)
class CorrectorSolution:
    domain: TorusDomain
    config: ParticleConfiguration
    strain: np.ndarray
    corrector: SpectralField
    pressure: SpectralField
    residuals: dict


def solve_colloidal_corrector(domain: TorusDomain | None, config: ParticleConfiguration, E, n_grid: int | None = None,
                              tol: float = DEFAULT_TOL, max_iter: int = 500) -> CorrectorSolution:
    """Periodic corrector for an imposed strain ``E`` (no gravity).

    ``psi + E (x - x_n)`` is rigid on each particle, the fluid satisfies the
    force-free Stokes equations, and particles carry no net force or torque.
    """
    domain = _resolve_domain(domain, config, n_grid)
    E = np.asarray(E, dtype=float).reshape(domain.d, domain.d)

    def target(cons):
        return cons.nonrigid([-(off @ E.T).ravel() for off in cons.offsets])

    force = np.zeros((domain.d,) + domain.shape)
    cons, mu, u, p, info = _rigid_solve(domain, config, force, target, tol, max_iter)
    if cons.n_particles:
        p = _fluid_mean_zero(p, cons.indicator)
    if cons.n_particles and info["stop_value"] > tol:
        raise ConvergenceError(f"corrector solve stopped at residual {info['stop_value']:.3g}")
    return CorrectorSolution(domain, config, E, SpectralField(domain, u, True, True, "psi_E"),
                             SpectralField(domain, p, name="Sigma_E"), info)


def _gradient_gram(fields: list) -> np.ndarray:
    """Matrix of mean ``grad a : grad b`` over the torus (Parseval)."""
    dom = fields[0].domain
    w = dom.waves
    kk = np.where(w.nyquist, 0.0, w.k2)
    n_tot = dom.n_grid**dom.d
    r = len(fields)
    g = np.empty((r, r))
    for a in range(r):
        for b in range(a, r):
            s = np.sum(w.weight * kk * np.real(np.sum(fields[a].fourier * np.conj(fields[b].fourier), axis=0)))
            g[a, b] = g[b, a] = s / n_tot**2
    return g


@dataclass
class EffectiveViscosity:
    """Ensemble estimate of the effective viscosity on a strain basis.

    ``matrix[a, b] = E[(grad psi_a + E_a) : (grad psi_b + E_b)]`` averaged
    over the torus; ``stderr`` is the entrywise jackknife error.
    """

    matrix: np.ndarray
    stderr: np.ndarray
    eigenvalues: np.ndarray
    min_eigenvalue: float
    min_eigenvalue_stderr: float
    asymmetry: float
    n_samples: int
    basis: list = field(default_factory=list)

    def as_tensor(self) -> np.ndarray:
        """Fourth-order tensor sum_{a,b} B[a,b] E_b (x) E_a."""
        d = self.basis[0].shape[0]
        out = np.zeros((d, d, d, d))
        for a, ea in enumerate(self.basis):
            for b, eb in enumerate(self.basis):
                out += self.matrix[a, b] * np.multiply.outer(ea, eb)
        return out


def effective_viscosity(domain: TorusDomain, configs: Sequence[ParticleConfiguration], n_grid: int | None = None,
                        tol: float = DEFAULT_TOL, min_realizations: int = 5) -> EffectiveViscosity:
    """Effective viscosity from colloidal correctors over an ensemble (no gravity input)."""
    configs = list(configs)
    if len(configs) < min_realizations:
        raise ValueError(f"need at least {min_realizations} realizations, got {len(configs)}")
    if n_grid is not None:
        domain = TorusDomain(domain.d, domain.L, n_grid)
    basis = strain_basis(domain.d)
    r = len(basis)
    per = []
    for c in configs:
        if c.n_particles == 0:
            per.append(np.eye(r))
            continue
        psis = [solve_colloidal_corrector(domain, c, E, tol=tol).corrector for E in basis]
        per.append(np.eye(r) + _gradient_gram(psis))
    per = np.array(per)
    mean, se = jackknife(per, lambda x: x.mean(axis=0))
    eig = np.linalg.eigvalsh(0.5 * (mean + mean.T))
    lo, lo_se = jackknife(per, lambda x: np.linalg.eigvalsh(0.5 * (x.mean(axis=0) + x.mean(axis=0).T))[0])
    if len(per) < 2:
        se = np.zeros_like(mean)
        lo_se = 0.0
    return EffectiveViscosity(mean, se, eig, float(lo), float(lo_se), float(np.max(np.abs(mean - mean.T))),
                              len(per), basis)


def write_run_log(path, payload: dict):
    Path(path).write_text(json.dumps(payload, indent=2, default=lambda o: o.tolist() if hasattr(o, "tolist") else str(o)))
