"""
Linearized (dilute) sedimentation model and scalar proxies.

The linearized velocity field is the superposition of ball-averaged periodic
Stokeslets, i.e. the mean-zero solution of

    -Lap(phi) + grad(Pi) = (1_I - lambda) e,   div(phi) = 0,

with ``I`` the union of particle balls and ``lambda`` their volume fraction.
Particle velocities are the averages of ``phi`` over each ball.  Rigidity is
not imposed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .point_process import ParticleConfiguration
from .statistics import _half_space_modes, _mode_power, _mode_sums, jackknife
from .torus import SpectralField, TorusDomain, ball_cells, ball_form_factor, stokes_solve, unit_ball_volume

__all__ = [
    "LinearSolution",
    "ScalarProxyResult",
    "solve_linear",
    "linear_settling_speed",
    "linear_fluctuation",
    "scalar_proxy_statistics",
    "scalar_proxy_samples",
    "particle_cells",
]


def particle_cells(domain: TorusDomain, config: ParticleConfiguration):
    """Grid cells of each particle (see :func:`ball_cells`)."""
    return [ball_cells(domain, c, config.radius) for c in config.centers]


def _domain_for(config: ParticleConfiguration, domain: TorusDomain | None, n_grid: int | None) -> TorusDomain:
    if domain is None:
        if n_grid is None:
            raise ValueError("give either a domain or n_grid")
        domain = TorusDomain(config.d, config.L, n_grid)
    elif n_grid is not None and n_grid != domain.n_grid:
        domain = TorusDomain(domain.d, domain.L, n_grid)
    if domain.d != config.d or abs(domain.L - config.L) > 1e-12:
        raise ValueError("configuration and domain disagree on dimension or side length")
    if domain.d not in (2, 3):
        raise ValueError("vector Stokes solves need d in {2, 3}")
    domain.check_resolution()
    config.require_hardcore()
    return domain


@dataclass(eq=False)
class LinearSolution:
    domain: TorusDomain
    config: ParticleConfiguration
    e: np.ndarray
    velocity: SpectralField
    particle_velocities: np.ndarray
    cell_counts: np.ndarray
    volume_fraction: float

    @property
    def n_particles(self) -> int:
        return self.config.n_particles


def solve_linear(domain: TorusDomain | None, config: ParticleConfiguration, e, n_grid: int | None = None) -> LinearSolution:
    """Solve the linearized model for one configuration.

    The volume fraction is the discrete one (inclusion cells times cell
    volume over L^d), which keeps the energy and velocity routes to the
    settling speed consistent on the grid.
    """
    domain = _domain_for(config, domain, n_grid)
    e = np.asarray(e, dtype=float).reshape(domain.d)
    chi = np.zeros(domain.shape)
    cells = particle_cells(domain, config)
    for idx, _ in cells:
        chi[idx] = 1.0
    lam = float(chi.sum()) / chi.size
    if config.n_particles == 0:
        u = np.zeros((domain.d,) + domain.shape)
    else:
        u, _ = stokes_solve(domain, chi[None] * e.reshape((-1,) + (1,) * domain.d), pressure=False)
    v = np.array([u[(slice(None),) + idx].mean(axis=1) for idx, _ in cells]).reshape(-1, domain.d)
    counts = np.array([idx[0].size for idx, _ in cells], dtype=int)
    field = SpectralField(domain, u, divergence_free=True, mean_zero=True, name="phi_linear")
    return LinearSolution(domain, config, e, field, v, counts, lam)


def linear_settling_speed(solution: LinearSolution) -> tuple[float, float]:
    """Settling speed along ``e`` from particle velocities and from the energy.

    Returns ``(mean_n e.V_n / |e|, mean |grad phi|^2 / (lambda |e|))``.
    Both vanish for an empty configuration.
    """
    if solution.n_particles == 0:
        return 0.0, 0.0
    e = solution.e
    ne = float(np.linalg.norm(e))
    from_v = float(np.mean(solution.particle_velocities @ e)) / ne
    energy = solution.velocity.dirichlet_energy() / solution.domain.volume
    return from_v, energy / (solution.volume_fraction * ne)


def linear_fluctuation(solutions: Sequence[LinearSolution], min_realizations: int = 20,
                       estimator: str = "particle") -> tuple[float, float]:
    """Velocity fluctuation of the linearized model with a jackknife error.

    Parameters
    ----------
    solutions : sequence of LinearSolution
        Independent realizations at a common ``L``.
    min_realizations : int
        Smallest accepted ensemble size.
    estimator : {"particle", "field"}
        ``"particle"`` pools all particle velocities and returns the square
        root of the trace of their covariance.  ``"field"`` returns
        ``(E mean_x |phi(x)|^2)^{1/2}``, the spatially averaged field
        fluctuation; it does not condition on a particle at the observation
        point and so carries no hard-core exclusion offset.
    """
    if len(solutions) < min_realizations:
        raise ValueError(f"need at least {min_realizations} realizations, got {len(solutions)}")
    if estimator == "field":
        rows = np.array([s.velocity.l2_norm() ** 2 / s.domain.volume for s in solutions])
        return jackknife(rows, lambda r: math.sqrt(max(float(np.mean(r)), 0.0)))
    if estimator != "particle":
        raise ValueError(f"unknown estimator {estimator!r}")
    d = solutions[0].domain.d
    s1 = np.array([s.particle_velocities.sum(axis=0) if s.n_particles else np.zeros(d) for s in solutions])
    s2 = np.array([np.sum(s.particle_velocities**2) for s in solutions])
    n = np.array([s.n_particles for s in solutions], float)
    rows = np.column_stack([n, s2, s1])

    def stat(r):
        tot = r[:, 0].sum()
        mean = r[:, 2:].sum(axis=0) / tot
        return math.sqrt(max(r[:, 1].sum() / tot - float(mean @ mean), 0.0))

    return jackknife(rows, stat)


# ---------------------------------------------------------------- scalar proxies

@dataclass
class ScalarProxyResult:
    """Scalar proxies for the speed bound and the velocity fluctuation.

    ``speed`` is ``Var[sum_n F_L(y - x_n)]`` (trace) with
    ``F_L = int_{B(x)} grad G_L``; ``fluctuation`` is
    ``Var[sum_n Ghat_L(y - x_n)]`` with ``Ghat_L`` the unit-ball average of
    ``G_L``.  Both are averaged over the observation point ``y``.
    """

    speed_proxy_variance: float
    speed_proxy_stderr: float
    fluctuation_proxy_variance: float
    fluctuation_proxy_stderr: float
    n_samples: int
    mean_particles: float

    def __iter__(self):
        return iter((self.speed_proxy_variance, self.fluctuation_proxy_variance))


def _proxy_kernels(d: int, L: float, k_cut: float):
    m = _half_space_modes(d, L, k_cut)
    kmag = 2 * math.pi / L * np.sqrt(np.sum(m**2, axis=1))
    # Fourier-series coefficient of Ghat_L: form(k) / (|k|^2 L^d)
    c = ball_form_factor(kmag, d) / (kmag**2 * L**d)
    return m, kmag, c


def scalar_proxy_samples(config: ParticleConfiguration, k_cut: float = 4.0) -> tuple[float, float]:
    """Observation-point averages of ``|sum F_L|^2`` and ``|sum Ghat_L|^2`` for one realization.

    Exact average over ``y`` by Parseval: ``sum_k |c_k|^2 |sum_n exp(-i k.x_n)|^2``
    over the dual lattice with ``0 < |k| <= k_cut`` (both half-spaces).
    """
    modes, kmag, c = _proxy_kernels(config.d, config.L, k_cut)
    if config.n_particles == 0:
        return 0.0, 0.0
    power = _mode_power(config, modes)
    ball = unit_ball_volume(config.d)
    fluct = 2 * float(np.sum(c**2 * power))
    speed = 2 * ball**2 * float(np.sum(kmag**2 * c**2 * power))
    return speed, fluct


def scalar_proxy_statistics(configs: Sequence[ParticleConfiguration], domain: TorusDomain | None = None,
                            k_cut: float | None = None) -> ScalarProxyResult:
    """Ensemble variances of the scalar speed and fluctuation proxies (any d in 1..4).

    For each observation point ``y`` the variance over the ensemble of
    ``sum_n Ghat_L(y - x_n)`` (and of ``sum_n F_L(y - x_n)``) is averaged over
    ``y``.  By Parseval this is ``2 sum_k |c_k|^2 Var[S_k]`` over half of the
    dual lattice with ``S_k = sum_n exp(-i k.x_n)`` and the unbiased complex
    variance ``Var[S_k] = M/(M-1) (mean |S_k|^2 - |mean S_k|^2)``.  For a
    stationary ensemble ``E S_k = 0`` and this reduces to the mean of
    :func:`scalar_proxy_samples`.  Errors are jackknife over realizations.

    The wavenumber cutoff defaults to the grid Nyquist ``pi / h`` when a
    domain is given, otherwise 4.  Since both kernels decay fast in Fourier
    space the truncation only adds an L-independent offset.
    """
    configs = list(configs)
    if not configs:
        raise ValueError("empty ensemble")
    d, L = configs[0].d, configs[0].L
    if any(c.d != d or c.L != L for c in configs):
        raise ValueError("all realizations must live on the same torus")
    if domain is not None:
        if domain.d != d or abs(domain.L - L) > 1e-12:
            raise ValueError("configuration and domain disagree on dimension or side length")
        k_cut = math.pi / domain.h if k_cut is None else k_cut
    k_cut = 4.0 if k_cut is None else k_cut
    modes, kmag, c = _proxy_kernels(d, L, k_cut)
    ball = unit_ball_volume(d)
    w_fluct = 2 * c**2
    w_speed = 2 * ball**2 * kmag**2 * c**2
    sums = np.array([_mode_sums(cf, modes) if cf.n_particles else np.zeros(len(modes), complex) for cf in configs])
    m = len(configs)

    def stat(s):
        k = len(s)
        if k < 2:
            return np.array([math.nan, math.nan])
        mean = s.mean(axis=0)
        var = k / (k - 1) * (np.mean(np.abs(s) ** 2, axis=0) - np.abs(mean) ** 2)
        return np.array([float(w_speed @ var), float(w_fluct @ var)])

    val, se = jackknife(sums, stat) if m > 2 else (stat(sums), np.full(2, math.nan))
    return ScalarProxyResult(float(val[0]), float(se[0]), float(val[1]), float(se[1]), m,
                             float(np.mean([cf.n_particles for cf in configs])))
