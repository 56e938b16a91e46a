import math

import numpy as np
import pytest

from sedimentation.linear_model import (_proxy_kernels, linear_fluctuation, linear_settling_speed,
                                        scalar_proxy_samples, scalar_proxy_statistics, solve_linear)
from sedimentation.point_process import EnsembleSpec, ParticleConfiguration, sample_poisson
from sedimentation.torus import TorusDomain, ball_average, stokes_solve

E2 = (0.0, -1.0)


@pytest.fixture(scope="module")
def pair():
    return ParticleConfiguration(2, 8.0, [[-1.7, 0.3], [1.6, -0.4]], 0.1)


def test_single_particle_matches_stokes_of_indicator():
    cfg = ParticleConfiguration(2, 8.0, [[0.4, -0.7]], 0.1)
    dom = TorusDomain(2, 8.0, 64)
    sol = solve_linear(dom, cfg, E2)
    x = dom.coordinates()
    dx = x - np.array([0.4, -0.7]).reshape(2, 1, 1)
    dx -= 8.0 * np.rint(dx / 8.0)
    chi = (np.sum(dx**2, axis=0) < 1.0 * (1 - 1e-12)).astype(float)
    u, _ = stokes_solve(dom, chi[None] * np.array(E2).reshape(2, 1, 1), pressure=False)
    assert np.max(np.abs(sol.velocity.values - u)) <= 1e-14
    assert np.allclose(sol.particle_velocities[0], ball_average(sol.velocity, [0.4, -0.7]), atol=1e-14)
    assert sol.volume_fraction == pytest.approx(chi.mean(), abs=0)


def test_superposition(pair):
    dom = TorusDomain(2, 8.0, 64)
    both = solve_linear(dom, pair, E2).velocity.values
    parts = [solve_linear(dom, pair.with_centers(c[None]), E2).velocity.values for c in pair.centers]
    assert np.max(np.abs(both - sum(parts))) <= 1e-13 * np.max(np.abs(both))


def test_linearity_in_gravity(pair):
    dom = TorusDomain(2, 8.0, 64)
    a = solve_linear(dom, pair, (0.3, -1.0)).velocity.values
    b = solve_linear(dom, pair, (0.0, -1.0)).velocity.values
    c = solve_linear(dom, pair, (1.0, 0.0)).velocity.values
    assert np.max(np.abs(a - b - 0.3 * c)) <= 1e-13 * np.max(np.abs(a))


def test_energy_and_velocity_routes_agree(pair):
    # mean_x |grad phi|^2 = sum_n e.int_{I_n} phi / L^d exactly on the grid, so the
    # energy route equals the cell-count weighted mean of the particle speeds
    sol = solve_linear(None, pair, E2, n_grid=64)
    v, en = linear_settling_speed(sol)
    w = sol.cell_counts / sol.cell_counts.sum()
    weighted = float(w @ (sol.particle_velocities @ np.array(E2)))
    assert en == pytest.approx(weighted, rel=1e-10)
    assert v == pytest.approx(weighted, rel=1e-3)


def test_empty_configuration():
    cfg = ParticleConfiguration(2, 8.0, np.zeros((0, 2)))
    sol = solve_linear(None, cfg, E2, n_grid=32)
    assert sol.velocity.l2_norm() == 0.0
    assert linear_settling_speed(sol) == (0.0, 0.0)


def test_fluctuation_estimators():
    spec = EnsembleSpec("matern_hardcore", 2, {"volume_fraction": 0.05}, 0.1, seed=3)
    sols = [solve_linear(None, c, E2, n_grid=32) for c in spec.realizations(8.0, 20)]
    with pytest.raises(ValueError):
        linear_fluctuation(sols[:5])
    with pytest.raises(ValueError):
        linear_fluctuation(sols, estimator="median")
    f, f_se = linear_fluctuation(sols, estimator="field")
    manual = math.sqrt(np.mean([np.mean(np.sum(s.velocity.values**2, axis=0)) for s in sols]))
    assert f == pytest.approx(manual, rel=1e-12)
    assert f_se > 0
    p, _ = linear_fluctuation(sols, estimator="particle")
    pooled = np.vstack([s.particle_velocities for s in sols if s.n_particles])
    assert p == pytest.approx(math.sqrt(np.sum(pooled.var(axis=0))), rel=1e-12)


def test_scalar_proxy_matches_grid_average():
    # sample the truncated Fourier series of sum_n Ghat(y - x_n) on a grid fine
    # enough to resolve every retained mode; its mean square is the proxy
    rng = np.random.default_rng(4)
    L, n = 6.0, 32
    cfg = ParticleConfiguration(2, L, rng.uniform(-3, 3, size=(3, 2)), delta=-1.0)
    modes, kmag, c = _proxy_kernels(2, L, 4.0)
    ax = -L / 2 + L / n * np.arange(n)
    y = np.stack(np.meshgrid(ax, ax, indexing="ij"), -1).reshape(-1, 2)
    k = 2 * math.pi / L * modes
    s_k = np.exp(-1j * cfg.centers @ k.T).sum(axis=0)
    series = 2 * np.real(np.exp(1j * y @ k.T) @ (c * s_k))
    grads = 2 * np.real(1j * np.exp(1j * y @ k.T)[:, :, None] * (c * s_k)[None, :, None] * k[None])
    speed, fluct = scalar_proxy_samples(cfg, 4.0)
    assert fluct == pytest.approx(np.mean(series**2), rel=1e-10)
    assert speed == pytest.approx(math.pi**2 * np.mean(np.sum(grads.sum(axis=1) ** 2, axis=1)), rel=1e-10)


def test_scalar_proxy_poisson_expectation():
    # E|sum_n exp(-i k.x_n)|^2 = rho L^d for a Poisson process
    d, L, rho = 3, 8.0, 0.05
    configs = [sample_poisson(d, L, rho, seed=6, index=i) for i in range(300)]
    res = scalar_proxy_statistics(configs)
    _, _, c = _proxy_kernels(d, L, 4.0)
    expect = 2 * rho * L**d * np.sum(c**2)
    assert abs(res.fluctuation_proxy_variance - expect) <= 4 * res.fluctuation_proxy_stderr
    with pytest.raises(ValueError):
        scalar_proxy_statistics(configs, domain=TorusDomain(3, 10.0, 32))


def test_single_particle_3d_parallel_and_size_trend():
    speeds = []
    for L, n in ((16.0, 64), (32.0, 128)):
        cfg = ParticleConfiguration(3, L, [[0.0, 0.0, 0.0]], 0.1)
        sol = solve_linear(None, cfg, (0.0, 0.0, -1.0), n_grid=n)
        v = sol.particle_velocities[0]
        assert np.max(np.abs(v[:2])) <= 1e-12 * abs(v[2])
        speeds.append(linear_settling_speed(sol)[0])
    assert abs(speeds[1] / speeds[0] - 1) < 0.2


def test_gravity_scaling_and_parity(pair):
    a = solve_linear(None, pair, (0.0, -1.0), n_grid=64)
    b = solve_linear(None, pair, (0.0, -2.0), n_grid=64)
    c = solve_linear(None, pair, (0.0, 1.0), n_grid=64)
    assert linear_settling_speed(b)[0] == 2 * linear_settling_speed(a)[0]
    assert np.array_equal(c.particle_velocities, -a.particle_velocities)


def test_divergence_and_mean_invariants(pair):
    sol = solve_linear(None, pair, E2, n_grid=64)
    assert sol.velocity.divergence_residual() <= 1e-12
    assert np.max(np.abs(sol.velocity.mean())) <= 1e-12 * sol.velocity.rms()


def test_identical_single_particle_ensemble_has_no_fluctuation():
    cfg = ParticleConfiguration(2, 8.0, [[0.3, 0.1]], 0.1)
    sols = [solve_linear(None, cfg, E2, n_grid=32)] * 20
    # one-pass moments leave the square root of the rounding error
    assert linear_fluctuation(sols, estimator="particle")[0] <= 1e-7


def test_scalar_proxies_vanish_for_identical_configurations():
    cfg = ParticleConfiguration(2, 16.0, [[1.0, -2.0]], 0.1)
    res = scalar_proxy_statistics([cfg] * 10)
    assert res.speed_proxy_variance == pytest.approx(0.0, abs=1e-14)
    assert res.fluctuation_proxy_variance == pytest.approx(0.0, abs=1e-14)


def test_speed_proxy_logarithmic_in_2d():
    from sedimentation.statistics import fit_log_law
    spec = EnsembleSpec("matern_hardcore", 2, {"volume_fraction": 0.1}, 0.1, seed=12)
    Ls = np.array([16.0, 32.0, 64.0, 128.0])
    vals = [scalar_proxy_statistics(list(spec.realizations(L, 20))).speed_proxy_variance for L in Ls]
    fit = fit_log_law(Ls, vals)
    assert fit.slope > 0
    assert fit.r2 >= 0.9
