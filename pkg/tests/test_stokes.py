import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sedimentation.linear_model import solve_linear
from sedimentation.oracles import DenseStokes2D
from sedimentation.point_process import ParticleConfiguration
from sedimentation.stokes import (ConvergenceError, RigidConstraint, check_energy_identity, effective_viscosity,
                                  project_rigid, settling_identity, solve_by_reflections, solve_colloidal_corrector,
                                  solve_sedimentation, strain_basis)
from sedimentation.torus import SpectralField, TorusDomain

E2 = (0.0, -1.0)


@pytest.fixture(scope="module")
def pair():
    return ParticleConfiguration(2, 8.0, [[-1.7, 0.3], [1.6, -0.4]], 0.1)


@pytest.fixture(scope="module")
def pair_solution(pair):
    return solve_sedimentation(None, pair, E2, n_grid=64)


def test_matches_dense_oracle_single_particle():
    cfg = ParticleConfiguration(2, 8.0, [[0.5, -0.25]], 0.1)
    sol = solve_sedimentation(None, cfg, E2, n_grid=32)
    ref = DenseStokes2D(8.0, 32).solve_sedimentation(cfg, E2)
    assert np.linalg.norm(sol.velocity.values - ref) <= 1e-6 * np.linalg.norm(ref)


def test_matches_dense_oracle_pair(pair, pair_solution):
    ref = DenseStokes2D(8.0, 64).solve_sedimentation(pair, E2)
    assert np.linalg.norm(pair_solution.velocity.values - ref) <= 1e-6 * np.linalg.norm(ref)


def test_solution_is_rigid_and_solenoidal(pair_solution):
    r = pair_solution.residuals
    assert r["constraint_residual"] <= 1e-6
    assert r["converged"]
    assert pair_solution.velocity.divergence_residual() <= 1e-12
    assert np.all(pair_solution.particle_velocities @ np.array(E2) > 0)


def test_identities(pair_solution):
    assert check_energy_identity(pair_solution)[2] <= 1e-6
    assert settling_identity(pair_solution)[2] <= 1e-3


def test_single_particle_symmetry():
    cfg = ParticleConfiguration(2, 8.0, [[0.0, 0.0]], 0.1)
    sol = solve_sedimentation(None, cfg, E2, n_grid=64)
    v = sol.particle_velocities[0]
    # mirror symmetry about the vertical axis, up to the solver tolerance
    assert abs(v[0]) <= 1e-8 * abs(v[1])
    assert abs(float(np.ravel(sol.angular_velocities)[0])) <= 1e-8 * abs(v[1])


def test_linear_in_gravity(pair):
    a = solve_sedimentation(None, pair, (0.0, -1.0), n_grid=32, tol=1e-10).velocity.values
    b = solve_sedimentation(None, pair, (0.0, 2.0), n_grid=32, tol=1e-10).velocity.values
    assert np.linalg.norm(b + 2 * a) <= 1e-7 * np.linalg.norm(a)


@settings(max_examples=5)
@given(st.integers(-8, 8), st.integers(-8, 8))
def test_grid_translation_equivariance(i, j):
    base = np.array([[-1.7, 0.3], [1.6, -0.4]])
    h = 8.0 / 32
    a = solve_sedimentation(None, ParticleConfiguration(2, 8.0, base, 0.1), E2, n_grid=32, tol=1e-10)
    b = solve_sedimentation(None, ParticleConfiguration(2, 8.0, base + h * np.array([i, j]), 0.1), E2,
                            n_grid=32, tol=1e-10)
    shifted = np.roll(a.velocity.values, (i, j), axis=(1, 2))
    assert np.linalg.norm(b.velocity.values - shifted) <= 1e-7 * np.linalg.norm(shifted)


def test_empty_configuration_gives_zero_field():
    sol = solve_sedimentation(None, ParticleConfiguration(2, 8.0, np.zeros((0, 2))), E2, n_grid=32)
    assert sol.velocity.l2_norm() == 0.0
    assert check_energy_identity(sol) == (0.0, 0.0, 0.0)


def test_convergence_error_carries_partial_solution(pair):
    with pytest.raises(ConvergenceError) as info:
        solve_sedimentation(None, pair, E2, n_grid=32, max_iter=1, tol=1e-14)
    assert info.value.solution is not None
    assert info.value.solution.residuals["iterations"] == 1


def test_rejects_unsupported_dimension():
    with pytest.raises(ValueError):
        solve_sedimentation(None, ParticleConfiguration(1, 16.0, [[0.0]]), (1.0,), n_grid=64)


def test_projection_reformulation(pair, pair_solution):
    lin = solve_linear(None, pair, E2, n_grid=64)
    proj = project_rigid(lin.velocity, pair)
    phi = pair_solution.velocity.values
    got = proj.values / (1 - pair_solution.volume_fraction)
    assert np.linalg.norm(got - phi) <= 1e-6 * np.linalg.norm(phi)


def test_projection_is_contractive_and_idempotent(pair, rng):
    dom = TorusDomain(2, 8.0, 32)
    f = SpectralField(dom, rng.standard_normal((2,) + dom.shape))
    p1 = project_rigid(f, pair, tol=1e-10)
    p2 = project_rigid(p1, pair, tol=1e-10)
    assert np.linalg.norm(p2.values - p1.values) <= 1e-6 * np.linalg.norm(p1.values)
    assert p1.dirichlet_energy() <= project_rigid(f, ParticleConfiguration(2, 8.0, np.zeros((0, 2)))).dirichlet_energy()


def test_reflections_converge_for_dilute_pair():
    cfg = ParticleConfiguration(2, 32.0, [[-8.0, 0.5], [8.0, -0.5]], 0.1)
    direct = solve_sedimentation(None, cfg, E2, n_grid=128)
    for mode in ("jacobi", "gauss_seidel"):
        refl = solve_by_reflections(None, cfg, E2, n_grid=128, mode=mode)
        assert refl.converged
        err = np.linalg.norm(refl.solution.values - direct.velocity.values) / np.linalg.norm(direct.velocity.values)
        assert err <= 1e-4
        assert refl.summary()["sweeps"] == refl.sweeps
    with pytest.raises(ValueError):
        solve_by_reflections(None, cfg, E2, n_grid=128, mode="sor")


def test_gauss_seidel_not_slower_than_jacobi():
    cfg = ParticleConfiguration(2, 16.0, [[-1.6, 0.0], [1.6, 0.0]], 0.1)
    j = solve_by_reflections(None, cfg, E2, n_grid=64, mode="jacobi", tol=1e-8, max_sweeps=100)
    g = solve_by_reflections(None, cfg, E2, n_grid=64, mode="gauss_seidel", tol=1e-8, max_sweeps=100)
    assert g.converged and j.converged
    assert g.sweeps <= j.sweeps


@pytest.mark.parametrize("d", [2, 3])
def test_strain_basis_orthonormal_trace_free(d):
    b = strain_basis(d)
    assert len(b) == d * (d + 1) // 2 - 1
    gram = np.array([[np.sum(x * y) for y in b] for x in b])
    assert np.allclose(gram, np.eye(len(b)), atol=1e-14)
    for m in b:
        assert abs(np.trace(m)) <= 1e-14
        assert np.array_equal(m, m.T)


def test_corrector_makes_strain_rigid():
    cfg = ParticleConfiguration(2, 8.0, [[0.3, -0.2]], 0.1)
    dom = TorusDomain(2, 8.0, 64)
    E = strain_basis(2)[0]
    sol = solve_colloidal_corrector(dom, cfg, E)
    x = dom.coordinates()
    total = sol.corrector.values + np.einsum("ij,j...->i...", E, x)
    cons = RigidConstraint(dom, cfg)
    rigid, _ = cons.rigid_fit(total)
    # the Galerkin residual of the affine-plus-corrector field vanishes on the particle
    assert np.linalg.norm(cons.galerkin_residual(total)) <= 1e-6 * np.linalg.norm(cons.galerkin_residual(
        np.einsum("ij,j...->i...", E, x)))
    assert sol.residuals["converged"]


def test_effective_viscosity_dilute():
    dom = TorusDomain(2, 16.0, 64)
    empty = ParticleConfiguration(2, 16.0, np.zeros((0, 2)))
    assert np.array_equal(effective_viscosity(dom, [empty] * 5).matrix, np.eye(2))
    one = ParticleConfiguration(2, 16.0, [[0.0, 0.0]], 0.1)
    ev = effective_viscosity(dom, [one], min_realizations=1)
    lam = math.pi / 256
    assert ev.asymmetry <= 1e-10
    # dilute limit: isotropic part Id + 4 lambda Id (twice the Einstein coefficient
    # under the full-gradient normalization); the square cell splits the two strains
    assert np.all(ev.eigenvalues > 1 + lam)
    assert np.trace(ev.matrix - np.eye(2)) / (2 * lam) == pytest.approx(4.0, rel=0.2)
    with pytest.raises(ValueError):
        effective_viscosity(dom, [one])


def test_single_particle_3d_symmetry():
    cfg = ParticleConfiguration(3, 8.0, [[0.0, 0.0, 0.0]], 0.1)
    sol = solve_sedimentation(None, cfg, (0.0, 0.0, -1.0), n_grid=32)
    v = sol.particle_velocities[0]
    assert np.max(np.abs(v[:2])) <= 1e-8 * abs(v[2])
    assert np.max(np.abs(sol.angular_velocities[0])) <= 1e-8 * abs(v[2])


def test_rigid_field_is_fixed_by_projection(pair, pair_solution):
    again = project_rigid(pair_solution.velocity, pair, tol=1e-10)
    ref = pair_solution.velocity.values
    assert np.linalg.norm(again.values - ref) <= 1e-7 * np.linalg.norm(ref)


def test_reflections_single_particle_one_sweep():
    cfg = ParticleConfiguration(2, 8.0, [[0.4, 0.2]], 0.1)
    refl = solve_by_reflections(None, cfg, E2, n_grid=64)
    direct = solve_sedimentation(None, cfg, E2, n_grid=64)
    assert refl.converged and refl.sweeps == 1
    assert np.linalg.norm(refl.solution.values - direct.velocity.values) <= 1e-7 * np.linalg.norm(direct.velocity.values)
    assert refl.min_distance == math.inf


def test_reflection_report_records_every_sweep():
    near = ParticleConfiguration(2, 8.0, [[-1.05, 0.0], [1.05, 0.0]], 0.05)
    r = solve_by_reflections(None, near, E2, n_grid=64, max_sweeps=7)
    assert len(r.history) == r.sweeps
    assert r.converged == (r.history[-1] <= 1e-8)
    assert r.min_distance == pytest.approx(2.1, abs=1e-12)


def test_identity_homogeneity(pair):
    a = solve_sedimentation(None, pair, (0.0, -1.0), n_grid=64, tol=1e-10)
    b = solve_sedimentation(None, pair, (0.0, -2.0), n_grid=64, tol=1e-10)
    c = solve_sedimentation(None, pair, (0.0, 1.0), n_grid=64, tol=1e-10)
    ea, eb = check_energy_identity(a), check_energy_identity(b)
    assert eb[0] == pytest.approx(4 * ea[0], rel=1e-9)
    assert eb[1] == pytest.approx(4 * ea[1], rel=1e-9)
    assert abs(eb[2] - ea[2]) <= 1e-9
    sa, sb, sc = settling_identity(a), settling_identity(b), settling_identity(c)
    assert sb[0] == pytest.approx(2 * sa[0], rel=1e-9) and sb[1] == pytest.approx(2 * sa[1], rel=1e-9)
    assert sc[0] == pytest.approx(sa[0], rel=1e-9) and sc[1] == pytest.approx(sa[1], rel=1e-9)


def test_corrector_linearity_and_empty():
    dom = TorusDomain(2, 8.0, 64)
    E = strain_basis(2)[1]
    empty = solve_colloidal_corrector(dom, ParticleConfiguration(2, 8.0, np.zeros((0, 2))), E)
    assert empty.corrector.l2_norm() == 0.0
    cfg = ParticleConfiguration(2, 8.0, [[0.3, -0.2]], 0.1)
    one = solve_colloidal_corrector(dom, cfg, E, tol=1e-10).corrector.values
    two = solve_colloidal_corrector(dom, cfg, 2 * E, tol=1e-10).corrector.values
    assert np.linalg.norm(two - 2 * one) <= 1e-8 * np.linalg.norm(one)


def test_corrector_rotation_equivariance():
    # a quarter turn maps the diagonal strain to its negative and fixes a centred particle
    dom = TorusDomain(2, 8.0, 64)
    cfg = ParticleConfiguration(2, 8.0, [[0.0, 0.0]], 0.1)
    E = strain_basis(2)[0]
    R = np.array([[0.0, -1.0], [1.0, 0.0]])
    ER = R @ E @ R.T
    psi = solve_colloidal_corrector(dom, cfg, E, tol=1e-12).corrector.values
    psi_r = solve_colloidal_corrector(dom, cfg, ER, tol=1e-12).corrector.values
    # grid index of R x: x = -L/2 + i h, so (i, j) -> (n - j, i) modulo n
    n = dom.n_grid
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    src_i, src_j = j % n, (-i) % n  # R^T x
    rotated = np.einsum("ab,bij->aij", R, psi[:, src_i, src_j])
    assert np.linalg.norm(psi_r - rotated) <= 1e-8 * np.linalg.norm(psi)


def test_effective_viscosity_first_order_in_fraction():
    out = []
    for L, n in ((16.0, 64), (24.0, 96)):
        dom = TorusDomain(2, L, n)
        cfg = ParticleConfiguration(2, L, [[0.0, 0.0]], 0.1)
        ev = effective_viscosity(dom, [cfg], min_realizations=1)
        out.append((np.linalg.norm(ev.matrix - np.eye(2)), cfg.volume_fraction))
    c1, c2 = out[0][0] / out[0][1], out[1][0] / out[1][1]
    assert c2 == pytest.approx(c1, rel=0.3)
