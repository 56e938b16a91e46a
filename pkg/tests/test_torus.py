import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sedimentation.statistics import fit_power_law
from sedimentation.torus import (ResolutionError, SpectralField, TorusDomain, averaged_stokeslet, ball_average,
                                 ball_cells, ball_form_factor, laplace_green, leray_project, periodic_distance,
                                 stokes_solve, unit_ball_volume)

# lattice constant of the simple cubic Ewald sum: the periodic zero-mean Green
# function behaves like 1/(4 pi r) - MADELUNG/(4 pi L) + r^2/(6 L^3) near 0
MADELUNG = 2.837297


@pytest.fixture(scope="module")
def green32():
    return laplace_green(TorusDomain(3, 32.0, 128))


@pytest.fixture(scope="module")
def stokeslet32():
    return averaged_stokeslet(TorusDomain(3, 32.0, 128), [0.0, 0.0, 1.0])


# ---------------------------------------------------------------- domain

def test_domain_rejects_bad_sizes():
    with pytest.raises(ValueError):
        TorusDomain(5, 8.0, 16)
    with pytest.raises(ValueError):
        TorusDomain(2, 0.5, 16)
    with pytest.raises(ValueError):
        TorusDomain(2, 8.0, 14)  # factor 7
    with pytest.raises(ValueError):
        TorusDomain(2, 8.0, 15)  # odd


def test_with_spacing_keeps_h_bounded():
    for L in (8.0, 12.0, 10.0, 21.0):
        dom = TorusDomain.with_spacing(2, L, 0.25)
        assert dom.h <= 0.25 + 1e-12
        dom.check_resolution()


def test_resolution_error():
    with pytest.raises(ResolutionError):
        TorusDomain(2, 16.0, 32).check_resolution()


def test_wrap_is_canonical():
    dom = TorusDomain(1, 10.0, 16)
    assert dom.wrap(5.0) == 5.0
    assert dom.wrap(-5.0) == 5.0
    assert dom.wrap(7.0) == -3.0


# ---------------------------------------------------------------- distance

def test_distance_examples():
    assert periodic_distance(1.5, 1.5, 10.0) == 0.0
    assert periodic_distance(4.9, -4.9, 10.0) == pytest.approx(0.2, abs=1e-12)
    assert periodic_distance([3.0, 3.0], [-3.0, -3.0], 8.0) == pytest.approx(2 * math.sqrt(2), abs=1e-12)


def _brute_distance(x, y, L):
    d = len(x)
    best = math.inf
    for shift in itertools.product((-1, 0, 1), repeat=d):
        best = min(best, float(np.linalg.norm(np.asarray(x) - np.asarray(y) + L * np.asarray(shift))))
    return best


coords = st.floats(-4.0, 4.0, allow_nan=False)
points2 = st.tuples(coords, coords)


@given(points2, points2)
def test_distance_matches_image_minimum(x, y):
    assert periodic_distance(x, y, 8.0) == pytest.approx(_brute_distance(x, y, 8.0), abs=1e-12)


@given(points2, points2, points2)
def test_distance_metric_axioms(x, y, z):
    L = 8.0
    dxy = periodic_distance(x, y, L)
    assert dxy == pytest.approx(periodic_distance(y, x, L), abs=1e-14)
    assert dxy <= L * math.sqrt(2) / 2 + 1e-12
    assert dxy <= periodic_distance(x, z, L) + periodic_distance(z, y, L) + 1e-12


# ---------------------------------------------------------------- Green function

def test_green_zero_mode_and_symmetry():
    dom = TorusDomain(2, 8.0, 64)
    g = laplace_green(dom)
    assert abs(g.fourier[0][(0,) * dom.d]) <= 1e-12 * np.max(np.abs(g.fourier))
    v = g.values[0]
    flipped = np.roll(v[::-1, ::-1], 1, axis=(0, 1))
    assert np.max(np.abs(v - flipped)) <= 1e-10 * np.max(np.abs(v))


def test_green_solves_poisson_in_fourier():
    dom = TorusDomain(3, 8.0, 32)
    g = laplace_green(dom, shift=[0.5, -1.0, 2.0])
    w = dom.waves
    src = np.zeros(dom.shape)
    src[tuple(dom.nearest_index([0.5, -1.0, 2.0]))] = 1 / dom.cell_volume
    s_hat = np.fft.rfftn(src)
    res = np.where(w.zero, 0, w.k2 * g.fourier[0] - s_hat)
    assert np.max(np.abs(res)) <= 1e-10 * np.max(np.abs(s_hat))


def _axis_values(field, dom, comp, radii, axis):
    i0 = dom.n_grid // 2
    out = []
    for r in radii:
        idx = [i0] * dom.d
        idx[axis] = i0 + int(round(r / dom.h))
        out.append(field.values[(comp,) + tuple(idx)])
    return np.array(out)


def test_green_matches_periodic_asymptotics(green32):
    dom = green32.domain
    L = dom.L
    r = np.arange(2.0, 6.01, 0.5)
    g = _axis_values(green32, dom, 0, r, 0)
    oracle = 1 / (4 * math.pi * r) - MADELUNG / (4 * math.pi * L) + r**2 / (6 * L**3)
    assert np.max(np.abs(g - oracle) / oracle) <= 0.02


@pytest.mark.xfail(strict=True, reason="bare Coulomb kernel ignores the periodic offset; see decisions ledger")
def test_green_literal_free_space_within_ten_percent(green32):
    dom = green32.domain
    r = np.arange(2.0, 6.01, 0.5)
    g = _axis_values(green32, dom, 0, r, 0)
    free = 1 / (4 * math.pi * r)
    assert np.max(np.abs(g - free) / free) <= 0.10


# ---------------------------------------------------------------- Stokeslet

def test_stokeslet_divergence_free_and_mean_zero(stokeslet32):
    U, P = stokeslet32
    assert U.divergence_residual() <= 1e-12
    assert np.max(np.abs(U.mean())) <= 1e-12 * U.rms()
    assert abs(P.mean()[0]) <= 1e-12 * P.rms()


def test_stokeslet_axial_response_is_parallel():
    dom = TorusDomain(3, 8.0, 32)
    U, _ = averaged_stokeslet(dom, [0.0, 0.0, 1.0])
    u0 = U.sample([[0.0, 0.0, 0.0]])[0]
    assert abs(u0[0]) <= 1e-12 * abs(u0[2])
    assert abs(u0[1]) <= 1e-12 * abs(u0[2])
    assert u0[2] > 0


def test_stokeslet_rejects_bad_dimension():
    with pytest.raises(ValueError):
        averaged_stokeslet(TorusDomain(1, 8.0, 32), [1.0])


def _envelope(U, radii):
    dom = U.domain
    x = dom.coordinates()
    r = np.sqrt(np.sum(x**2, axis=0))
    mag = np.sqrt(np.sum(U.values**2, axis=0))
    return np.array([mag[np.abs(r - rr) <= dom.h / 2].max() for rr in radii])


def test_stokeslet_envelope_decay_after_lattice_offset(stokeslet32):
    # the zero-mean periodic Stokeslet carries the uniform Hasimoto offset
    # MADELUNG F / (6 pi L) with F = |B|; restoring it exposes the r^{-1} law
    U, _ = stokeslet32
    radii = np.arange(2.0, 8.01, 0.5)
    offset = MADELUNG * unit_ball_volume(3) / (6 * math.pi * U.domain.L)
    slope = fit_power_law(radii, _envelope(U, radii) + offset).exponent
    assert slope == pytest.approx(-1.0, abs=0.2)


def test_stokeslet_axis_matches_periodic_oseen(stokeslet32):
    U, _ = stokeslet32
    dom = U.domain
    F = unit_ball_volume(3)
    offset = MADELUNG * F / (6 * math.pi * dom.L)
    r = np.array([2.0, 3.0, 4.0, 6.0])
    # point value of the Oseen tensor plus the ball-averaging correction a^2/10 Lap
    oracle = F / (4 * math.pi * r) - F / (20 * math.pi * r**3) - offset
    got = _axis_values(U, dom, 2, r, 2)
    assert np.max(np.abs(got - oracle) / oracle) <= 0.08


@pytest.mark.xfail(strict=True, reason="periodic offset steepens the raw envelope; see decisions ledger")
def test_stokeslet_literal_envelope_slope(stokeslet32):
    U, _ = stokeslet32
    radii = np.arange(2.0, 8.01, 0.5)
    assert fit_power_law(radii, _envelope(U, radii)).exponent == pytest.approx(-1.0, abs=0.2)


# ---------------------------------------------------------------- ball averages

def test_ball_average_constant_and_odd_fields():
    dom = TorusDomain(2, 8.0, 64)
    c = SpectralField(dom, np.stack([np.full(dom.shape, 2.5), np.full(dom.shape, -1.0)]))
    assert np.allclose(ball_average(c, [0.3, -1.2]), [2.5, -1.0], rtol=0, atol=1e-14)
    x = dom.coordinates()
    A = np.array([[1.0, 2.0], [-0.5, 3.0]])
    lin = SpectralField(dom, np.einsum("ij,j...->i...", A, x))
    assert np.max(np.abs(ball_average(lin, [0.0, 0.0]))) <= 1e-12


def test_ball_average_matches_loop_quadrature():
    dom = TorusDomain(2, 8.0, 64)
    U, _ = averaged_stokeslet(dom, [0.0, -1.0], center=[1.3, -2.1])
    center = np.array([1.3, -2.1])
    total, count = np.zeros(2), 0
    ax = dom.axis()
    for i in range(dom.n_grid):
        for j in range(dom.n_grid):
            p = np.array([ax[i], ax[j]])
            dx = p - center
            dx -= dom.L * np.rint(dx / dom.L)
            if dx @ dx < 1.0 * (1 - 1e-12):
                total += U.values[:, i, j]
                count += 1
    idx, _ = ball_cells(dom, center)
    assert count == idx[0].size
    assert np.allclose(ball_average(U, center), total / count, rtol=1e-13, atol=0)


def test_ball_average_needs_eight_cells():
    dom = TorusDomain(2, 8.0, 10)
    f = SpectralField(dom, np.ones((1,) + dom.shape))
    with pytest.raises(ResolutionError):
        ball_average(f, [0.0, 0.0])


def test_ball_average_refinement_order():
    vals = []
    for n in (32, 64, 128):
        dom = TorusDomain(2, 8.0, n)
        U, _ = averaged_stokeslet(dom, [0.0, -1.0])
        vals.append(ball_average(U, [2.5, 1.0]))
    d1 = np.linalg.norm(vals[0] - vals[1])
    d2 = np.linalg.norm(vals[1] - vals[2])
    assert math.log2(d1 / d2) >= 1.0


# ---------------------------------------------------------------- Leray projection and Stokes

def _random_field(dom, rng, comps=None):
    return SpectralField(dom, rng.standard_normal((comps or dom.d,) + dom.shape))


def test_leray_kills_gradients(rng):
    dom = TorusDomain(2, 8.0, 32)
    q = SpectralField(dom, rng.standard_normal(dom.shape))
    grad = SpectralField(dom, q.gradient()[0])
    out = leray_project(grad)
    assert np.max(np.abs(out.values)) <= 1e-12 * np.max(np.abs(grad.values))


def test_leray_idempotent_and_self_adjoint(rng):
    dom = TorusDomain(3, 6.0, 16)
    f, g = _random_field(dom, rng), _random_field(dom, rng)
    pf = leray_project(f)
    ppf = leray_project(pf)
    assert np.max(np.abs(ppf.values - pf.values)) <= 1e-12 * np.max(np.abs(pf.values))
    assert pf.divergence_residual() <= 1e-12
    a, b = pf.inner(g), f.inner(leray_project(g))
    assert abs(a - b) <= 1e-10 * max(abs(a), 1.0)


@given(st.integers(0, 2**31 - 1))
def test_leray_idempotence_property(seed):
    rng = np.random.default_rng(seed)
    dom = TorusDomain(2, 4.0, 16)
    pf = leray_project(_random_field(dom, rng))
    assert np.max(np.abs(leray_project(pf).values - pf.values)) <= 1e-12 * max(np.max(np.abs(pf.values)), 1e-300)


def test_stokes_strong_form_residual(rng):
    dom = TorusDomain(3, 8.0, 16)
    f = rng.standard_normal((3,) + dom.shape)
    u, p = stokes_solve(dom, f)
    w = dom.waves
    keep = ~(w.nyquist | w.zero)
    fh, uh, ph = (np.fft.rfftn(a, axes=(-3, -2, -1)) for a in (f, u, p))
    lhs = np.stack([w.k2 * uh[j] + 1j * w.k[j] * ph for j in range(3)])
    res = np.abs(np.where(keep, lhs - fh, 0))
    # the residual of the projected forcing is the gradient part only, which p absorbs exactly
    assert np.max(res) <= 1e-10 * np.max(np.abs(fh))
    kdotu = sum(w.k[j] * uh[j] for j in range(3))
    assert np.max(np.abs(kdotu)) <= 1e-10 * np.max(np.abs(uh)) * np.sqrt(np.max(w.k2))


# ---------------------------------------------------------------- fields and export

def test_field_is_immutable(rng):
    dom = TorusDomain(2, 4.0, 8)
    f = _random_field(dom, rng, 1)
    with pytest.raises(ValueError):
        f.values[0, 0, 0] = 1.0


def test_raw_round_trip_x_fastest(tmp_path, rng):
    dom = TorusDomain(2, 4.0, 8)
    vals = rng.standard_normal((2,) + dom.shape)
    f = SpectralField(dom, vals, name="probe")
    raw, hdr = f.to_raw(tmp_path / "f.raw")
    flat = np.fromfile(raw, dtype="<f8")
    # x (first grid axis) varies fastest
    assert flat[1] == vals[0, 1, 0]
    g = SpectralField.from_raw(raw)
    assert np.array_equal(g.values, f.values)
    assert g.domain == dom


def test_dirichlet_energy_of_a_mode():
    dom = TorusDomain(2, 2 * math.pi, 16)
    x = dom.coordinates()
    f = SpectralField(dom, np.sin(x[0])[None])
    # int |cos x|^2 over (2 pi)^2 = 2 pi^2
    assert f.dirichlet_energy() == pytest.approx(2 * math.pi**2, rel=1e-12)


def test_ball_form_factor_limits():
    for d in (1, 2, 3, 4):
        assert ball_form_factor(np.array([0.0]), d)[0] == 1.0
        k = np.array([1e-4, 1e-9])
        assert np.allclose(ball_form_factor(k, d), 1 - k**2 / (2 * (d + 2)), rtol=1e-10)
