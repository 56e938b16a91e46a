"""
Second-order statistics of stationary point ensembles on the torus.

Estimators take a sequence of :class:`ParticleConfiguration` realizations of
one ensemble on a common torus.  Error bars come from the leave-one-out
jackknife over realizations unless stated otherwise.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import integrate
from scipy.spatial import cKDTree

from .point_process import ParticleConfiguration, rng_stream
from .torus import periodic_displacement, unit_ball_volume

__all__ = [
    "Estimate",
    "PairCorrelationEstimate",
    "StructureFactorEstimate",
    "PowerLawFit",
    "LogLawFit",
    "FunctionalVariance",
    "torus_ball_volume",
    "estimate_pair_correlation",
    "estimate_structure_factor",
    "structure_factor_from_pair_correlation",
    "hyperuniformity_metric",
    "number_variance_curve",
    "linear_functional_variance",
    "efron_stein_bound",
    "fit_power_law",
    "fit_log_law",
    "jackknife",
]


# ---------------------------------------------------------------- helpers

def jackknife(values: np.ndarray, statistic: Callable[[np.ndarray], float]) -> tuple[float, float]:
    """Statistic on all rows of ``values`` and its leave-one-out jackknife standard error."""
    values = np.asarray(values)
    m = len(values)
    full = statistic(values)
    if m < 2:
        return full, math.nan
    loo = np.array([statistic(np.delete(values, i, axis=0)) for i in range(m)])
    se = np.sqrt((m - 1) / m * np.sum((loo - loo.mean(axis=0)) ** 2, axis=0))
    return full, se


def _check_ensemble(configs: Sequence[ParticleConfiguration], min_count: int = 1):
    configs = list(configs)
    if len(configs) < min_count:
        raise ValueError(f"need at least {min_count} realizations, got {len(configs)}")
    d, L = configs[0].d, configs[0].L
    if any(c.d != d or c.L != L for c in configs):
        raise ValueError("all realizations must live on the same torus")
    return configs, d, L


def torus_ball_volume(r: float, d: int, L: float) -> float:
    """Volume of ``B_r(0)`` intersected with the cube (-L/2, L/2]^d.

    This is the measure of points whose minimum-image norm is below ``r``.
    """
    a = L / 2
    r = float(r)
    if r <= 0:
        return 0.0
    if r >= a * math.sqrt(d):
        return L**d
    if r <= a:
        return unit_ball_volume(d, r)
    if d == 1:
        return L
    if d == 2:
        if r >= a * math.sqrt(2):
            return L * L
        cap = r * r * math.acos(a / r) - a * math.sqrt(r * r - a * a)
        return math.pi * r * r - 4 * cap
    t_max = min(r, a)
    val, _ = integrate.quad(lambda t: torus_ball_volume(math.sqrt(max(r * r - t * t, 0.0)), d - 1, L),
                            -t_max, t_max, epsabs=1e-11, epsrel=1e-11, limit=200,
                            points=[p for p in (-math.sqrt(max(r * r - 2 * a * a, 0)), -math.sqrt(max(r * r - a * a, 0)),
                                                math.sqrt(max(r * r - a * a, 0)), math.sqrt(max(r * r - 2 * a * a, 0)))
                                    if -t_max < p < t_max] or None)
    return val


def _pair_distances(config: ParticleConfiguration, r_max: float) -> np.ndarray:
    """Minimum-image distances of unordered pairs closer than ``r_max``."""
    pts, L, n = config.centers, config.L, config.n_particles
    if n < 2:
        return np.empty(0)
    if n <= 2000:
        iu, ju = np.triu_indices(n, 1)
        dist = np.sqrt(np.sum(periodic_displacement(pts[iu], pts[ju], L) ** 2, axis=1))
        return dist[dist < r_max]
    box = np.mod(pts + L / 2, L)
    box = np.where(box >= L, 0.0, box)
    tree = cKDTree(box, boxsize=L)
    pairs = tree.query_pairs(r_max * (1 + 1e-12), output_type="ndarray")
    dist = np.sqrt(np.sum(periodic_displacement(pts[pairs[:, 0]], pts[pairs[:, 1]], L) ** 2, axis=1))
    return dist[dist < r_max]


# ---------------------------------------------------------------- estimates

@dataclass
class Estimate:
    """Tabulated estimate with one-sigma error bars."""

    abscissa: np.ndarray
    value: np.ndarray
    stderr: np.ndarray
    n_samples: int
    meta: dict = field(default_factory=dict)

    abscissa_name = "x"
    value_name = "value"

    def to_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([self.abscissa_name, self.value_name, "stderr", "n_samples"])
            for x, v, s in zip(self.abscissa, self.value, self.stderr):
                w.writerow([repr(float(x)), repr(float(v)), repr(float(s)), self.n_samples])
        side = {"type": type(self).__name__, "n_samples": self.n_samples, "meta": self.meta}
        path.with_suffix(".json").write_text(json.dumps(side, indent=2, default=float))
        return path


@dataclass
class PairCorrelationEstimate(Estimate):
    """Total correlation ``g2 = f2 - 1`` on radial shells (``abscissa`` = shell midpoints)."""

    edges: np.ndarray = None
    shell_volumes: np.ndarray = None
    density: float = math.nan
    abscissa_name = "r"
    value_name = "g2"

    def integral(self) -> float:
        """Integral of g2 over the torus from the binned estimate."""
        return float(np.sum(self.value * self.shell_volumes))


@dataclass
class StructureFactorEstimate(Estimate):
    """Radially binned structure factor (``abscissa`` = mean |k| of the modes in each bin)."""

    mode_count: np.ndarray = None
    abscissa_name = "k"
    value_name = "S"


def estimate_pair_correlation(configs: Sequence[ParticleConfiguration], edges=None, r_max: float | None = None,
                              n_bins: int = 40) -> PairCorrelationEstimate:
    """Radial total correlation from ordered pair counts.

    ``g2`` in a shell is the ordered pair count divided by
    ``rho^2 L^d |shell|`` minus one, with ``rho`` the ensemble-mean density
    and ``|shell|`` the exact volume of the shell within the periodic cell.
    """
    configs, d, L = _check_ensemble(configs)
    if edges is None:
        r_max = L / 2 if r_max is None else r_max
        edges = np.linspace(0.0, r_max, n_bins + 1)
    edges = np.asarray(edges, dtype=float)
    cum = np.array([torus_ball_volume(r, d, L) for r in edges])
    shell = np.diff(cum)
    counts = np.array([2 * np.histogram(_pair_distances(c, edges[-1]), bins=edges)[0] for c in configs], float)
    n = np.array([c.n_particles for c in configs], float)
    vol = L**d
    data = np.column_stack([n, counts])

    def stat(rows):
        rho = rows[:, 0].mean() / vol
        with np.errstate(divide="ignore", invalid="ignore"):
            return rows[:, 1:].mean(axis=0) / (rho**2 * vol * shell) - 1.0

    g2, se = jackknife(data, stat)
    return PairCorrelationEstimate(0.5 * (edges[1:] + edges[:-1]), g2, se, len(configs),
                                   {"d": d, "L": L}, edges=edges, shell_volumes=shell,
                                   density=float(n.mean() / vol))


def _half_space_modes(d: int, L: float, k_max: float) -> np.ndarray:
    m_max = int(math.floor(k_max * L / (2 * math.pi) + 1e-9))
    rng = np.arange(-m_max, m_max + 1)
    m = np.stack(np.meshgrid(*([rng] * d), indexing="ij"), -1).reshape(-1, d)
    sq = np.sum(m**2, axis=1)
    m = m[(sq > 0) & (sq * (2 * math.pi / L) ** 2 <= k_max**2 * (1 + 1e-12))]
    # keep one of each +-m pair: first nonzero component positive
    first = m[np.arange(len(m)), np.argmax(m != 0, axis=1)]
    return m[first > 0]


def _mode_sums(config: ParticleConfiguration, modes: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """``sum_n exp(-i k.x_n)`` for each integer dual-lattice index row of ``modes``.

    Plane waves factor over the axes, so the sums on the full index box are
    one complex matrix product of per-axis phase tables (exact, no
    interpolation).  Very large boxes fall back to direct chunked sums.
    """
    modes = np.asarray(modes, dtype=int)
    x = config.centers
    d, L = config.d, config.L
    if len(modes) == 0:
        return np.zeros(0, dtype=complex)
    m_max = int(np.max(np.abs(modes)))
    width = 2 * m_max + 1
    if width**d <= 20_000_000 and d >= 2:
        ax = np.arange(-m_max, m_max + 1)
        tables = [np.exp(-2j * math.pi / L * np.outer(x[:, j], ax)) for j in range(d)]
        split = (d + 1) // 2

        def outer(ts):
            out = ts[0]
            for t in ts[1:]:
                out = (out[:, :, None] * t[:, None, :]).reshape(len(x), -1)
            return out

        full = (outer(tables[:split]).T @ outer(tables[split:])).reshape((width,) * d)
        return full[tuple((modes + m_max).T)]
    kvecs = 2 * math.pi / L * modes
    out = np.empty(len(kvecs), dtype=complex)
    for s in range(0, len(kvecs), chunk):
        ph = x @ kvecs[s:s + chunk].T
        out[s:s + chunk] = np.sum(np.cos(ph), axis=0) - 1j * np.sum(np.sin(ph), axis=0)
    return out


def _mode_power(config: ParticleConfiguration, modes: np.ndarray) -> np.ndarray:
    """``|sum_n exp(-i k.x_n)|^2`` for each integer index row of ``modes``."""
    v = _mode_sums(config, modes)
    return v.real**2 + v.imag**2


def estimate_structure_factor(configs: Sequence[ParticleConfiguration], k_max: float,
                              bin_width: float | None = None) -> StructureFactorEstimate:
    """Structure factor ``S(k) = E|sum_n exp(-i k.x_n)|^2 / N`` by direct summation.

    Modes of the dual lattice with ``0 < |k| <= k_max`` are grouped by their
    exact squared index norm; with ``bin_width`` set, groups are merged into
    radial bins of that width.  Realizations with no particle are skipped.
    """
    configs, d, L = _check_ensemble(configs)
    m = _half_space_modes(d, L, k_max)
    if len(m) == 0:
        raise ValueError("k_max below the smallest nonzero wavenumber 2 pi / L")
    kvecs = 2 * math.pi / L * m
    kmag = np.sqrt(np.sum(kvecs**2, axis=1))
    sq = np.sum(m**2, axis=1)
    if bin_width is None:
        keys, label = np.unique(sq, return_inverse=True)
    else:
        label = np.floor((kmag - kmag.min()) / bin_width + 1e-9).astype(int)
        keys, label = np.unique(label, return_inverse=True)
    nb = len(keys)
    per = []
    for c in configs:
        if c.n_particles == 0:
            continue
        p = _mode_power(c, m) / c.n_particles
        per.append(np.bincount(label, weights=p, minlength=nb))
    if not per:
        raise ValueError("every realization is empty")
    per = np.array(per)
    counts = np.bincount(label, minlength=nb)
    s = per.mean(axis=0) / counts
    se = per.std(axis=0, ddof=1) / counts / math.sqrt(len(per)) if len(per) > 1 else np.full(nb, math.nan)
    kbin = np.bincount(label, weights=kmag, minlength=nb) / counts
    return StructureFactorEstimate(kbin, s, se, len(per), {"d": d, "L": L, "k_max": k_max},
                                   mode_count=counts)


def structure_factor_from_pair_correlation(g2: PairCorrelationEstimate, k: float) -> float:
    """``1 + rho * integral g2(r) exp(-i k.x) dx`` using the radial profile.

    The angular integral is done analytically for shells inside the
    inscribed ball (``r <= L/2``); ``g2`` should vanish beyond that.
    """
    d = g2.meta["d"]
    from scipy.special import gamma, jv

    nu = d / 2 - 1
    r = g2.abscissa

    def radial(rr):
        kr = k * rr
        return (2 * math.pi) ** (d / 2) * rr ** (d - 1) * np.where(kr > 0, jv(nu, kr) / np.maximum(kr, 1e-300) ** nu,
                                                                    1 / (2**nu * gamma(nu + 1)))

    total = 0.0
    for lo, hi, val in zip(g2.edges[:-1], g2.edges[1:], g2.value):
        if hi > g2.meta["L"] / 2 + 1e-12:
            break
        seg, _ = integrate.quad(radial, lo, hi)
        total += val * seg
    return 1.0 + g2.density * total


def hyperuniformity_metric(configs: Sequence[ParticleConfiguration]) -> tuple[float, float]:
    """``L^2 Var[N] / (rho^2 L^d)`` with jackknife standard error (needs >= 20 realizations)."""
    configs, d, L = _check_ensemble(configs, 20)
    n = np.array([c.n_particles for c in configs], float)
    vol = L**d

    def stat(x):
        rho = x.mean() / vol
        if rho == 0:
            return 0.0
        return L**2 * x.var(ddof=1) / (rho**2 * vol)

    return jackknife(n, stat)


def number_variance_curve(configs: Sequence[ParticleConfiguration], radii, n_windows: int = 64,
                          seed: int = 0) -> Estimate:
    """Variance of the particle count in balls ``B_R(y)``.

    ``n_windows`` centres ``y`` are drawn uniformly once and shared by all
    realizations; the ensemble variance (unbiased) of the count in each
    window is averaged over the windows.  The error is a jackknife over
    realizations.  Radii must not exceed ``L/4``.
    """
    configs, d, L = _check_ensemble(configs, 20)
    radii = np.asarray(radii, dtype=float)
    if np.any(radii > L / 4 + 1e-12) or np.any(radii <= 0):
        raise ValueError("window radii must lie in (0, L/4]")
    y = rng_stream(seed, 0, "windows").uniform(-L / 2, L / 2, size=(n_windows, d))
    rows = []
    for c in configs:
        if c.n_particles == 0:
            rows.append(np.zeros((n_windows, len(radii))))
            continue
        dist2 = np.sum(periodic_displacement(c.centers[None, :, :], y[:, None, :], L) ** 2, axis=2)
        rows.append(np.stack([np.sum(dist2 < r * r, axis=1) for r in radii], axis=1))
    counts = np.stack(rows).astype(float)  # (M, W, R)

    def stat(block):
        return block.var(axis=0, ddof=1).mean(axis=0)

    var, se = jackknife(counts, stat)
    return Estimate(radii, np.atleast_1d(var), np.atleast_1d(se), len(configs),
                    {"d": d, "L": L, "n_windows": n_windows})


# ---------------------------------------------------------------- linear functionals

@dataclass
class FunctionalVariance:
    variance: float
    stderr: float
    mixing_bound: float
    hyperuniform_bound: float | None
    n_samples: int


def _grid_points(d, L, n):
    ax = -L / 2 + (np.arange(n) + 0.5) * L / n
    return np.stack(np.meshgrid(*([ax] * d), indexing="ij"), -1).reshape(-1, d), (L / n) ** d


def linear_functional_variance(configs: Sequence[ParticleConfiguration], zeta: Callable[[np.ndarray], np.ndarray],
                               grad_zeta: Callable[[np.ndarray], np.ndarray] | None = None,
                               hyperuniform: bool = True, n_quad: int | None = None) -> FunctionalVariance:
    """Variance of ``Y = sum_n zeta(x_n)`` and the two reference bounds.

    Parameters
    ----------
    zeta : callable
        Periodic test function, vectorized over rows of an ``(m, d)`` array.
    grad_zeta : callable, optional
        Its gradient, returning ``(m, d)``; a spectral derivative of the
        grid samples is used when omitted.
    hyperuniform : bool
        Also compute ``rho^2 int |grad zeta|^2``.  Only meaningful for
        mean-zero ``zeta``; a nonzero mean raises ValueError.

    Returns
    -------
    FunctionalVariance
        Sample variance (unbiased) with jackknife error, the mixing bound
        ``rho^2 int |zeta|^2`` and the hyperuniform bound.
    """
    configs, d, L = _check_ensemble(configs, 2)
    n_quad = n_quad or {1: 4096, 2: 256, 3: 64, 4: 24}[d]
    pts, dv = _grid_points(d, L, n_quad)
    z = np.asarray(zeta(pts), float)
    int_z = float(np.sum(z) * dv)
    int_z2 = float(np.sum(z**2) * dv)
    vol = L**d
    y = np.array([np.sum(zeta(c.centers)) if c.n_particles else 0.0 for c in configs], float)
    n = np.array([c.n_particles for c in configs], float)
    rho = n.mean() / vol
    var, se = jackknife(y, lambda v: v.var(ddof=1))
    hyp = None
    if hyperuniform:
        scale = math.sqrt(int_z2 * vol) if int_z2 > 0 else 1.0
        if abs(int_z) > 1e-8 * scale:
            raise ValueError("the hyperuniform bound needs a mean-zero test function")
        if grad_zeta is not None:
            g2 = np.sum(np.asarray(grad_zeta(pts), float) ** 2) * dv
        else:
            zz = z.reshape((n_quad,) * d)
            zh = np.fft.fftn(zz)
            freqs = 2 * np.pi * np.fft.fftfreq(n_quad, L / n_quad)
            k2 = sum(np.reshape(freqs, [-1 if i == j else 1 for j in range(d)]) ** 2 for i in range(d))
            g2 = float(np.sum(k2 * np.abs(zh) ** 2) / n_quad**d * dv)
        hyp = rho**2 * float(g2)
    return FunctionalVariance(float(var), float(se), rho**2 * int_z2, hyp, len(configs))


def efron_stein_bound(configs: Sequence[ParticleConfiguration], zeta: Callable[[np.ndarray], np.ndarray],
                      n_probe: int = 64, seed: int = 0) -> float:
    """Efron-Stein upper bound for ``Var[sum_n zeta(x_n)]`` on a perturbed lattice.

    Each particle is an independent displacement of its lattice site inside
    ``B_{u_max}(site)``; replacing one displacement changes ``Y`` by at most
    the oscillation of ``zeta`` over that ball.  The bound is
    ``1/2 E sum_z osc_z^2`` with the oscillation estimated from
    ``n_probe`` probe points in each ball (plus the site and the particle).
    """
    configs, d, L = _check_ensemble(configs, 1)
    total = []
    for i, c in enumerate(configs):
        meta = c.meta
        if meta.get("kind") != "perturbed_lattice":
            raise ValueError("Efron-Stein bound is defined for perturbed lattices")
        a, u, shift = meta["spacing"], meta["u_max"], np.asarray(meta["shift"])
        base = shift - L / 2
        sites = base + a * np.rint((c.centers - base) / a)
        rng = rng_stream(seed, i, "efron-stein")
        g = rng.standard_normal((n_probe, d))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        probe = np.vstack([np.zeros((1, d)), g * u * rng.uniform(size=(n_probe, 1)) ** (1 / d), g * u])
        vals = np.stack([zeta(sites + p) for p in probe] + [zeta(c.centers)])
        osc = vals.max(axis=0) - vals.min(axis=0)
        total.append(0.5 * np.sum(osc**2))
    return float(np.mean(total))


# ---------------------------------------------------------------- fits

@dataclass
class PowerLawFit:
    exponent: float
    stderr: float
    r2: float
    prefactor: float

    def __iter__(self):
        return iter((self.exponent, self.stderr, self.r2))

    def evaluate(self, x):
        return self.prefactor * np.asarray(x, float) ** self.exponent


@dataclass
class LogLawFit:
    slope: float
    intercept: float
    slope_stderr: float
    r2: float

    def evaluate(self, x):
        return self.intercept + self.slope * np.log(np.asarray(x, float))


def _weighted_line(u, v, w):
    """Weighted least squares v = a + b u.  Returns a, b, se_b, r2."""
    W = w.sum()
    ub, vb = np.sum(w * u) / W, np.sum(w * v) / W
    suu = np.sum(w * (u - ub) ** 2)
    b = np.sum(w * (u - ub) * (v - vb)) / suu
    a = vb - b * ub
    res = v - a - b * u
    ss_res = np.sum(w * res**2)
    ss_tot = np.sum(w * (v - vb) ** 2)
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    dof = len(u) - 2
    se = math.sqrt(ss_res / dof / suu) if dof > 0 else math.nan
    return a, b, se, r2


def _usable_errors(y_errors, n):
    """Error bars as an array, or None (unweighted) unless all are finite and positive."""
    if y_errors is None:
        return None
    err = np.asarray(y_errors, float).reshape(-1)
    if len(err) != n:
        raise ValueError("y_errors must match ys in length")
    if not np.all(np.isfinite(err)) or np.any(err <= 0):
        return None
    return err


def fit_power_law(xs, ys, y_errors=None) -> PowerLawFit:
    """Weighted fit of ``log y = log c + p log x``.

    Weights are ``(y / sigma_y)^2`` when errors are given and all positive;
    otherwise the fit is unweighted.  The exponent's
    standard error comes from the residual scatter, so it stays meaningful
    when error bars are mis-scaled.
    """
    x = np.asarray(xs, float)
    y = np.asarray(ys, float)
    if len(x) < 2 or np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("power-law fit needs >= 2 points with positive x and y")
    err = _usable_errors(y_errors, len(y))
    w = np.ones_like(y) if err is None else (y / err) ** 2
    a, b, se, r2 = _weighted_line(np.log(x), np.log(y), w)
    return PowerLawFit(float(b), float(se), float(r2), float(math.exp(a)))


def fit_log_law(xs, ys, y_errors=None) -> LogLawFit:
    """Weighted fit of ``y = a + b log x`` (the marginal-dimension law)."""
    x = np.asarray(xs, float)
    y = np.asarray(ys, float)
    if len(x) < 2 or np.any(x <= 0):
        raise ValueError("log-law fit needs >= 2 points with positive x")
    err = _usable_errors(y_errors, len(y))
    w = np.ones_like(y) if err is None else 1.0 / err**2
    a, b, se, r2 = _weighted_line(np.log(x), y, w)
    return LogLawFit(float(b), float(a), float(se), float(r2))
