"""
Periodic torus geometry, grid fields and spectral operators.

The tank is the cube Q_L = (-L/2, L/2]^d with periodic boundary conditions,
sampled on a uniform grid of ``n_grid`` points per axis.  Grid point ``i``
sits at ``-L/2 + i*h``.  Fields are stored with the component axis first and
spatial axes in (x, y, z, ...) order; transforms are real FFTs over the
spatial axes.

Sign convention: ``f(x) = sum_k fhat(k) exp(+i k.x)``, so a derivative is a
multiplication by ``i k``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.fft as sfft
from scipy.special import gamma, jv

__all__ = [
    "ResolutionError",
    "TorusDomain",
    "WaveGrid",
    "SpectralField",
    "unit_ball_volume",
    "periodic_distance",
    "periodic_displacement",
    "ball_cells",
    "inclusion_indicator",
    "laplace_green",
    "stokes_solve",
    "averaged_stokeslet",
    "ball_average",
    "leray_project",
    "ball_form_factor",
]

FFT_WORKERS = -1


class ResolutionError(ValueError):
    """Grid too coarse to resolve a unit ball."""


def unit_ball_volume(d: int, radius: float = 1.0) -> float:
    return math.pi ** (d / 2) / math.gamma(d / 2 + 1) * radius**d


def _smooth_size(n: int) -> bool:
    for p in (2, 3, 5):
        while n % p == 0 and n > 1:
            n //= p
    return n == 1


@dataclass(frozen=True)
class TorusDomain:
    """Periodic cube of side ``L`` in dimension ``d`` with ``n_grid`` points per axis.

    ``n_grid`` must be even and FFT-friendly (only factors 2, 3, 5) so that
    sweeps can hold the spacing fixed while L varies.
    """

    d: int
    L: float
    n_grid: int = 64

    def __post_init__(self):
        if self.d not in (1, 2, 3, 4):
            raise ValueError(f"dimension must be in 1..4, got {self.d}")
        if not self.L >= 1:
            raise ValueError(f"side length must be >= 1, got {self.L}")
        if self.n_grid < 2 or self.n_grid % 2 or not _smooth_size(self.n_grid):
            raise ValueError(f"n_grid must be even with factors 2, 3, 5 only, got {self.n_grid}")
        object.__setattr__(self, "L", float(self.L))

    @classmethod
    def with_spacing(cls, d: int, L: float, h: float) -> "TorusDomain":
        """Smallest admissible grid with spacing at most ``h``."""
        n = max(2, math.ceil(L / h - 1e-9))
        while n % 2 or not _smooth_size(n):
            n += 1
        return cls(d, L, n)

    @property
    def h(self) -> float:
        return self.L / self.n_grid

    @property
    def shape(self) -> tuple:
        return (self.n_grid,) * self.d

    @property
    def volume(self) -> float:
        return self.L**self.d

    @property
    def cell_volume(self) -> float:
        return self.h**self.d

    def axis(self) -> np.ndarray:
        return -self.L / 2 + self.h * np.arange(self.n_grid)

    def coordinates(self) -> np.ndarray:
        """Grid point coordinates, shape ``(d, n, ..., n)``."""
        ax = self.axis()
        return np.stack(np.meshgrid(*([ax] * self.d), indexing="ij"))

    def check_resolution(self, h_max: float = 0.25):
        if self.h > h_max + 1e-12:
            raise ResolutionError(
                f"grid spacing {self.h:.4g} exceeds {h_max} (need >= 8 points per particle diameter)"
            )

    def wrap(self, x) -> np.ndarray:
        """Canonical representative in (-L/2, L/2]."""
        x = np.asarray(x, dtype=float)
        y = x - self.L * np.floor(x / self.L + 0.5)
        # floor maps L/2 to -L/2; move it to the closed end
        return np.where(y <= -self.L / 2, y + self.L, y)

    def nearest_index(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return np.mod(np.rint((x + self.L / 2) / self.h).astype(np.int64), self.n_grid)

    def to_dict(self) -> dict:
        return {"d": self.d, "L": self.L, "n_grid": self.n_grid}

    @cached_property
    def waves(self) -> "WaveGrid":
        return WaveGrid(self)


class WaveGrid:
    """Dual-lattice wavevectors on the real-FFT half grid.

    ``k`` holds the physical wavevectors (2*pi/L times integers); ``k_odd``
    is the same with Nyquist components zeroed, which is what odd
    derivatives use.  ``nyquist`` marks modes having any Nyquist component.
    """

    def __init__(self, domain: TorusDomain):
        n, L, d = domain.n_grid, domain.L, domain.d
        full = 2 * np.pi / L * sfft.fftfreq(n, 1.0 / n)
        half = 2 * np.pi / L * sfft.rfftfreq(n, 1.0 / n)
        axes = [full] * (d - 1) + [half]
        self.k = [np.reshape(a, [-1 if i == j else 1 for j in range(d)]) for i, a in enumerate(axes)]
        nyq_full = np.arange(n) == n // 2
        nyq_half = np.arange(n // 2 + 1) == n // 2
        nyq_axes = [nyq_full] * (d - 1) + [nyq_half]
        self.nyquist_axis = [np.reshape(a, [-1 if i == j else 1 for j in range(d)]) for i, a in enumerate(nyq_axes)]
        self.k_odd = [np.where(m, 0.0, k) for k, m in zip(self.k, self.nyquist_axis)]
        self.spectral_shape = tuple([n] * (d - 1) + [n // 2 + 1])
        self.k2 = sum(k**2 for k in self.k)
        self.nyquist = np.zeros(self.spectral_shape, dtype=bool)
        for m in self.nyquist_axis:
            self.nyquist = self.nyquist | m
        self.zero = np.zeros(self.spectral_shape, dtype=bool)
        self.zero[(0,) * d] = True
        # multiplicity of each rfft mode in the full spectrum (Parseval weights)
        w = np.full(n // 2 + 1, 2.0)
        w[0] = 1.0
        if n % 2 == 0:
            w[-1] = 1.0
        self.weight = np.broadcast_to(np.reshape(w, [1] * (d - 1) + [-1]), self.spectral_shape)
        with np.errstate(divide="ignore"):
            self.inv_k2 = np.where(self.zero, 0.0, 1.0 / np.where(self.zero, 1.0, self.k2))
        self.domain = domain

    @property
    def magnitude(self) -> np.ndarray:
        return np.sqrt(self.k2)


def rfft(values: np.ndarray, d: int) -> np.ndarray:
    return sfft.rfftn(values, axes=tuple(range(-d, 0)), workers=FFT_WORKERS)


def irfft(coeffs: np.ndarray, domain: TorusDomain) -> np.ndarray:
    return sfft.irfftn(coeffs, s=domain.shape, axes=tuple(range(-domain.d, 0)), workers=FFT_WORKERS)


@dataclass(frozen=True, eq=False)
class SpectralField:
    """Immutable scalar or vector field on the torus grid.

    ``values`` has shape ``(components, n, ..., n)``.  Fourier coefficients
    (unnormalised real FFT) are computed lazily and cached.
    """

    domain: TorusDomain
    values: np.ndarray
    divergence_free: bool = False
    mean_zero: bool = False
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape == self.domain.shape:
            v = v[None]
        if v.shape[1:] != self.domain.shape:
            raise ValueError(f"values shape {v.shape} does not match grid {self.domain.shape}")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def components(self) -> int:
        return self.values.shape[0]

    @cached_property
    def fourier(self) -> np.ndarray:
        c = rfft(self.values, self.domain.d)
        c.flags.writeable = False
        return c

    def __add__(self, other: "SpectralField") -> "SpectralField":
        return SpectralField(self.domain, self.values + other.values,
                             self.divergence_free and other.divergence_free,
                             self.mean_zero and other.mean_zero)

    def __sub__(self, other: "SpectralField") -> "SpectralField":
        return self + other.scale(-1.0)

    def scale(self, a: float) -> "SpectralField":
        return SpectralField(self.domain, a * self.values, self.divergence_free, self.mean_zero, self.name)

    def mean(self) -> np.ndarray:
        return self.values.reshape(self.components, -1).mean(axis=1)

    def inner(self, other: "SpectralField") -> float:
        """Grid quadrature of the pointwise dot product over Q_L."""
        return float(np.sum(self.values * other.values) * self.domain.cell_volume)

    def l2_norm(self) -> float:
        return math.sqrt(self.inner(self))

    def rms(self) -> float:
        return float(np.sqrt(np.mean(np.sum(self.values**2, axis=0))))

    def gradient(self) -> np.ndarray:
        """Spectral gradient, shape ``(components, d, n, ..., n)``."""
        w = self.domain.waves
        return np.stack([
            np.stack([irfft(1j * w.k_odd[j] * self.fourier[c], self.domain) for j in range(self.domain.d)])
            for c in range(self.components)
        ])

    def divergence(self) -> np.ndarray:
        if self.components != self.domain.d:
            raise ValueError("divergence needs a vector field")
        w = self.domain.waves
        return irfft(sum(1j * w.k_odd[j] * self.fourier[j] for j in range(self.domain.d)), self.domain)

    def divergence_residual(self) -> float:
        """Largest |k.fhat| relative to the largest |fhat|, over all modes."""
        w = self.domain.waves
        kf = sum(w.k_odd[j] * self.fourier[j] for j in range(self.domain.d))
        scale = np.max(np.abs(self.fourier)) * np.sqrt(np.max(w.k2))
        return float(np.max(np.abs(kf)) / scale) if scale > 0 else 0.0

    def dirichlet_energy(self) -> float:
        """Integral of |grad f|^2 over Q_L, by Parseval (Nyquist modes excluded)."""
        w = self.domain.waves
        n_tot = self.domain.n_grid**self.domain.d
        kk = np.where(w.nyquist, 0.0, w.k2)
        s = np.sum(w.weight * kk * np.sum(np.abs(self.fourier) ** 2, axis=0))
        return float(s * self.domain.volume / n_tot**2)

    def sample(self, points) -> np.ndarray:
        """Nearest-grid-point values at ``points`` (shape ``(m, d)``), shape ``(m, components)``."""
        idx = self.domain.nearest_index(np.atleast_2d(points)).reshape(-1, self.domain.d)
        return self.values[(slice(None),) + tuple(idx.T)].T

    def header(self) -> dict:
        return {
            "domain": self.domain.to_dict(),
            "components": self.components,
            "grid_shape": list(self.domain.shape),
            "axis_order": "x fastest",
            "dtype": "<f8",
            "name": self.name,
            "divergence_free": self.divergence_free,
            "mean_zero": self.mean_zero,
        }

    def to_raw(self, path) -> tuple[Path, Path]:
        """Write ``<path>.raw`` (little-endian float64, x fastest) and ``<path>.json``."""
        path = Path(path)
        raw, hdr = path.with_suffix(".raw"), path.with_suffix(".json")
        axes = (0,) + tuple(range(self.domain.d, 0, -1))
        np.ascontiguousarray(np.transpose(self.values, axes)).astype("<f8").tofile(raw)
        hdr.write_text(json.dumps(self.header(), indent=2))
        return raw, hdr

    @classmethod
    def from_raw(cls, path) -> "SpectralField":
        path = Path(path)
        hdr = json.loads(path.with_suffix(".json").read_text())
        dom = TorusDomain(**hdr["domain"])
        d = dom.d
        flat = np.fromfile(path.with_suffix(".raw"), dtype="<f8")
        arr = flat.reshape((hdr["components"],) + tuple(reversed(hdr["grid_shape"])))
        axes = (0,) + tuple(range(d, 0, -1))
        return cls(dom, np.transpose(arr, axes), hdr.get("divergence_free", False),
                   hdr.get("mean_zero", False), hdr.get("name", ""))


def periodic_displacement(x, y, L: float) -> np.ndarray:
    """Minimum-image displacement ``x - y`` on the flat torus of side ``L``."""
    dx = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    return dx - L * np.rint(dx / L)


def periodic_distance(x, y, domain) -> np.ndarray:
    """Flat-torus distance |x - y|_L; ``domain`` is a TorusDomain or a side length."""
    L = domain.L if isinstance(domain, TorusDomain) else float(domain)
    dx = periodic_displacement(x, y, L)
    if dx.ndim == 0:
        return np.abs(dx)
    return np.sqrt(np.sum(dx**2, axis=-1))


def ball_cells(domain: TorusDomain, center, radius: float = 1.0):
    """Grid cells whose centres lie in the open ball ``B_radius(center)`` (periodic).

    Returns ``(index, offset)``: a tuple of ``d`` integer arrays usable for
    fancy indexing, and the minimum-image offsets ``x_cell - center`` with
    shape ``(m, d)``.
    """
    center = np.asarray(center, dtype=float).reshape(domain.d)
    h, n = domain.h, domain.n_grid
    reach = int(math.ceil(radius / h)) + 1
    base = np.rint((center + domain.L / 2) / h).astype(np.int64)
    span = np.arange(-reach, reach + 1)
    grids = np.meshgrid(*([span] * domain.d), indexing="ij")
    rel = np.stack([g.ravel() for g in grids], axis=1)
    idx = base + rel
    pos = -domain.L / 2 + idx * h
    off = periodic_displacement(pos, center, domain.L)
    inside = np.sum(off**2, axis=1) < radius**2 * (1 - 1e-12)
    idx = np.mod(idx[inside], n)
    # periodic wrap can fold the stencil onto itself on tiny grids
    flat = np.ravel_multi_index(tuple(idx.T), domain.shape)
    _, first = np.unique(flat, return_index=True)
    first.sort()
    return tuple(idx[first].T), off[inside][first]


def inclusion_indicator(domain: TorusDomain, centers, radius: float = 1.0) -> np.ndarray:
    """Cell-centre indicator of the union of balls, shape ``domain.shape``."""
    chi = np.zeros(domain.shape)
    for c in np.atleast_2d(centers).reshape(-1, domain.d):
        idx, _ = ball_cells(domain, c, radius)
        chi[idx] = 1.0
    return chi


def _stokes_multiplier(domain: TorusDomain):
    w = domain.waves
    keep = ~(w.nyquist | w.zero)
    inv = np.where(keep, w.inv_k2, 0.0)
    return w, keep, inv


def stokes_solve(domain: TorusDomain, force: np.ndarray, pressure: bool = True):
    """Mean-zero solution of -Lap(u) + grad(p) = force, div u = 0 on the torus.

    ``force`` has shape ``(d, n, ..., n)``.  The zero mode and Nyquist modes
    of the velocity are dropped.  Returns ``(u, p)`` as arrays (``p`` is
    ``None`` when not requested); ``p`` has zero grid mean.
    """
    d = domain.d
    w, keep, inv = _stokes_multiplier(domain)
    g = rfft(force, d)
    kg = sum(w.k[j] * g[j] for j in range(d))
    u_hat = np.empty_like(g)
    for j in range(d):
        u_hat[j] = (g[j] - w.k[j] * kg * inv) * inv
    u = irfft(u_hat, domain)
    p = None
    if pressure:
        p = irfft(np.where(keep, -1j * kg * inv, 0.0), domain)
    return u, p


def laplace_green(domain: TorusDomain, shift=None) -> SpectralField:
    """Periodic Green's function of -Lap with unit point source at ``shift``.

    The source is the indicator of the grid cell nearest ``shift``
    normalised to unit mass; the result has zero mean.
    """
    domain.check_resolution()
    shift = np.zeros(domain.d) if shift is None else np.asarray(shift, dtype=float)
    src = np.zeros(domain.shape)
    src[tuple(domain.nearest_index(shift))] = 1.0 / domain.cell_volume
    g_hat = rfft(src, domain.d) * domain.waves.inv_k2
    return SpectralField(domain, irfft(g_hat, domain), mean_zero=True, name="G_L")


def averaged_stokeslet(domain: TorusDomain, e, center=None):
    """Periodic Stokeslet forced by the unit-ball indicator: -Lap U + grad P = (1_B - |B|/L^d) e.

    Returns ``(U, P)`` as SpectralFields.
    """
    if domain.d not in (2, 3):
        raise ValueError("vector Stokes solves need d in {2, 3}")
    domain.check_resolution()
    e = np.asarray(e, dtype=float).reshape(domain.d)
    center = np.zeros(domain.d) if center is None else center
    chi = inclusion_indicator(domain, center)
    force = chi[None] * e.reshape((-1,) + (1,) * domain.d)
    u, p = stokes_solve(domain, force)
    return (SpectralField(domain, u, divergence_free=True, mean_zero=True, name="U_L"),
            SpectralField(domain, p, mean_zero=True, name="P_L"))


def ball_average(field: SpectralField, center, radius: float = 1.0) -> np.ndarray:
    """Mean of ``field`` over the grid cells inside ``B_radius(center)``."""
    idx, _ = ball_cells(field.domain, center, radius)
    if idx[0].size < 8:
        raise ResolutionError(f"ball sampled by only {idx[0].size} grid cells")
    vals = field.values[(slice(None),) + idx]
    return vals.mean(axis=1)


def leray_project(f: SpectralField) -> SpectralField:
    """Project a vector field onto divergence-free fields, mode by mode.

    Uses the odd-derivative wavevector (Nyquist components zeroed), so that
    gradients computed with the same convention are annihilated exactly.
    The mean is left untouched.
    """
    dom = f.domain
    if f.components != dom.d:
        raise ValueError("leray_project needs a vector field")
    w = dom.waves
    ko = w.k_odd
    k2 = sum(k**2 for k in ko)
    inv = np.where(k2 > 0, 1.0 / np.where(k2 > 0, k2, 1.0), 0.0)
    c = f.fourier
    kc = sum(ko[j] * c[j] for j in range(dom.d))
    out = np.stack([c[j] - ko[j] * kc * inv for j in range(dom.d)])
    return SpectralField(dom, irfft(out, dom), divergence_free=True, mean_zero=f.mean_zero)


def ball_form_factor(kmag, d: int) -> np.ndarray:
    """Fourier transform of the normalised unit-ball indicator ``1_B/|B|`` at |k|."""
    kmag = np.asarray(kmag, dtype=float)
    nu = d / 2
    out = np.ones_like(kmag)
    nz = kmag > 1e-8
    kk = kmag[nz]
    out[nz] = gamma(nu + 1) * (2 / kk) ** nu * jv(nu, kk)
    small = (~nz) & (kmag > 0)
    out[small] = 1 - kmag[small] ** 2 / (2 * (d + 2))
    return out
