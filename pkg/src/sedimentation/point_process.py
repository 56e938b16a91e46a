"""
Stationary hard-core point processes on the flat torus.

All samplers return a :class:`ParticleConfiguration` of unit-radius particle
centres.  Randomness is drawn from counter-based Philox streams keyed by
(master seed, realization index, stage tag), so realization ``i`` of an
ensemble is reproducible regardless of scheduling order.
"""

from __future__ import annotations

import csv
import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .torus import periodic_displacement, unit_ball_volume

__all__ = [
    "SamplingError",
    "HardcoreViolation",
    "ParticleConfiguration",
    "EnsembleSpec",
    "rng_stream",
    "sample_poisson",
    "sample_matern_hardcore",
    "matern_retained_intensity",
    "matern_parent_intensity",
    "sample_rsa",
    "sample_perturbed_lattice",
    "resample_in_ball",
    "min_pairwise_distance",
    "uniform_in_ball",
]

KINDS = ("poisson", "matern_hardcore", "rsa", "perturbed_lattice")
RSA_JAMMING_GUARD = {1: 0.5, 2: 0.35, 3: 0.25, 4: 0.15}


class SamplingError(RuntimeError):
    """A sampler could not produce an admissible configuration."""


class HardcoreViolation(ValueError):
    """Two particles are closer than 2(1 + delta)."""


def rng_stream(seed: int, index: int = 0, stage: str = "sample", extra: int = 0) -> np.random.Generator:
    """Independent generator for (master seed, realization index, stage tag)."""
    tag = zlib.crc32(stage.encode())
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(index), tag, int(extra)])
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True, eq=False)
class ParticleConfiguration:
    """Unit-radius particle centres on the torus of side ``L``.

    Parameters
    ----------
    d, L : int, float
        Dimension and side length.
    centers : ndarray, shape (N, d)
        Centres, wrapped into (-L/2, L/2].
    delta : float
        Hard-core margin: centres are at least ``2(1 + delta)`` apart.
        Negative for processes without a hard core (Poisson), which are
        not checked.
    """

    d: int
    L: float
    centers: np.ndarray
    delta: float = 0.0
    radius: float = 1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        c = np.array(self.centers, dtype=float).reshape(-1, self.d)
        c = c - self.L * np.floor(c / self.L + 0.5)
        c[c <= -self.L / 2] += self.L
        c.flags.writeable = False
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "L", float(self.L))
        if self.volume_fraction >= 0.5:
            raise ValueError(f"volume fraction {self.volume_fraction:.3f} must stay below 1/2")

    @property
    def n_particles(self) -> int:
        return self.centers.shape[0]

    @property
    def density(self) -> float:
        return self.n_particles / self.L**self.d

    @property
    def volume_fraction(self) -> float:
        return self.n_particles * unit_ball_volume(self.d, self.radius) / self.L**self.d

    @property
    def backflow(self) -> float:
        """alpha = lambda / (1 - lambda)."""
        lam = self.volume_fraction
        return lam / (1 - lam)

    def check_hardcore(self):
        if self.n_particles >= 2 and self.delta >= 0:
            m = min_pairwise_distance(self)
            if m < 2 * (1 + self.delta) * (1 - 1e-12):
                raise HardcoreViolation(f"minimal distance {m:.6g} < 2(1+delta) = {2 * (1 + self.delta):.6g}")

    def require_hardcore(self):
        """Reject configurations a fluid solver cannot host.

        Processes without a hard core (``delta < 0``, e.g. Poisson) are for
        statistics only; hard-core configurations are checked for overlap.
        """
        if self.delta < 0:
            raise ValueError("configuration has no hard core (statistics-only process); fluid solvers need delta >= 0")
        self.check_hardcore()

    def with_centers(self, centers) -> "ParticleConfiguration":
        return ParticleConfiguration(self.d, self.L, centers, self.delta, self.radius, dict(self.meta))

    def to_dict(self) -> dict:
        return {"d": self.d, "L": self.L, "delta": self.delta, "radius": self.radius,
                "centers": self.centers.tolist(), "meta": self.meta}

    @classmethod
    def from_dict(cls, data: dict) -> "ParticleConfiguration":
        centers = np.asarray(data["centers"], dtype=float).reshape(-1, data["d"])
        return cls(data["d"], data["L"], centers, data.get("delta", 0.0), data.get("radius", 1.0),
                   data.get("meta", {}))

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def from_json(cls, path) -> "ParticleConfiguration":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index"] + [f"x{j + 1}" for j in range(self.d)])
            for i, c in enumerate(self.centers):
                w.writerow([i] + [repr(float(v)) for v in c])


def _uniform_box(rng, n, d, L):
    return rng.uniform(-L / 2, L / 2, size=(n, d))


def uniform_in_ball(rng, n: int, d: int, radius: float = 1.0) -> np.ndarray:
    """``n`` points uniformly distributed in the ball of given radius."""
    g = rng.standard_normal((n, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    r = radius * rng.uniform(size=(n, 1)) ** (1.0 / d)
    return g * r


def sample_poisson(d: int, L: float, rho: float, seed: int = 0, index: int = 0) -> ParticleConfiguration:
    """Homogeneous Poisson process of intensity ``rho`` (no hard core)."""
    rng = rng_stream(seed, index, "poisson")
    n = rng.poisson(rho * L**d)
    return ParticleConfiguration(d, L, _uniform_box(rng, n, d, L), delta=-1.0,
                                 meta={"kind": "poisson", "rho": rho, "seed": seed, "index": index})


def _hardcore_diameter(delta: float) -> float:
    return 2 * (1 + delta)


def matern_retained_intensity(rho_parent: float, d: int, delta: float) -> float:
    """Intensity of a type-II Matern thinning: (1 - exp(-rho_p V)) / V."""
    v = unit_ball_volume(d, _hardcore_diameter(delta))
    return (1 - math.exp(-rho_parent * v)) / v


def matern_parent_intensity(rho_target: float, d: int, delta: float) -> float:
    """Parent intensity whose type-II Matern thinning has intensity ``rho_target``."""
    v = unit_ball_volume(d, _hardcore_diameter(delta))
    if not 0 < rho_target * v < 1:
        raise ValueError(f"intensity {rho_target} unreachable by Matern thinning (max {1 / v:.4g})")
    return -math.log1p(-rho_target * v) / v


def sample_matern_hardcore(d: int, L: float, rho_parent: float, delta: float, seed: int = 0,
                           index: int = 0) -> ParticleConfiguration:
    """Type-II Matern hard-core process.

    Parents form a Poisson process; each carries a uniform mark and survives
    iff no other parent within ``2(1 + delta)`` has a smaller mark.
    """
    rng = rng_stream(seed, index, "matern")
    n = rng.poisson(rho_parent * L**d)
    pts = _uniform_box(rng, n, d, L)
    marks = rng.uniform(size=n)
    diam = _hardcore_diameter(delta)
    keep = np.ones(n, dtype=bool)
    if n >= 2:
        tree = cKDTree(_to_box(pts, L), boxsize=L)
        pairs = tree.query_pairs(diam * (1 + 1e-12), output_type="ndarray")
        if pairs.size:
            dist = np.linalg.norm(periodic_displacement(pts[pairs[:, 0]], pts[pairs[:, 1]], L), axis=1)
            pairs = pairs[dist < diam]
            i, j = pairs[:, 0], pairs[:, 1]
            loser = np.where(marks[i] > marks[j], i, j)
            keep[loser] = False
    lam = keep.sum() * unit_ball_volume(d) / L**d
    if lam >= 0.5:
        raise ValueError(f"Matern sample reached volume fraction {lam:.3f} >= 1/2")
    return ParticleConfiguration(d, L, pts[keep], delta,
                                 meta={"kind": "matern_hardcore", "rho_parent": rho_parent,
                                       "seed": seed, "index": index})


def sample_rsa(d: int, L: float, lambda_target: float, delta: float, seed: int = 0, index: int = 0,
               max_attempts: int = 200_000) -> ParticleConfiguration:
    """Random sequential addition up to volume fraction ``lambda_target``.

    ``meta["saturated"]`` is True when the attempt budget ran out before the
    target count was reached.
    """
    guard = RSA_JAMMING_GUARD[d]
    if lambda_target > guard:
        raise ValueError(f"RSA target {lambda_target} exceeds the jamming guard {guard} for d={d}")
    rng = rng_stream(seed, index, "rsa")
    # smallest count whose volume fraction reaches the target
    target = int(math.ceil(lambda_target * L**d / unit_ball_volume(d) * (1 - 1e-12)))
    diam = _hardcore_diameter(delta)
    pts = np.empty((target, d))
    n = 0
    attempts = 0
    while n < target and attempts < max_attempts:
        batch = _uniform_box(rng, 256, d, L)
        for x in batch:
            attempts += 1
            if n == 0 or np.min(np.sum(periodic_displacement(pts[:n], x, L) ** 2, axis=1)) >= diam**2:
                pts[n] = x
                n += 1
                if n == target:
                    break
            if attempts >= max_attempts:
                break
    return ParticleConfiguration(d, L, pts[:n], delta,
                                 meta={"kind": "rsa", "lambda_target": lambda_target, "seed": seed,
                                       "index": index, "saturated": n < target, "attempts": attempts})


def sample_perturbed_lattice(d: int, L: float, spacing: float, u_max: float, delta: float = 0.0,
                             seed: int = 0, index: int = 0) -> ParticleConfiguration:
    """Cubic lattice of given spacing, each site displaced uniformly in B_{u_max}.

    A uniform random global shift of the lattice makes the process
    stationary.  Requires ``L`` to be a multiple of ``spacing`` and
    ``spacing - 2 u_max >= 2(1 + delta)`` so the hard core holds surely.
    """
    ratio = L / spacing
    if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
        raise ValueError(f"L={L} is not a multiple of the lattice spacing {spacing}")
    if not 0 <= u_max < spacing / 2:
        raise ValueError("perturbation radius must lie in [0, spacing/2)")
    if spacing - 2 * u_max < _hardcore_diameter(delta) * (1 - 1e-12):
        raise ValueError("spacing - 2 u_max must be at least 2(1 + delta)")
    rng = rng_stream(seed, index, "lattice")
    m = int(round(ratio))
    sites = np.stack(np.meshgrid(*([np.arange(m)] * d), indexing="ij"), -1).reshape(-1, d) * spacing
    shift = rng.uniform(0, spacing, size=d)
    pts = sites + shift - L / 2
    if u_max > 0:
        pts = pts + uniform_in_ball(rng, len(pts), d, u_max)
    return ParticleConfiguration(d, L, pts, delta,
                                 meta={"kind": "perturbed_lattice", "spacing": spacing, "u_max": u_max,
                                       "shift": shift.tolist(), "seed": seed, "index": index})


def resample_in_ball(config: ParticleConfiguration, center, ell: float, mode: str = "move", seed: int = 0,
                     rho: float | None = None, max_attempts: int = 10_000) -> ParticleConfiguration:
    """Redraw the particles whose centres lie in ``B_ell(center)``.

    ``mode="move"`` keeps their number and places them uniformly in the ball;
    ``mode="oscillate"`` draws a Poisson(rho |B_ell|) count first, truncated
    at the number that still fits.  Particles outside the ball are unchanged.
    Hard-core constraints are kept by rejection; raises SamplingError after
    ``max_attempts`` rejections.
    """
    if mode not in ("move", "oscillate"):
        raise ValueError(f"unknown resampling mode {mode!r}")
    d, L = config.d, config.L
    center = np.asarray(center, dtype=float).reshape(d)
    rng = rng_stream(seed, 0, "resample-" + mode)
    off = periodic_displacement(config.centers, center, L)
    inside = np.sum(off**2, axis=1) < ell**2
    outside = config.centers[~inside]
    if mode == "move":
        count = int(inside.sum())
    else:
        rho = config.density if rho is None else rho
        cap = int(ell**d / max(1 + config.delta, 1.0) ** d) + 1
        count = min(int(rng.poisson(rho * unit_ball_volume(d, ell))), cap)
    diam = _hardcore_diameter(config.delta) if config.delta >= 0 else 0.0
    placed = []
    attempts = 0
    while len(placed) < count:
        if attempts >= max_attempts:
            raise SamplingError(f"placed {len(placed)} of {count} particles after {attempts} attempts")
        attempts += 1
        x = center + uniform_in_ball(rng, 1, d, ell)[0]
        others = np.vstack([outside] + [np.array(placed).reshape(-1, d)])
        if len(others) and np.min(np.sum(periodic_displacement(others, x, L) ** 2, axis=1)) < diam**2:
            continue
        placed.append(x)
    new = np.vstack([outside, np.array(placed).reshape(-1, d)])
    return config.with_centers(new)


def _to_box(pts, L):
    y = np.mod(pts + L / 2, L)
    return np.where(y >= L, 0.0, y)


def min_pairwise_distance(config: ParticleConfiguration) -> float:
    """Smallest minimum-image distance between two centres.

    A periodic k-d tree proposes each point's nearest neighbour; the
    distance is then recomputed with the same formula as the O(N^2) scan,
    so both give bit-identical results.
    """
    n = config.n_particles
    if n < 2:
        raise ValueError("need at least two particles")
    pts = config.centers
    tree = cKDTree(_to_box(pts, config.L), boxsize=config.L)
    _, nn = tree.query(_to_box(pts, config.L), k=min(n, 3))
    best = math.inf
    for col in range(1, nn.shape[1]):
        j = nn[:, col]
        ok = j != np.arange(n)
        dx = periodic_displacement(pts[ok], pts[j[ok]], config.L)
        if dx.size:
            best = min(best, float(np.min(np.sqrt(np.sum(dx**2, axis=1)))))
    return best


@dataclass(frozen=True)
class EnsembleSpec:
    """Recipe for an ensemble of configurations on tori of varying side.

    ``params`` by kind:

    * ``poisson``: ``rho``
    * ``matern_hardcore``: ``rho_parent`` or ``volume_fraction``
    * ``rsa``: ``lambda_target`` (optional ``max_attempts``)
    * ``perturbed_lattice``: ``spacing``, ``u_max``
    """

    kind: str
    d: int
    params: dict
    delta: float = 0.1
    n_realizations: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown process kind {self.kind!r}; expected one of {KINDS}")
        if self.d not in (1, 2, 3, 4):
            raise ValueError("dimension must be in 1..4")
        if self.n_realizations < 1:
            raise ValueError("need at least one realization")

    @property
    def nominal_density(self) -> float:
        p = self.params
        if self.kind == "poisson":
            return p["rho"]
        if self.kind == "matern_hardcore":
            if "volume_fraction" in p:
                return p["volume_fraction"] / unit_ball_volume(self.d)
            return matern_retained_intensity(p["rho_parent"], self.d, self.delta)
        if self.kind == "rsa":
            return p["lambda_target"] / unit_ball_volume(self.d)
        return p["spacing"] ** (-self.d)

    def sample(self, L: float, index: int) -> ParticleConfiguration:
        p = self.params
        # mix L into the stream so different tank sizes are independent
        salt = int(round(L * 1000))
        seed = (self.seed * 1_000_003 + salt) & 0xFFFFFFFF
        if self.kind == "poisson":
            return sample_poisson(self.d, L, p["rho"], seed, index)
        if self.kind == "matern_hardcore":
            rp = p.get("rho_parent")
            if rp is None:
                rp = matern_parent_intensity(p["volume_fraction"] / unit_ball_volume(self.d), self.d, self.delta)
            return sample_matern_hardcore(self.d, L, rp, self.delta, seed, index)
        if self.kind == "rsa":
            return sample_rsa(self.d, L, p["lambda_target"], self.delta, seed, index,
                              p.get("max_attempts", 200_000))
        return sample_perturbed_lattice(self.d, L, p["spacing"], p["u_max"], self.delta, seed, index)

    def realizations(self, L: float, count: int | None = None):
        for i in range(self.n_realizations if count is None else count):
            yield self.sample(L, i)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "d": self.d, "params": dict(self.params), "delta": self.delta,
                "n_realizations": self.n_realizations, "seed": self.seed}

    @classmethod
    def from_dict(cls, data: dict) -> "EnsembleSpec":
        return cls(data["kind"], int(data["d"]), dict(data.get("params", {})), float(data.get("delta", 0.1)),
                   int(data.get("n_realizations", 20)), int(data.get("seed", 0)))
