"""
Independent dense reference solvers for small two-dimensional instances.

These assemble the constrained Stokes problem explicitly in a real
divergence-free Fourier basis and solve the full saddle-point system with
dense linear algebra.  They share no code path with the FFT/CG solver apart
from the particle configuration itself, and are meant for cross-checks on
tiny grids only.
"""

from __future__ import annotations

import math

import numpy as np

from .point_process import ParticleConfiguration

__all__ = ["DenseStokes2D"]


class DenseStokes2D:
    """Dense Fourier-basis discretization on an ``n x n`` grid of the torus of side ``L``.

    Basis: ``t cos(k.x)`` and ``t sin(k.x)`` with ``t = k_perp/|k|`` for
    every nonzero half-plane wavevector without Nyquist components.
    """

    def __init__(self, L: float, n: int):
        self.L, self.n = float(L), int(n)
        self.h = self.L / self.n
        half = self.n // 2
        ms = [(a, b) for a in range(0, half) for b in range(-half + 1, half)
              if a > 0 or b > 0]
        self.m = np.array(ms, dtype=float)
        self.k = 2 * math.pi / self.L * self.m
        self.k2 = np.sum(self.k**2, axis=1)
        kn = np.sqrt(self.k2)
        self.t = np.column_stack([-self.k[:, 1], self.k[:, 0]]) / kn[:, None]
        # Dirichlet energy per unit coefficient, and L2 norm squared of each basis function
        self.stiffness = np.concatenate([self.k2, self.k2]) * self.L**2 / 2

    def grid(self) -> np.ndarray:
        ax = -self.L / 2 + self.h * np.arange(self.n)
        x, y = np.meshgrid(ax, ax, indexing="ij")
        return np.column_stack([x.ravel(), y.ravel()])

    def basis_at(self, pts: np.ndarray) -> np.ndarray:
        """Basis values at points, shape ``(len(pts), 2, n_basis)``."""
        ph = pts @ self.k.T
        c, s = np.cos(ph), np.sin(ph)
        vals = np.concatenate([c, s], axis=1)
        t = np.concatenate([self.t, self.t], axis=0)
        return vals[:, None, :] * t.T[None, :, :]

    def particle_cells(self, config: ParticleConfiguration):
        pts = self.grid()
        out = []
        for c in config.centers:
            dx = pts - c
            dx -= self.L * np.round(dx / self.L)
            inside = np.sum(dx**2, axis=1) < config.radius**2 * (1 - 1e-12)
            out.append((np.flatnonzero(inside), dx[inside]))
        return out

    @staticmethod
    def _rigid_projector(off: np.ndarray) -> np.ndarray:
        m = len(off)
        cols = np.zeros((m, 2, 3))
        cols[:, 0, 0] = 1.0
        cols[:, 1, 1] = 1.0
        cols[:, 0, 2] = -off[:, 1]
        cols[:, 1, 2] = off[:, 0]
        q, _ = np.linalg.qr(cols.reshape(2 * m, 3))
        return np.eye(2 * m) - q @ q.T

    def solve_sedimentation(self, config: ParticleConfiguration, e, threshold: float = 1e-6) -> np.ndarray:
        """Velocity on the grid, shape ``(2, n, n)``, for the sedimentation problem."""
        e = np.asarray(e, float)
        pts = self.grid()
        cells = self.particle_cells(config)
        chi = np.zeros(len(pts))
        for idx, _ in cells:
            chi[idx] = 1.0
        lam = chi.mean()
        alpha = lam / (1 - lam)
        force = (1 + alpha) * (chi - lam)[:, None] * e[None, :]
        full = self.basis_at(pts)
        load = self.h**2 * np.einsum("pc,pcj->j", force, full)
        inv_h = 1.0 / self.stiffness
        rows = []
        for idx, off in cells:
            phi = full[idx].reshape(2 * len(idx), -1)
            c = self._rigid_projector(off) @ phi
            block = self.h**2 * (c * inv_h) @ c.T
            w, v = np.linalg.eigh(0.5 * (block + block.T))
            z = v[:, w > threshold * w.max()]
            rows.append(z.T @ c)
        b = np.vstack(rows) if rows else np.zeros((0, len(load)))
        nb, nc = len(load), len(b)
        kkt = np.zeros((nb + nc, nb + nc))
        kkt[:nb, :nb] = np.diag(self.stiffness)
        kkt[:nb, nb:] = b.T
        kkt[nb:, :nb] = b
        rhs = np.concatenate([load, np.zeros(nc)])
        sol = np.linalg.solve(kkt, rhs)
        coef = sol[:nb]
        vel = np.einsum("pcj,j->cp", full, coef)
        return vel.reshape(2, self.n, self.n)
