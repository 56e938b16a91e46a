"""Report figures (matplotlib, non-interactive backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["plot_scaling", "plot_estimate", "plot_configuration"]


def plot_scaling(result, path, observables=None) -> Path:
    """Log-log plot of each observable against ``L`` with error bars and the power-law fit."""
    names = list(observables) if observables else list(result.observables)
    fig, axes = plt.subplots(1, len(names), figsize=(4.2 * len(names), 3.6), squeeze=False)
    L = np.asarray(result.L_values, float)
    grid = np.geomspace(L.min(), L.max(), 50) if len(L) else L
    for ax, name in zip(axes[0], names):
        s = result[name]
        ax.errorbar(L, s.values, yerr=s.stderr, fmt="o", capsize=3, label="ensemble")
        if np.isfinite(s.power.exponent):
            ax.plot(grid, s.power.evaluate(grid), "-", label=f"fit, exponent {s.power.exponent:.3f}")
        ax.set_xscale("log")
        if np.all(np.asarray(s.values) > 0):
            ax.set_yscale("log")
        ax.set_xlabel("L")
        ax.set_title(name)
        ax.legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_estimate(estimate, path, title: str = "", reference: float | None = None, loglog: bool = False) -> Path:
    """Tabulated estimate with one-sigma error bars (pair correlation, S(k), number variance)."""
    fig, ax = plt.subplots(figsize=(4.8, 3.6))
    ax.errorbar(estimate.abscissa, estimate.value, yerr=estimate.stderr, fmt=".", capsize=2)
    if reference is not None:
        ax.axhline(reference, color="k", lw=0.8, ls="--")
    if loglog:
        ax.set_xscale("log")
        ax.set_yscale("log")
    ax.set_xlabel(estimate.abscissa_name)
    ax.set_ylabel(estimate.value_name)
    ax.set_title(title)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_configuration(config, path, velocities=None) -> Path:
    """Particle discs of a two-dimensional configuration, optionally with velocity arrows."""
    if config.d != 2:
        raise ValueError("only two-dimensional configurations can be drawn")
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    h = config.L / 2
    for c in config.centers:
        ax.add_patch(plt.Circle(c, config.radius, fill=False))
    if velocities is not None and len(config.centers):
        v = np.asarray(velocities)
        ax.quiver(config.centers[:, 0], config.centers[:, 1], v[:, 0], v[:, 1], angles="xy")
    ax.set_xlim(-h, h)
    ax.set_ylim(-h, h)
    ax.set_aspect("equal")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
