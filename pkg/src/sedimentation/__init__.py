"""
Sedimentation of random suspensions on the periodic torus.

Submodules
----------
torus
    Periodic grids, spectral fields and the Stokes solution operator.
point_process
    Particle configurations and ensemble samplers.
statistics
    Correlation estimators, variance functionals and scaling fits.
linear_model
    Linearized (dilute) model and scalar proxies.
stokes
    Rigid-particle solver, reflections, correctors and effective viscosity.
harness
    Monte Carlo campaigns, L-sweeps and persistence.
checks
    The acceptance battery used by ``sedimentation verify``.
cli
    Command-line entry point.
"""

__version__ = "0.1.0"

from .point_process import EnsembleSpec, ParticleConfiguration  # noqa: E402
from .torus import SpectralField, TorusDomain  # noqa: E402

__all__ = ["EnsembleSpec", "ParticleConfiguration", "SpectralField", "TorusDomain", "__version__"]
