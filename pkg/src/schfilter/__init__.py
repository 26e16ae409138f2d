"""Particle filters for a viscous stochastic Camassa-Holm model with transport noise.

Submodules, from the bottom up: :mod:`grid` (periodic P1/DG0 finite
elements), :mod:`gaussian_field` (smoothed white noise), :mod:`sch_dynamics`
(implicit midpoint stepper and adjoint), :mod:`observing`, :mod:`filtering`,
:mod:`ensemble_runtime`, :mod:`diagnostics` and :mod:`experiment`.
"""

from .experiment import RunConfig, load_config, run_experiment
from .grid import Mesh, assemble
from .sch_dynamics import ModelState, SchModel, SchParams

__all__ = ["Mesh", "assemble", "ModelState", "SchModel", "SchParams", "RunConfig",
           "load_config", "run_experiment"]
__version__ = "0.1.0"
