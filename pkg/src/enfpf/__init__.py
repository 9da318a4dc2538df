"""Ensemble Fokker-Planck filtering of statistical observations.

Modules
-------
dynamics    test systems and time-steppers
observe     statistic maps, reference statistics, noise calibration
core        gains, score term and the filter cycle
kb_oracle   grid Kalman-Bucy filter for densities (1-D OU)
metrics     Wasserstein-1 distances and statistic errors
harness     seeded experiment protocols and CSV output
"""

from .core import FilterSettings, analysis_update, enfpf_cycle
from .dynamics import make_stepper
from .observe import moment_spec

__version__ = "0.1.0"

__all__ = ["FilterSettings", "analysis_update", "enfpf_cycle", "make_stepper", "moment_spec", "__version__"]
