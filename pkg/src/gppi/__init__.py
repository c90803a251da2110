"""Gaussian-process policy iteration for HJB and mean field game systems."""

from .errors import CFLError, ConfigError, ConstraintError, GPPIError, KernelError, SingularSystemError
from .hjb import HJBConfig, HJBProblem, gppi_hjb
from .kernels import KernelSpec
from .mfg_stationary import PowerCoupling, StationaryConfig, StationaryMFG, gppi_stationary
from .mfg_timedep import TimeDepConfig, TimeDepMFG, gppi_td
from .policy import HamiltonianSpec
from .problem import RunControls, run_gppi
from .report import RunReport
from .schwarz import SchwarzNewton, SchwarzOptions, as_newton_solve

__version__ = "0.1.0"

__all__ = [
    "CFLError", "ConfigError", "ConstraintError", "GPPIError", "KernelError", "SingularSystemError",
    "HJBConfig", "HJBProblem", "gppi_hjb", "KernelSpec", "PowerCoupling", "StationaryConfig",
    "StationaryMFG", "gppi_stationary", "TimeDepConfig", "TimeDepMFG", "gppi_td", "HamiltonianSpec",
    "RunControls", "run_gppi", "RunReport", "SchwarzNewton", "SchwarzOptions", "as_newton_solve",
]
