"""Monte Carlo simulation of Walsh Brownian motion and couplings of the
interface SDE on star graphs."""

from .errors import (ConfigurationError, ConsistencyError, InsufficientDataError, InvalidPointError,
                     PreconditionError, WalshError)
from .star_graph import ORIGIN, GraphPoint, StarGraph, TestFunction
from .noise import DriverPath, SeedSpec, gen_driver, mix_drivers
from .sde_sim import (CouplingRun, SamplePath, construct_driver_from_solution, simulate_conditional_ensemble,
                      simulate_interface_euler, simulate_r_coupling, simulate_wbm_exact,
                      simulate_wiener_coupling)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError", "ConsistencyError", "InsufficientDataError", "InvalidPointError",
    "PreconditionError", "WalshError", "ORIGIN", "GraphPoint", "StarGraph", "TestFunction",
    "DriverPath", "SeedSpec", "gen_driver", "mix_drivers", "CouplingRun", "SamplePath",
    "construct_driver_from_solution", "simulate_conditional_ensemble", "simulate_interface_euler",
    "simulate_r_coupling", "simulate_wbm_exact", "simulate_wiener_coupling",
]
