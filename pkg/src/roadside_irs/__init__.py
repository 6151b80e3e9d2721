"""Simulation of a roadside IRS serving a fast vehicle.

The serving panel is beamformed from an off-line estimate of its static
link to the base station plus per-block user angles that are estimated
before service and predicted from a fitted straight-line trajectory
during service.
"""

from .beamform import AoResult, AoSettings, achievable_rate, ao_maximize_quadratic, initial_beamforming, realtime_reflection
from .config import ExperimentSpec, ScenarioConfig, parse_experiment
from .errors import ConfigError, DegenerateGeometryError, EstimationError, IrsError, SingularMatrixError
from .geometry import AnglePair, UpaGeometry, angles_from_position, upa_steering
from .sim import monte_carlo, run_benchmark_cascaded, run_no_irs, run_proposed, run_upper_bound

__all__ = [
    "AnglePair",
    "AoResult",
    "AoSettings",
    "ConfigError",
    "DegenerateGeometryError",
    "EstimationError",
    "ExperimentSpec",
    "IrsError",
    "ScenarioConfig",
    "SingularMatrixError",
    "UpaGeometry",
    "achievable_rate",
    "angles_from_position",
    "ao_maximize_quadratic",
    "initial_beamforming",
    "monte_carlo",
    "parse_experiment",
    "realtime_reflection",
    "run_benchmark_cascaded",
    "run_no_irs",
    "run_proposed",
    "run_upper_bound",
    "upa_steering",
]
