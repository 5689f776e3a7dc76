"""Clothloop estimates cloth states in simulation and learns where to grasp them."""

from clothloop.config import option_keys
from clothloop.estimator import EstimationConfig, estimate_sequence
from clothloop.logs import get_warnings
from clothloop.mesh import DeformableMesh, PointCloud, make_strip
from clothloop.scenario import load_scenario, run_demo
from clothloop.sim import ClothSimulator, SimConfig
from clothloop.util.enum.warning_types import WarningTypes

Options = option_keys()
__all__ = [
    "ClothSimulator",
    "DeformableMesh",
    "EstimationConfig",
    "Options",
    "PointCloud",
    "SimConfig",
    "WarningTypes",
    "estimate_sequence",
    "get_warnings",
    "load_scenario",
    "make_strip",
    "run_demo",
]
