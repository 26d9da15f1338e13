"""Smoothed signed-distance contact models for detection, time stepping, control and learning."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source checkout
    __version__ = "0.1.0"

from .geometry import SupportPlaneSet, box, build_from_mesh, csdf, exact_distance, smooth_distance
from .stepper import ModelParams, SystemState, qp_oracle_step, step_velocity

__all__ = [
    "ModelParams", "SupportPlaneSet", "SystemState", "__version__", "box", "build_from_mesh", "csdf",
    "exact_distance", "qp_oracle_step", "smooth_distance", "step_velocity",
]
