"""Condition-number optimization of planar control-point layouts for pose estimation."""

from .dlt import condition_number, solve_dlt
from .errors import MloptError
from .geometry import Intrinsics, Pose
from .optimizer import OptimizerConfig, PlanarPointSet, optimize

__version__ = "0.1.0"

__all__ = [
    "Intrinsics",
    "MloptError",
    "OptimizerConfig",
    "PlanarPointSet",
    "Pose",
    "__version__",
    "condition_number",
    "optimize",
    "solve_dlt",
]
