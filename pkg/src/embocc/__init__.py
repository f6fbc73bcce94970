"""Embodied 3D semantic occupancy prediction with a persistent memory of
semantic Gaussians, driven by a depth-oracle refiner on synthetic scenes."""

from .gaussians import CLASS_NAMES, EMPTY_CLASS, NUM_CLASSES, GaussianConfig, GaussianMemory, SemanticGaussians
from .geometry import Intrinsics, Pose
from .grid import GridGeometry, VoxelGrid
from .metrics import ScoreReport, lookback_eval, score
from .pipeline import EmbodiedState, RunConfig, run_embodied_step, run_local, run_sequence
from .refinement import ConfidenceSchedule, OracleParams, OracleRefiner

__version__ = "0.1.0"

__all__ = [
    "CLASS_NAMES",
    "EMPTY_CLASS",
    "NUM_CLASSES",
    "ConfidenceSchedule",
    "EmbodiedState",
    "GaussianConfig",
    "GaussianMemory",
    "GridGeometry",
    "Intrinsics",
    "OracleParams",
    "OracleRefiner",
    "Pose",
    "RunConfig",
    "ScoreReport",
    "SemanticGaussians",
    "VoxelGrid",
    "lookback_eval",
    "run_embodied_step",
    "run_local",
    "run_sequence",
    "score",
]
