"""Cascaded context pyramid network for semantic scene completion, in numpy."""
from .estimator import FtsdfVoxelizer, SSCEstimator
from .exceptions import ConfigError, ParseError, ShapeError, StateError
from .network import Network, NetworkConfig, build, desk_config, full_config, tiny_config
from .pyramid import PyramidConfig
from .voxel import GRID_PRESETS, DepthImage, Scene, VoxelGridSpec, voxelize

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DepthImage", "FtsdfVoxelizer", "GRID_PRESETS", "Network", "NetworkConfig",
    "ParseError", "PyramidConfig", "SSCEstimator", "Scene", "ShapeError", "StateError",
    "VoxelGridSpec", "build", "desk_config", "full_config", "tiny_config", "voxelize",
]
