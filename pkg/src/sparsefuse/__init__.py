"""Sparse camera-LiDAR fusion: voxelization, window partitioning, grouped attention."""

from .attention import ModelConfig, attentive_pool_z, grouped_attention, positional_encoding, transformer_layer
from .fusion import PipelineConfig, run_pipeline
from .geometry import BehindCamera, CameraModel, OutOfFrame, PixelCoord, project_to_pixel, unproject_pixel
from .partition import PartitionConfig, PartitionPlan, build_plan, mean_intra_group_distance
from .scene import SceneSpec, generate_scene, street_spec, wall_scene
from .tokens import Token, TokenSet
from .voxelizer import EmptyCloud, PointCloud, VoxelGridConfig, pillarize, voxelize

__version__ = "0.1.0"
