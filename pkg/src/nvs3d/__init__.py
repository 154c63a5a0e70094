"""nvs3d: joint next-view selection and voxel 3D reconstruction, desk scale."""

from .model import ModelConfig
from .shapes import DatasetConfig
from .train import TrainConfig
from .evaluate import EvalConfig
from .voxel import BinaryGrid, VoxelGrid, binarize, iou
from .viewsphere import ViewSphere, Viewpoint, canonical_sphere

__all__ = [
    "BinaryGrid", "DatasetConfig", "EvalConfig", "ModelConfig",
    "TrainConfig", "ViewSphere", "Viewpoint", "VoxelGrid", "binarize",
    "canonical_sphere", "iou",
]

__version__ = "0.1.0"
