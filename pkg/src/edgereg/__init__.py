"""Edge-based LiDAR-camera registration on a small numpy autodiff engine."""

from .config import PipelineConfig, desk_config
from .dataio import FramePair, GrayImage, PointCloud
from .geometry import CameraIntrinsics, PoseSE3

__all__ = ["CameraIntrinsics", "FramePair", "GrayImage", "PipelineConfig", "PointCloud", "PoseSE3", "desk_config"]
__version__ = "0.1.0"
