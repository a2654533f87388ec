"""Pipeline configuration (JSON-backed)."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ContractError

EDGE2D_METHODS = ("lsd", "sobel", "canny")
EDGE3D_MODES = ("depth", "reflect", "both")


@dataclass
class PipelineConfig:
    # edge extraction
    eps_depth: float = 0.1
    eps_reflect: float = 0.2
    edge2d_method: str = "lsd"
    edge3d_mode: str = "both"
    sobel_thresholds: tuple[float, float] = (0.0, 150.0)
    canny_thresholds: tuple[float, float] = (50.0, 150.0)
    # ground-truth pairing (pixels)
    eps_corr: float = 3.0
    # networks
    feature_dim: int = 64
    image_channels: tuple[int, int] = (16, 32)
    point_downsample: int = 20480
    fps_counts: tuple[int, int] = (2048, 512)
    sa_radii: tuple[float, float] = (2.0, 8.0)
    sa_kmax: int = 16
    sa_widths: tuple[int, int] = (32, 64)
    exchange_blocks: int = 6
    heads: int = 4
    layer_norm: bool = False
    use_exchange: bool = True
    # loss weights
    lambda_fov: float = 1.0
    lambda_sigma: float = 1.0
    lambda_p: float = 1.0
    # pose recovery
    ransac_threshold: float = 3.0
    ransac_confidence: float = 0.999
    ransac_max_iters: int = 2000
    min_confidence: float = 0.0
    # training
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 10.0
    augment: bool = True
    aug_max_xy: float = 10.0
    aug_max_yaw_deg: float | None = None
    train_max_keypoints: int = 0  # per-modality cap on training keypoints, 0 keeps all
    lr_schedule: str = "constant"  # or "cosine": decay to zero over the step or time budget
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("eps_depth", "eps_reflect", "eps_corr", "ransac_threshold", "aug_max_xy"):
            if not getattr(self, name) > 0:
                raise ContractError(f"{name} must be positive")
        if self.feature_dim < 4:
            raise ContractError("feature_dim must be >= 4")
        if self.feature_dim % self.heads:
            raise ContractError("feature_dim must be divisible by heads")
        if max(self.fps_counts) > self.point_downsample:
            raise ContractError("fps_counts must not exceed point_downsample")
        if not 0.0 < self.ransac_confidence < 1.0:
            raise ContractError("ransac_confidence must lie in (0, 1)")
        if self.edge2d_method not in EDGE2D_METHODS:
            raise ContractError(f"edge2d_method must be one of {EDGE2D_METHODS}")
        if self.edge3d_mode not in EDGE3D_MODES:
            raise ContractError(f"edge3d_mode must be one of {EDGE3D_MODES}")
        if self.train_max_keypoints < 0:
            raise ContractError("train_max_keypoints must be >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ContractError("lr_schedule must be 'constant' or 'cosine'")
        if self.exchange_blocks < 1:
            raise ContractError("exchange_blocks must be >= 1")

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(data) - set(known)
        if unknown:
            raise ContractError(f"unknown config fields: {sorted(unknown)}")
        values = {}
        for k, v in data.items():
            values[k] = tuple(v) if isinstance(v, list) else v
        return cls(**values)

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def desk_config(**overrides) -> PipelineConfig:
    """Small settings sized for synthetic desk-scale frames on a single CPU core."""
    base = dict(
        feature_dim=64,
        point_downsample=2048,
        fps_counts=(256, 64),
        sa_radii=(1.5, 6.0),
        exchange_blocks=2,
    )
    base.update(overrides)
    return PipelineConfig(**base)

