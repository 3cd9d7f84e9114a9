"""
Base configuration and utilities for the video instance segmentation pipeline.

Settings live in a TOML file whose tables mirror the sections below; process-level
defaults (data root, log level) are read from the environment or a .env file.
"""
import logging
import math
import os
from pathlib import Path
from typing import Any, Dict, Literal, Mapping, Optional, Tuple, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

load_dotenv()

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def setup_logging(level: Optional[str] = None) -> None:
    """Install the root handler; the level defaults to VISGRAPH_LOG_LEVEL."""
    resolved = (level or os.getenv("VISGRAPH_LOG_LEVEL", "INFO")).upper()
    logging.basicConfig(level=resolved, format=LOG_FORMAT)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DataConfig(_Section):
    """Dataset location and frame-pair sampling."""

    root: str = Field(default_factory=lambda: os.getenv("VISGRAPH_DATA_ROOT", "data/synthetic"))
    image_size: int = Field(128, ge=64)
    p_img: float = Field(0.5, ge=0.0, le=1.0)


class ModelConfig(_Section):
    """Network dimensions shared by perception, resfuser and object_graph."""

    channels: int = Field(32, ge=1)
    latent_dim: int = Field(64, ge=1)
    edge_dim: int = Field(64, ge=1)
    hidden_dim: int = Field(128, ge=1)
    roi_size: int = Field(14, ge=2)
    mask_size: int = Field(28, ge=4)
    levels: Tuple[int, ...] = (3, 4, 5)
    num_classes: int = Field(4, ge=1)
    scale_base: float = Field(64.0, gt=0.0)
    roi_canonical_size: float = Field(64.0, gt=0.0)
    head_convs: int = Field(2, ge=1)
    mask_convs: int = Field(2, ge=1)

    @field_validator("levels")
    @classmethod
    def _consecutive_levels(cls, levels: Tuple[int, ...]) -> Tuple[int, ...]:
        if not levels:
            raise ValueError("levels must not be empty")
        if levels[0] < 1 or any(b != a + 1 for a, b in zip(levels, levels[1:])):
            raise ValueError(f"levels must be consecutive and increasing from >= 1, got {list(levels)}")
        return levels

    @model_validator(mode="after")
    def _mask_is_upsampled_roi(self) -> "ModelConfig":
        if self.mask_size != 2 * self.roi_size:
            raise ValueError(f"mask_size must equal 2 * roi_size ({2 * self.roi_size}), got {self.mask_size}")
        return self

    @property
    def max_stride(self) -> int:
        return 2 ** self.levels[-1]


class LossConfig(_Section):
    """Weights of the total training loss."""

    cls: float = Field(1.0, ge=0.0)
    box: float = Field(1.0, ge=0.0)
    ctr: float = Field(1.0, ge=0.0)
    mask: float = Field(1.0, ge=0.0)
    edge: float = Field(1.0, ge=0.0)
    trans: float = Field(0.1, ge=0.0)


class OptimConfig(_Section):
    """SGD schedule, scaled down from the full-dataset schedule."""

    learning_rate: float = Field(5e-3, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(1e-4, ge=0.0)
    iterations: int = Field(5000, ge=1)
    milestones: Optional[Tuple[int, ...]] = None
    batch_size: int = Field(4, ge=1)
    grad_clip: float = Field(10.0, gt=0.0)
    log_every: int = Field(50, ge=1)

    @model_validator(mode="after")
    def _milestones_within_schedule(self) -> "OptimConfig":
        if self.milestones is not None:
            if any(m >= self.iterations or m < 1 for m in self.milestones):
                raise ValueError(f"milestones must lie in [1, iterations={self.iterations}), got {list(self.milestones)}")
            if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
                raise ValueError("milestones must be strictly increasing")
        return self

    @property
    def resolved_milestones(self) -> Tuple[int, ...]:
        """Decay points; 60% and 85% of the schedule unless set explicitly."""
        if self.milestones is not None:
            return tuple(self.milestones)
        points = {max(1, int(self.iterations * fraction)) for fraction in (0.6, 0.85)}
        return tuple(sorted(p for p in points if p < self.iterations))


class DetectConfig(_Section):
    """Decoding thresholds and detection-loss constants."""

    score_threshold: float = Field(0.05, ge=0.0, le=1.0)
    nms_iou: float = Field(0.5, ge=0.0, le=1.0)
    max_detections: int = Field(20, ge=1)
    pre_nms_topk: int = Field(1000, ge=1)
    iou_match_threshold: float = Field(0.5, ge=0.0, le=1.0)
    focal_alpha: float = Field(0.25, ge=0.0, le=1.0)
    focal_gamma: float = Field(2.0, ge=0.0)


class TrackerConfig(_Section):
    """Score-matrix weights of the online tracker."""

    alpha: float = Field(1.0, ge=0.0)
    beta: float = Field(2.0, ge=0.0)
    gamma: float = Field(1.0, ge=0.0)
    theta_new: float = Field(0.1, gt=0.0, le=1.0)
    theta_iou: float = Field(0.3, ge=0.0, le=1.0)
    eps: float = Field(1e-6, gt=0.0, lt=0.5)
    mode: Literal["edge", "iou"] = "edge"


class ToggleConfig(_Section):
    enabled: bool = True


class VisConfig(_Section):
    """Complete configuration of one training / inference run."""

    data: DataConfig = Field(default_factory=DataConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    optim: OptimConfig = Field(default_factory=OptimConfig)
    detect: DetectConfig = Field(default_factory=DetectConfig)
    tracker: TrackerConfig = Field(default_factory=TrackerConfig)
    resfuser: ToggleConfig = Field(default_factory=ToggleConfig)
    gnn: ToggleConfig = Field(default_factory=ToggleConfig)
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _image_fits_pyramid(self) -> "VisConfig":
        stride = self.model.max_stride
        if self.data.image_size % stride:
            raise ValueError(f"data.image_size must be a multiple of {stride}, got {self.data.image_size}")
        return self

    @property
    def tracker_mode(self) -> str:
        """Edge-score tracking needs the GNN; otherwise fall back to IoU."""
        return "edge" if self.gnn.enabled and self.tracker.mode == "edge" else "iou"

    @classmethod
    def from_toml(cls, path: Union[str, Path]) -> "VisConfig":
        with open(path, "rb") as handle:
            return cls.model_validate(tomllib.load(handle))

    def override(self, updates: Mapping[str, Any]) -> "VisConfig":
        """
        Return a copy with dotted keys replaced, e.g. {"resfuser.enabled": False}.

        The result is validated again, so unknown keys and bad values still fail.
        """
        tree: Dict[str, Any] = self.model_dump(mode="json")
        for dotted, value in updates.items():
            node = tree
            *parents, leaf = dotted.split(".")
            for part in parents:
                node = node.setdefault(part, {})
            node[leaf] = value
        return VisConfig.model_validate(tree)

    def scale_ranges(self) -> Dict[int, Tuple[float, float]]:
        levels = self.model.levels
        ranges: Dict[int, Tuple[float, float]] = {}
        for index, level in enumerate(levels):
            low = 0.0 if index == 0 else self.model.scale_base * 2 ** (index - 1)
            high = math.inf if index == len(levels) - 1 else self.model.scale_base * 2 ** index
            ranges[level] = (low, high)
        return ranges
