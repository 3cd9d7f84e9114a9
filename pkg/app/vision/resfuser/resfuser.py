"""
Residual Temporal Feature Fusion - Solution Implementation

Description: Per-level two-layer CNN f_i over the concatenated features of two consecutive
frames, added as a residual onto the current frame's pyramid.
"""

from typing import Callable, Sequence

import torch
from torch import nn

from app.utils.config import VisConfig
from app.utils.errors import ShapeError
from app.vision.perception.perception import PyramidFeatures


class ResFuser(nn.Module):
    """
    One residual branch per pyramid level, keyed "level<i>".

    The last conv of every branch starts at zero, so a fresh ResFuser is the identity
    on the current frame.
    """

    def __init__(self, channels: int, levels: Sequence[int], kernel_size: int = 3,
                 activation: Callable[[], nn.Module] = nn.SiLU):
        super().__init__()
        self.channels = channels
        self.levels = tuple(levels)
        padding = kernel_size // 2
        self.branches = nn.ModuleDict()
        for level in self.levels:
            branch = nn.Sequential(
                nn.Conv2d(2 * channels, channels, kernel_size, padding=padding),
                activation(),
                nn.Conv2d(channels, channels, kernel_size, padding=padding),
            )
            nn.init.zeros_(branch[2].weight)
            nn.init.zeros_(branch[2].bias)
            self.branches[f"level{level}"] = branch

    @classmethod
    def from_config(cls, config: VisConfig) -> "ResFuser":
        return cls(config.model.channels, config.model.levels)

    def fuse(self, prev: PyramidFeatures, curr: PyramidFeatures) -> PyramidFeatures:
        """
        Output level i = f_i(concat(prev_i, curr_i)) + curr_i.

        Raises:
            ShapeError: the two pyramids differ at some level
        """
        if list(prev.levels) != list(curr.levels):
            raise ShapeError(f"pyramid levels differ: {list(prev.levels)} vs {list(curr.levels)}")
        fused = {}
        for level, current in curr.levels.items():
            previous = prev.levels[level]
            if previous.shape != current.shape:
                raise ShapeError(f"level {level}: previous grid {tuple(previous.shape)} "
                                 f"does not match current grid {tuple(current.shape)}")
            key = f"level{level}"
            if key not in self.branches:
                raise ShapeError(f"level {level} has no residual branch; configured levels are {list(self.levels)}")
            fused[level] = self.branches[key](torch.cat([previous, current], dim=1)) + current
        return PyramidFeatures(fused)

    def fuse_first_frame(self, curr: PyramidFeatures) -> PyramidFeatures:
        """At clip start the previous frame is the current frame."""
        return self.fuse(curr, curr)

    def forward(self, prev: PyramidFeatures, curr: PyramidFeatures) -> PyramidFeatures:
        return self.fuse(prev, curr)
