"""
Single-Frame Instance Segmentation - Solution Implementation

Description: Toy convolutional backbone with a top-down feature pyramid, an anchor-free
dense head (class / ltrb box / centerness), RoI Align pooling with size-based level
selection, a spatial-attention mask branch, target assignment and the detection losses.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn
from torchvision import ops

from app.utils.config import VisConfig
from app.utils.errors import ContractError, ShapeError
from app.vision.synthdata.synthdata import GroundTruth

logger = logging.getLogger(__name__)

CLS_PRIOR = 0.01
ROI_SAMPLING_RATIO = 2


@dataclass
class PyramidFeatures:
    """Feature grids keyed by pyramid level; each grid is (B, C, H / 2**level, W / 2**level)."""

    levels: Dict[int, Tensor]

    def __post_init__(self) -> None:
        keys = list(self.levels)
        if not keys:
            raise ShapeError("a pyramid needs at least one level")
        if any(b != a + 1 for a, b in zip(keys, keys[1:])):
            raise ShapeError(f"pyramid levels must be consecutive and increasing, got {keys}")
        channels = {grid.shape[1] for grid in self.levels.values()}
        if len(channels) != 1:
            raise ShapeError(f"all pyramid levels must share one channel count, got {sorted(channels)}")

    @property
    def strides(self) -> Dict[int, int]:
        return {level: 2 ** level for level in self.levels}

    @property
    def channels(self) -> int:
        return next(iter(self.levels.values())).shape[1]

    def geometry(self) -> Dict[int, Tuple[int, ...]]:
        return {level: tuple(grid.shape) for level, grid in self.levels.items()}


@dataclass
class PyramidGeometry:
    image_size: Tuple[int, int]
    levels: Tuple[int, ...]
    scale_ranges: Dict[int, Tuple[float, float]]

    @property
    def strides(self) -> Dict[int, int]:
        return {level: 2 ** level for level in self.levels}

    def grid_size(self, level: int) -> Tuple[int, int]:
        stride = 2 ** level
        return self.image_size[0] // stride, self.image_size[1] // stride


@dataclass
class DenseHeadOutput:
    """Per-level head outputs: class logits (B,K,h,w), ltrb distances in pixels (B,4,h,w), centerness logits (B,1,h,w)."""

    cls_logits: Dict[int, Tensor]
    box_regression: Dict[int, Tensor]
    centerness: Dict[int, Tensor]

    def flatten(self) -> Tuple[Tensor, Tensor, Tensor]:
        """Concatenate levels in order, locations row-major: (B, L, K), (B, L, 4), (B, L)."""
        cls = torch.cat([_to_rows(self.cls_logits[lv]) for lv in self.cls_logits], dim=1)
        box = torch.cat([_to_rows(self.box_regression[lv]) for lv in self.cls_logits], dim=1)
        ctr = torch.cat([_to_rows(self.centerness[lv]) for lv in self.cls_logits], dim=1).squeeze(-1)
        return cls, box, ctr


@dataclass
class DenseTargets:
    """Flattened per-location targets; labels use 0 for background and category ids otherwise."""

    labels: Tensor
    ltrb: Tensor
    centerness: Tensor
    positive: Tensor
    level_sizes: List[int] = field(default_factory=list)

    @property
    def num_positive(self) -> int:
        return int(self.positive.sum())

    @classmethod
    def stack(cls, targets: Sequence["DenseTargets"]) -> "DenseTargets":
        return cls(
            labels=torch.stack([t.labels for t in targets]),
            ltrb=torch.stack([t.ltrb for t in targets]),
            centerness=torch.stack([t.centerness for t in targets]),
            positive=torch.stack([t.positive for t in targets]),
            level_sizes=list(targets[0].level_sizes),
        )


@dataclass
class Detection:
    box: Tuple[float, float, float, float]
    category_id: int
    score: float
    level: int = 0
    roi_feature: Optional[Tensor] = None
    mask_local: Optional[Tensor] = None
    state: Optional[Tensor] = None

    def __post_init__(self) -> None:
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2):
            raise ContractError(f"degenerate detection box {self.box}")


def _to_rows(grid: Tensor) -> Tensor:
    batch, channels = grid.shape[:2]
    return grid.permute(0, 2, 3, 1).reshape(batch, -1, channels)


def _conv(in_channels: int, out_channels: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(in_channels, out_channels, kernel_size=3, stride=stride, padding=1)


class Scale(nn.Module):
    def __init__(self, init_value: float = 1.0):
        super().__init__()
        self.scale = nn.Parameter(torch.tensor([init_value]))

    def forward(self, x: Tensor) -> Tensor:
        return x * self.scale


class ToyBackbone(nn.Module):
    """A stride-2 stem followed by one stride-2 stage per level; returns the maps of `levels`."""

    def __init__(self, channels: int, levels: Sequence[int]):
        super().__init__()
        self.levels = tuple(levels)
        self.stem = nn.Sequential(_conv(3, channels, stride=2), nn.SiLU())
        self.stages = nn.ModuleList([
            nn.Sequential(_conv(channels, channels, stride=2), nn.SiLU(), _conv(channels, channels), nn.SiLU())
            for _ in range(2, self.levels[-1] + 1)
        ])

    def forward(self, x: Tensor) -> Dict[int, Tensor]:
        x = self.stem(x)
        outputs = {}
        for level, stage in enumerate(self.stages, start=2):
            x = stage(x)
            if level in self.levels:
                outputs[level] = x
        return outputs


class FeaturePyramid(nn.Module):
    """Top-down pathway: 1x1 laterals, nearest upsampling and a 3x3 smoothing conv per level."""

    def __init__(self, channels: int, levels: Sequence[int]):
        super().__init__()
        self.levels = tuple(levels)
        self.lateral = nn.ModuleList([nn.Conv2d(channels, channels, kernel_size=1) for _ in self.levels])
        self.output = nn.ModuleList([_conv(channels, channels) for _ in self.levels])

    def forward(self, features: Dict[int, Tensor]) -> Dict[int, Tensor]:
        laterals = [conv(features[level]) for conv, level in zip(self.lateral, self.levels)]
        for i in range(len(laterals) - 2, -1, -1):
            laterals[i] = laterals[i] + F.interpolate(laterals[i + 1], size=laterals[i].shape[-2:], mode="nearest")
        return {level: conv(x) for level, conv, x in zip(self.levels, self.output, laterals)}


class DenseHead(nn.Module):
    """
    Shared class and box towers over all levels.

    Box distances are softplus(raw * scale_level) * stride, so they are non-negative pixels.
    """

    def __init__(self, channels: int, num_classes: int, num_convs: int, levels: Sequence[int]):
        super().__init__()
        self.levels = tuple(levels)
        cls_tower, box_tower = [], []
        for _ in range(num_convs):
            cls_tower += [_conv(channels, channels), nn.SiLU()]
            box_tower += [_conv(channels, channels), nn.SiLU()]
        self.cls_tower = nn.Sequential(*cls_tower)
        self.box_tower = nn.Sequential(*box_tower)
        self.cls_logits = _conv(channels, num_classes)
        self.bbox_pred = _conv(channels, 4)
        self.centerness = _conv(channels, 1)
        self.scales = nn.ModuleList([Scale(1.0) for _ in self.levels])

        for layer in (self.cls_logits, self.bbox_pred, self.centerness):
            nn.init.normal_(layer.weight, std=0.01)
            nn.init.zeros_(layer.bias)
        nn.init.constant_(self.cls_logits.bias, -math.log((1 - CLS_PRIOR) / CLS_PRIOR))

    def forward(self, features: Dict[int, Tensor]) -> DenseHeadOutput:
        cls_logits, boxes, centerness = {}, {}, {}
        for level, scale in zip(self.levels, self.scales):
            x = features[level]
            cls_feat, box_feat = self.cls_tower(x), self.box_tower(x)
            cls_logits[level] = self.cls_logits(cls_feat)
            boxes[level] = F.softplus(scale(self.bbox_pred(box_feat))) * (2 ** level)
            centerness[level] = self.centerness(box_feat)
        return DenseHeadOutput(cls_logits, boxes, centerness)


class SpatialAttentionMaskHead(nn.Module):
    """Mask branch: conv tower, spatial attention from channel max/mean, 2x deconv, per-class logits."""

    def __init__(self, channels: int, num_classes: int, num_convs: int):
        super().__init__()
        tower = []
        for _ in range(num_convs):
            tower += [_conv(channels, channels), nn.SiLU()]
        self.tower = nn.Sequential(*tower)
        self.attention_conv = nn.Conv2d(2, 1, kernel_size=3, padding=1)
        self.upsample = nn.ConvTranspose2d(channels, channels, kernel_size=2, stride=2)
        self.predictor = nn.Conv2d(channels, num_classes, kernel_size=1)

    def attention(self, x: Tensor) -> Tensor:
        pooled = torch.cat([x.amax(dim=1, keepdim=True), x.mean(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.attention_conv(pooled))

    def forward(self, roi_features: Tensor) -> Tensor:
        x = self.tower(roi_features)
        x = x * self.attention(x)
        x = F.silu(self.upsample(x))
        return self.predictor(x)


class PerceptionModel(nn.Module):
    """Backbone, pyramid, dense head and mask branch behind the per-frame operations."""

    def __init__(self, channels: int = 32, num_classes: int = 4, levels: Sequence[int] = (3, 4, 5),
                 roi_size: int = 14, head_convs: int = 2, mask_convs: int = 2,
                 roi_canonical_size: float = 64.0):
        super().__init__()
        self.levels = tuple(levels)
        self.num_classes = num_classes
        self.roi_size = roi_size
        self.roi_canonical_size = roi_canonical_size
        self.backbone = ToyBackbone(channels, self.levels)
        self.fpn = FeaturePyramid(channels, self.levels)
        self.head = DenseHead(channels, num_classes, head_convs, self.levels)
        self.mask_head = SpatialAttentionMaskHead(channels, num_classes, mask_convs)

    @classmethod
    def from_config(cls, config: VisConfig) -> "PerceptionModel":
        m = config.model
        return cls(m.channels, m.num_classes, m.levels, m.roi_size, m.head_convs, m.mask_convs,
                   m.roi_canonical_size)

    @property
    def max_stride(self) -> int:
        return 2 ** self.levels[-1]

    def extract_pyramid(self, frames: Tensor) -> PyramidFeatures:
        """
        Args:
            frames: (B, 3, H, W) batch, H and W multiples of the coarsest stride

        Returns:
            PyramidFeatures over the configured levels
        """
        if frames.ndim != 4 or frames.shape[1] != 3:
            raise ShapeError(f"frames must be (B, 3, H, W), got {tuple(frames.shape)}")
        height, width = frames.shape[-2:]
        if height % self.max_stride or width % self.max_stride:
            raise ShapeError(f"frame size {height}x{width} must be a multiple of {self.max_stride}")
        return PyramidFeatures(self.fpn(self.backbone(frames)))

    def detect(self, features: PyramidFeatures) -> DenseHeadOutput:
        return self.head(features.levels)

    def pool(self, features: PyramidFeatures, boxes: Tensor, batch_index: int = 0) -> Tensor:
        """RoI features (K, C, R, R) for image `batch_index`, each box read from its size-selected level."""
        channels = features.channels
        reference = next(iter(features.levels.values()))
        pooled = reference.new_zeros((boxes.shape[0], channels, self.roi_size, self.roi_size))
        if boxes.shape[0] == 0:
            return pooled
        assigned = roi_levels(boxes, self.levels, self.roi_canonical_size)
        for level in self.levels:
            index = torch.nonzero(assigned == level).flatten()
            if index.numel() == 0:
                continue
            grid = features.levels[level][batch_index]
            rows = [roi_align(grid, boxes[k], self.roi_size, 2 ** level) for k in index.tolist()]
            pooled = pooled.index_copy(0, index, torch.stack(rows))
        return pooled

    def mask_logits(self, roi_features: Tensor, category_ids: Sequence[int]) -> Tensor:
        """Logits (K, M, M) of each RoI's own category."""
        for category_id in category_ids:
            if not 1 <= int(category_id) <= self.num_classes:
                raise ContractError(f"unknown category id {category_id}; expected 1..{self.num_classes}")
        if roi_features.shape[0] == 0:
            size = 2 * self.roi_size
            return roi_features.new_zeros((0, size, size))
        logits = self.mask_head(roi_features)
        index = torch.as_tensor([int(c) - 1 for c in category_ids], device=logits.device)
        return logits[torch.arange(logits.shape[0], device=logits.device), index]

    def predict_masks(self, roi_features: Tensor, category_ids: Sequence[int]) -> Tensor:
        return torch.sigmoid(self.mask_logits(roi_features, category_ids))


def predict_mask(model: PerceptionModel, roi_feature: Tensor, category_id: int) -> Tensor:
    """M x M mask probabilities of one RoI for the requested category."""
    if roi_feature.ndim != 3:
        raise ShapeError(f"roi feature must be (C, R, R), got {tuple(roi_feature.shape)}")
    return model.predict_masks(roi_feature.unsqueeze(0), [category_id])[0]


def frames_to_tensor(frames: np.ndarray) -> Tensor:
    """(H, W, 3) or (T, H, W, 3) floats in [0, 1] to a (B, 3, H, W) float32 tensor."""
    array = np.asarray(frames, dtype=np.float32)
    if array.ndim == 3:
        array = array[None]
    if array.ndim != 4 or array.shape[-1] != 3:
        raise ShapeError(f"frames must be (H, W, 3) or (T, H, W, 3), got {array.shape}")
    return torch.from_numpy(np.ascontiguousarray(array.transpose(0, 3, 1, 2)))


def pyramid_geometry(config: VisConfig, height: int, width: int) -> PyramidGeometry:
    stride = config.model.max_stride
    if height % stride or width % stride:
        raise ShapeError(f"frame size {height}x{width} must be a multiple of {stride}")
    return PyramidGeometry((height, width), tuple(config.model.levels), config.scale_ranges())


def level_locations(geometry: PyramidGeometry, level: int) -> np.ndarray:
    """(h * w, 2) pixel coordinates (x, y) = (col, row) * stride in row-major order."""
    rows, cols = geometry.grid_size(level)
    stride = 2 ** level
    ys, xs = np.mgrid[0:rows, 0:cols]
    return np.stack([xs.ravel() * stride, ys.ravel() * stride], axis=1).astype(np.float64)


def assign_targets(gt: GroundTruth, geometry: PyramidGeometry) -> DenseTargets:
    """
    FCOS-style assignment for frame 0 of `gt`.

    A location is positive for a box when it lies strictly inside it and its largest
    ltrb distance falls in the level's (low, high] range; the smallest box wins overlaps.

    Time Complexity: O(L * N) for L locations and N objects
    Space Complexity: O(L * N)
    """
    instances = gt.instances(0)
    locations = np.concatenate([level_locations(geometry, level) for level in geometry.levels])
    ranges = np.concatenate([
        np.tile(geometry.scale_ranges[level], (len(level_locations(geometry, level)), 1))
        for level in geometry.levels
    ])
    level_sizes = [int(np.prod(geometry.grid_size(level))) for level in geometry.levels]
    num_locations = locations.shape[0]

    labels = np.zeros(num_locations, dtype=np.int64)
    ltrb = np.zeros((num_locations, 4))
    centerness = np.zeros(num_locations)
    if instances:
        boxes = np.array([inst.box for inst in instances], dtype=np.float64)
        xs, ys = locations[:, 0:1], locations[:, 1:2]
        deltas = np.stack([xs - boxes[:, 0], ys - boxes[:, 1], boxes[:, 2] - xs, boxes[:, 3] - ys], axis=2)
        inside = deltas.min(axis=2) > 0
        extent = deltas.max(axis=2)
        in_range = (extent > ranges[:, 0:1]) & (extent <= ranges[:, 1:2])
        areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
        candidate_area = np.where(inside & in_range, areas[None, :], np.inf)
        matched = candidate_area.argmin(axis=1)
        positive = np.isfinite(candidate_area.min(axis=1))

        chosen = deltas[np.arange(num_locations), matched]
        categories = np.array([inst.category_id for inst in instances])
        labels[positive] = categories[matched[positive]]
        ltrb[positive] = chosen[positive]
        lr, tb = chosen[positive][:, [0, 2]], chosen[positive][:, [1, 3]]
        centerness[positive] = np.sqrt((lr.min(axis=1) / lr.max(axis=1)) * (tb.min(axis=1) / tb.max(axis=1)))

    return DenseTargets(
        labels=torch.from_numpy(labels),
        ltrb=torch.from_numpy(ltrb).float(),
        centerness=torch.from_numpy(centerness).float(),
        positive=torch.from_numpy(labels > 0),
        level_sizes=level_sizes,
    )


def decode_detections(dense: DenseHeadOutput, image_size: Tuple[int, int], score_threshold: float = 0.05,
                      nms_iou: float = 0.5, max_detections: int = 20, pre_nms_topk: int = 1000,
                      batch_index: int = 0) -> List[Detection]:
    """
    Turn dense outputs of one image into scored, clipped, NMS-filtered boxes.

    Candidates need class probability above `score_threshold`; their score is
    sqrt(class_prob * centerness_prob). NMS runs per category.
    """
    height, width = image_size
    boxes_all, scores_all, classes_all, levels_all = [], [], [], []
    with torch.no_grad():
        for level in dense.cls_logits:
            stride = 2 ** level
            cls_prob = torch.sigmoid(_to_rows(dense.cls_logits[level])[batch_index])
            ltrb = _to_rows(dense.box_regression[level])[batch_index]
            ctr_prob = torch.sigmoid(_to_rows(dense.centerness[level])[batch_index]).squeeze(-1)
            rows, cols = dense.cls_logits[level].shape[-2:]
            ys, xs = torch.meshgrid(torch.arange(rows), torch.arange(cols), indexing="ij")
            points = torch.stack([xs.flatten(), ys.flatten()], dim=1).to(ltrb.dtype) * stride

            keep = cls_prob > score_threshold
            location_idx, class_idx = torch.nonzero(keep, as_tuple=True)
            if location_idx.numel() == 0:
                continue
            scores = torch.sqrt(cls_prob[location_idx, class_idx] * ctr_prob[location_idx])
            if scores.numel() > pre_nms_topk:
                scores, order = scores.topk(pre_nms_topk)
                location_idx, class_idx = location_idx[order], class_idx[order]
            p, d = points[location_idx], ltrb[location_idx]
            boxes = torch.stack([p[:, 0] - d[:, 0], p[:, 1] - d[:, 1], p[:, 0] + d[:, 2], p[:, 1] + d[:, 3]], dim=1)
            boxes = ops.clip_boxes_to_image(boxes, (height, width))
            boxes_all.append(boxes)
            scores_all.append(scores)
            classes_all.append(class_idx + 1)
            levels_all.append(torch.full_like(class_idx, level))

        if not boxes_all:
            return []
        boxes, scores = torch.cat(boxes_all), torch.cat(scores_all)
        classes, levels = torch.cat(classes_all), torch.cat(levels_all)
        valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
        boxes, scores, classes, levels = boxes[valid], scores[valid], classes[valid], levels[valid]
        keep = ops.batched_nms(boxes.double(), scores.double(), classes, nms_iou)[:max_detections]

    return [
        Detection(tuple(float(v) for v in boxes[k].tolist()), int(classes[k]), float(scores[k]), int(levels[k]))
        for k in keep.tolist()
    ]


def roi_align(feature: Tensor, box, output_size: int = 14, stride: int = 1) -> Tensor:
    """
    Bilinear RoI pooling of one box from a (C, h, w) grid.

    The box is in input pixels and is divided by `stride`; each output cell averages
    2 x 2 regularly spaced samples.
    """
    box_t = torch.as_tensor(box, dtype=feature.dtype, device=feature.device).reshape(4)
    if not bool(box_t[2] > box_t[0]) or not bool(box_t[3] > box_t[1]):
        raise ContractError(f"degenerate box {box_t.tolist()}")
    rois = torch.cat([box_t.new_zeros(1), box_t]).unsqueeze(0)
    pooled = ops.roi_align(feature.unsqueeze(0), rois, output_size=output_size, spatial_scale=1.0 / stride,
                           sampling_ratio=ROI_SAMPLING_RATIO, aligned=False)
    return pooled[0]


def roi_levels(boxes: Tensor, levels: Sequence[int], canonical_size: float = 64.0) -> Tensor:
    """Level per box: floor(min_level + log2(sqrt(area) / canonical_size)), clamped to the pyramid."""
    widths = (boxes[:, 2] - boxes[:, 0]).clamp(min=1e-6)
    heights = (boxes[:, 3] - boxes[:, 1]).clamp(min=1e-6)
    raw = torch.floor(levels[0] + torch.log2(torch.sqrt(widths * heights) / canonical_size))
    return raw.clamp(min=levels[0], max=levels[-1]).long()


def crop_mask_targets(mask: np.ndarray, boxes: Tensor, mask_size: int) -> Tensor:
    """(K, M, M) binary targets: the gt mask pooled into each box, thresholded at 0.5."""
    if boxes.shape[0] == 0:
        return torch.zeros((0, mask_size, mask_size))
    grid = torch.from_numpy(np.asarray(mask, dtype=np.float32))[None]
    crops = torch.stack([roi_align(grid, box, mask_size, 1)[0] for box in boxes.float()])
    return (crops >= 0.5).float()


def _ltrb_iou(pred: Tensor, target: Tensor) -> Tensor:
    pred_area = (pred[:, 0] + pred[:, 2]) * (pred[:, 1] + pred[:, 3])
    target_area = (target[:, 0] + target[:, 2]) * (target[:, 1] + target[:, 3])
    w_inter = torch.min(pred[:, 0], target[:, 0]) + torch.min(pred[:, 2], target[:, 2])
    h_inter = torch.min(pred[:, 1], target[:, 1]) + torch.min(pred[:, 3], target[:, 3])
    inter = w_inter * h_inter
    return inter / (pred_area + target_area - inter)


def detection_losses(dense: DenseHeadOutput, targets: DenseTargets, mask_logits: Optional[Tensor] = None,
                     mask_targets: Optional[Tensor] = None, focal_alpha: float = 0.25,
                     focal_gamma: float = 2.0) -> Dict[str, Tensor]:
    """
    Args:
        dense: head outputs for a batch of B images
        targets: DenseTargets stacked to (B, L, ...)
        mask_logits: (K, M, M) logits of matched RoIs, or None
        mask_targets: (K, M, M) binary targets aligned with mask_logits

    Returns:
        {"cls", "box", "ctr", "mask"} non-negative scalars; cls, box and ctr are
        normalized by the positive count, mask is a mean over RoI pixels
    """
    cls, box, ctr = dense.flatten()
    labels = targets.labels.to(cls.device)
    if labels.ndim == 1:
        labels = labels.unsqueeze(0)
    positive = labels > 0
    num_pos = max(int(positive.sum()), 1)

    one_hot = torch.zeros_like(cls)
    pos_b, pos_l = torch.nonzero(positive, as_tuple=True)
    one_hot[pos_b, pos_l, labels[positive] - 1] = 1.0
    loss_cls = ops.sigmoid_focal_loss(cls, one_hot, alpha=focal_alpha, gamma=focal_gamma, reduction="sum") / num_pos

    if pos_b.numel():
        target_ltrb = targets.ltrb.to(box).reshape(box.shape)[positive]
        target_ctr = targets.centerness.to(ctr).reshape(ctr.shape)[positive]
        iou = _ltrb_iou(box[positive], target_ltrb)
        loss_box = -torch.log(iou.clamp(min=torch.finfo(iou.dtype).eps)).sum() / num_pos
        loss_ctr = F.binary_cross_entropy_with_logits(ctr[positive], target_ctr, reduction="sum") / num_pos
    else:
        loss_box = box.sum() * 0.0
        loss_ctr = ctr.sum() * 0.0

    if mask_logits is not None and mask_logits.numel():
        loss_mask = F.binary_cross_entropy_with_logits(mask_logits, mask_targets.to(mask_logits))
    else:
        loss_mask = cls.sum() * 0.0 if mask_logits is None else mask_logits.sum() * 0.0

    return {"cls": loss_cls, "box": loss_box, "ctr": loss_ctr, "mask": loss_mask}
