"""
Synthetic Multi-Object Video Generator - Solution Implementation

Description: Deterministic moving-shape clips with occlusion, exit and re-entry events,
instance-ID ground truth, mask run-length encoding, static-image pseudo-pair
augmentation (random affine + motion blur) and the on-disk dataset layout.
"""

import functools
import json
import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from scipy import ndimage

from app.utils.errors import ContractError, FormatError, ShapeError

logger = logging.getLogger(__name__)

CATEGORIES: Dict[int, str] = {1: "circle", 2: "square", 3: "triangle", 4: "ellipse"}
ELLIPSE_ASPECT = 0.6
ANNOTATIONS_FILE = "annotations.json"
EXIT_MARGIN = 4.0
CLIP_CACHE_SIZE = 8
JITTER_STD = 0.5


class MotionModel(str, Enum):
    LINEAR = "linear"
    LINEAR_PLUS_JITTER = "linear_plus_jitter"


class ClipSpec(BaseModel):
    """Parameters of one synthetic clip; the clip is a pure function of these."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    num_frames: int = Field(8, ge=2)
    height: int = Field(128, ge=64)
    width: int = Field(128, ge=64)
    num_objects: int = Field(3, ge=1)
    category_set: Tuple[int, ...] = (1, 2, 3, 4)
    motion_model: MotionModel = MotionModel.LINEAR
    occlusion_rate: float = Field(0.0, ge=0.0, le=1.0)
    exit_reentry: bool = False
    seed: int = Field(0, ge=0, lt=2 ** 64)
    radius_range: Tuple[float, float] = (0.10, 0.16)
    max_speed: float = Field(0.04, ge=0.0)

    @field_validator("category_set")
    @classmethod
    def _known_categories(cls, categories: Tuple[int, ...]) -> Tuple[int, ...]:
        if not categories:
            raise ValueError("category_set must not be empty")
        unknown = sorted(set(categories) - set(CATEGORIES))
        if unknown:
            raise ValueError(f"category_set contains unknown category ids {unknown}")
        return categories

    @field_validator("radius_range")
    @classmethod
    def _ordered_radii(cls, radii: Tuple[float, float]) -> Tuple[float, float]:
        low, high = radii
        if not 0.0 < low <= high <= 0.25:
            raise ValueError(f"radius_range must satisfy 0 < low <= high <= 0.25, got {radii}")
        return radii

    @model_validator(mode="after")
    def _room_for_reentry(self) -> "ClipSpec":
        if self.exit_reentry and self.num_frames < 3:
            raise ValueError("num_frames must be >= 3 when exit_reentry is set")
        return self


class CorpusSpec(ClipSpec):
    """ClipSpec plus the number of clips; clip i uses seed ^ i."""

    num_clips: int = Field(1, ge=1)


@dataclass
class VideoClip:
    clip_id: str
    frames: np.ndarray  # (T, H, W, 3) float32 in [0, 1]

    def __post_init__(self) -> None:
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ShapeError(f"clip {self.clip_id}: frames must be (T, H, W, 3), got {self.frames.shape}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def size(self) -> Tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]


@dataclass
class TrackAnnotation:
    track_id: int
    category_id: int
    present: List[bool]


@dataclass
class Instance:
    """One visible object in one frame."""

    track_id: int
    category_id: int
    box: Tuple[float, float, float, float]
    mask: np.ndarray


@dataclass
class GroundTruth:
    masks: np.ndarray  # (T, H, W) integer instance ids, 0 = background
    objects: List[TrackAnnotation]

    def __post_init__(self) -> None:
        if self.masks.ndim != 3:
            raise ShapeError(f"instance masks must be (T, H, W), got {self.masks.shape}")
        track_ids = [obj.track_id for obj in self.objects]
        if len(set(track_ids)) != len(track_ids):
            raise ContractError(f"track ids must be unique, got {track_ids}")
        stray = set(np.unique(self.masks).tolist()) - {0} - set(track_ids)
        if stray:
            raise ContractError(f"instance masks contain ids without an object entry: {sorted(stray)}")
        for obj in self.objects:
            if len(obj.present) != self.masks.shape[0]:
                raise ContractError(f"track {obj.track_id}: presence flags do not cover {self.masks.shape[0]} frames")

    @property
    def num_frames(self) -> int:
        return self.masks.shape[0]

    def instances(self, t: int) -> List[Instance]:
        """Visible objects of frame t with tight boxes, ordered by track id."""
        found = []
        for obj in sorted(self.objects, key=lambda o: o.track_id):
            mask = self.masks[t] == obj.track_id
            if mask.any():
                found.append(Instance(obj.track_id, obj.category_id, mask_to_box(mask), mask))
        return found

    def frame(self, t: int) -> "GroundTruth":
        objects = [TrackAnnotation(o.track_id, o.category_id, [o.present[t]]) for o in self.objects]
        return GroundTruth(self.masks[t:t + 1].copy(), objects)


@dataclass
class RleMask:
    counts: List[int]
    size: Tuple[int, int]

    @property
    def area(self) -> int:
        return int(sum(self.counts[1::2]))

    def to_dict(self) -> Dict:
        return {"counts": list(self.counts), "size": list(self.size)}

    @classmethod
    def from_dict(cls, data: Dict) -> "RleMask":
        return cls([int(c) for c in data["counts"]], (int(data["size"][0]), int(data["size"][1])))


class AugmentParams(BaseModel):
    """Sampling ranges of the pseudo-pair augmentation (degrees / fractions of a side / pixels)."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    rotation: Tuple[float, float] = (-10.0, 10.0)
    translate_x: Tuple[float, float] = (-0.1, 0.1)
    translate_y: Tuple[float, float] = (-0.1, 0.1)
    scale: Tuple[float, float] = (0.9, 1.1)
    shear: Tuple[float, float] = (-5.0, 5.0)
    blur_length: Tuple[int, int] = (3, 9)


@dataclass(frozen=True)
class AffineSample:
    angle: float  # degrees
    tx: float  # pixels
    ty: float
    scale: float
    shear: float  # degrees
    blur_length: int


@dataclass
class ScriptedObject:
    """A shape with an explicit per-frame trajectory."""

    track_id: int
    category_id: int
    radius: float
    centers: np.ndarray  # (T, 2) as (x, y)
    angles: np.ndarray  # (T,) radians
    color: np.ndarray  # (3,) in [0, 1]
    stripe_period: float = 6.0


def shape_area(category_id: int, radius: float) -> float:
    """Analytic area of a shape with circumradius `radius`."""
    if category_id == 1:
        return math.pi * radius ** 2
    if category_id == 2:
        return 2.0 * radius ** 2
    if category_id == 3:
        return 3.0 * math.sqrt(3.0) / 4.0 * radius ** 2
    if category_id == 4:
        return math.pi * ELLIPSE_ASPECT * radius ** 2
    raise ContractError(f"unknown category id {category_id}")


def shape_mask(category_id: int, center: np.ndarray, radius: float, angle: float,
               xs: np.ndarray, ys: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Rasterize a shape by testing pixel centers.

    Returns:
        (inside mask, local u coordinate used for the stripe texture)
    """
    dx, dy = xs - center[0], ys - center[1]
    c, s = math.cos(angle), math.sin(angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    if category_id == 1:
        inside = u ** 2 + v ** 2 <= radius ** 2
    elif category_id == 2:
        half = radius / math.sqrt(2.0)
        inside = (np.abs(u) <= half) & (np.abs(v) <= half)
    elif category_id == 3:
        inside = np.ones_like(u, dtype=bool)
        for normal in (math.radians(270.0), math.radians(30.0), math.radians(150.0)):
            inside &= u * math.cos(normal) + v * math.sin(normal) <= radius / 2.0
    elif category_id == 4:
        inside = (u / radius) ** 2 + (v / (ELLIPSE_ASPECT * radius)) ** 2 <= 1.0
    else:
        raise ContractError(f"unknown category id {category_id}")
    return inside, u


def mask_to_box(mask: np.ndarray) -> Tuple[float, float, float, float]:
    """Tight box (x1, y1, x2, y2) in pixel-edge coordinates, so x2 - x1 is the width."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ContractError("cannot box an empty mask")
    return float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1)


def _background(height: int, width: int, level: float) -> np.ndarray:
    ramp = np.linspace(0.0, 0.08, width, dtype=np.float64)
    plane = np.broadcast_to(level + ramp[None, :], (height, width))
    return np.repeat(plane[:, :, None], 3, axis=2).copy()


def render_clip(clip_id: str, height: int, width: int, objects: Sequence[ScriptedObject],
                background_level: float = 0.12) -> Tuple[VideoClip, GroundTruth]:
    """
    Paint scripted objects far-to-near (list order); nearer objects own occluded pixels.

    Time Complexity: O(T * K * H * W)
    Space Complexity: O(T * H * W)
    """
    num_frames = objects[0].centers.shape[0] if objects else 1
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64) + 0.5
    base = _background(height, width, background_level)
    frames = np.empty((num_frames, height, width, 3), dtype=np.uint8)
    masks = np.zeros((num_frames, height, width), dtype=np.int32)

    for t in range(num_frames):
        canvas = base.copy()
        ids = masks[t]
        for obj in objects:
            inside, u = shape_mask(obj.category_id, obj.centers[t], obj.radius, obj.angles[t], xs, ys)
            if not inside.any():
                continue
            shade = 0.75 + 0.25 * (np.floor(u[inside] / obj.stripe_period) % 2)
            canvas[inside] = obj.color[None, :] * shade[:, None]
            ids[inside] = obj.track_id
        frames[t] = np.rint(np.clip(canvas, 0.0, 1.0) * 255.0).astype(np.uint8)

    annotations = [
        TrackAnnotation(obj.track_id, obj.category_id, (masks == obj.track_id).any(axis=(1, 2)).tolist())
        for obj in sorted(objects, key=lambda o: o.track_id)
    ]
    clip = VideoClip(clip_id, frames.astype(np.float32) / 255.0)
    return clip, GroundTruth(masks, annotations)


def _place(radii: np.ndarray, height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    """Non-overlapping initial centers, fully inside the frame when possible."""
    centers = np.zeros((len(radii), 2))
    for k, radius in enumerate(radii):
        candidate = None
        for _ in range(200):
            candidate = np.array([rng.uniform(radius + 2, width - radius - 2),
                                  rng.uniform(radius + 2, height - radius - 2)])
            gaps = np.linalg.norm(centers[:k] - candidate, axis=1) - radii[:k] - radius
            if np.all(gaps > 2.0):
                break
        else:
            logger.warning("could not place object %d without overlap; accepting overlap", k)
        centers[k] = candidate
    return centers


def _bounce_path(start: np.ndarray, velocity: np.ndarray, radius: float,
                 num_frames: int, height: int, width: int) -> np.ndarray:
    path = np.empty((num_frames, 2))
    pos, vel = start.astype(np.float64).copy(), velocity.astype(np.float64).copy()
    for t in range(num_frames):
        path[t] = pos
        pos = pos + vel
        for axis, limit in ((0, width), (1, height)):
            low, high = radius, limit - radius
            if pos[axis] < low:
                pos[axis], vel[axis] = 2 * low - pos[axis], -vel[axis]
            elif pos[axis] > high:
                pos[axis], vel[axis] = 2 * high - pos[axis], -vel[axis]
    return path


def _exit_path(start: np.ndarray, radius: float, num_frames: int, width: int) -> np.ndarray:
    """Leave through the nearer side, stay out, come back to the start by the last frame."""
    if num_frames < 3:
        raise ContractError(f"num_frames must be >= 3 to exit and re-enter, got {num_frames}")
    t_out = max(1, num_frames // 3)
    t_back = max(t_out, num_frames - 1 - num_frames // 3)
    x_out = -radius - EXIT_MARGIN if start[0] < width / 2 else width + radius + EXIT_MARGIN
    path = np.empty((num_frames, 2))
    for t in range(num_frames):
        if t <= t_out:
            frac = t / t_out
        elif t <= t_back:
            frac = 1.0
        else:
            frac = 1.0 - (t - t_back) / (num_frames - 1 - t_back)
        path[t] = (start[0] + frac * (x_out - start[0]), start[1])
    return path


def generate_clip(spec: ClipSpec, clip_id: Optional[str] = None) -> Tuple[VideoClip, GroundTruth]:
    """
    Render one clip; a deterministic function of the spec (seed included).

    Args:
        spec: validated clip parameters
        clip_id: identifier, defaults to "clip-<seed>"

    Returns:
        (VideoClip, GroundTruth)
    """
    rng = np.random.default_rng(spec.seed)
    n, T, H, W = spec.num_objects, spec.num_frames, spec.height, spec.width
    side = min(H, W)

    radii = rng.uniform(spec.radius_range[0] * side, spec.radius_range[1] * side, size=n)
    categories = rng.choice(np.asarray(spec.category_set), size=n)
    colors = rng.uniform(0.3, 1.0, size=(n, 3))
    angles0 = rng.uniform(0.0, 2 * math.pi, size=n)
    spins = rng.uniform(-0.05, 0.05, size=n)
    starts = _place(radii, H, W, rng)
    headings = rng.uniform(0.0, 2 * math.pi, size=n)
    speeds = rng.uniform(0.3, 1.0, size=n) * spec.max_speed * side
    depth = list(rng.permutation(n))
    steer = rng.random(n) < spec.occlusion_rate
    partners = [int(rng.integers(k)) if k > 0 else 0 for k in range(n)]
    exiter = int(rng.integers(n)) if spec.exit_reentry else None

    meet = max(1, (T - 1) // 2)
    paths: List[np.ndarray] = []
    for k in range(n):
        if k == exiter:
            paths.append(_exit_path(starts[k], radii[k], T, W))
            continue
        velocity = speeds[k] * np.array([math.cos(headings[k]), math.sin(headings[k])])
        if steer[k] and k > 0:
            velocity = (paths[partners[k]][min(meet, T - 1)] - starts[k]) / meet
        paths.append(_bounce_path(starts[k], velocity, radii[k], T, H, W))

    if spec.motion_model is MotionModel.LINEAR_PLUS_JITTER:
        paths = [path + rng.normal(0.0, JITTER_STD, size=path.shape) for path in paths]

    if exiter is not None:
        depth.remove(exiter)
        depth.append(exiter)

    frames_idx = np.arange(T)
    objects = [
        ScriptedObject(
            track_id=k + 1,
            category_id=int(categories[k]),
            radius=float(radii[k]),
            centers=paths[k],
            angles=angles0[k] + spins[k] * frames_idx,
            color=colors[k],
        )
        for k in depth
    ]
    return render_clip(clip_id or f"clip-{spec.seed}", H, W, objects)


def generate_corpus(spec: ClipSpec, num_clips: int) -> List[Tuple[VideoClip, GroundTruth]]:
    """Clip i is generated from seed ^ i and named clip%04d."""
    corpus = []
    for index in range(num_clips):
        clip_spec = spec.model_copy(update={"seed": spec.seed ^ index})
        corpus.append(generate_clip(clip_spec, clip_id=f"clip{index:04d}"))
    logger.info("generated %d clips of %d frames", num_clips, spec.num_frames)
    return corpus


def _linear_path(start: Tuple[float, float], end: Tuple[float, float], num_frames: int) -> np.ndarray:
    return np.linspace(np.asarray(start, dtype=np.float64), np.asarray(end, dtype=np.float64), num_frames)


def crossing_clip(size: int = 128, num_frames: int = 8, clip_id: str = "crossing") -> Tuple[VideoClip, GroundTruth]:
    """Two shapes swap sides along one row, the square passing in front of the circle."""
    radius = 0.14 * size
    row = size / 2
    left, right = (radius + 4, row), (size - radius - 4, row)
    objects = [
        ScriptedObject(1, 1, radius, _linear_path(left, right, num_frames), np.zeros(num_frames),
                       np.array([0.9, 0.3, 0.3])),
        ScriptedObject(2, 2, radius, _linear_path(right, left, num_frames), np.zeros(num_frames),
                       np.array([0.3, 0.4, 0.9])),
    ]
    return render_clip(clip_id, size, size, objects)


def reentry_clip(size: int = 128, num_frames: int = 9, clip_id: str = "reentry") -> Tuple[VideoClip, GroundTruth]:
    """A triangle leaves through the right edge and returns while an ellipse stays put."""
    radius = 0.14 * size
    start = np.array([size - radius - 6, size * 0.3])
    anchor = np.tile([size * 0.3, size * 0.7], (num_frames, 1))
    objects = [
        ScriptedObject(1, 4, radius, anchor, np.zeros(num_frames), np.array([0.4, 0.9, 0.4])),
        ScriptedObject(2, 3, radius, _exit_path(start, radius, num_frames, size), np.zeros(num_frames),
                       np.array([0.9, 0.8, 0.2])),
    ]
    return render_clip(clip_id, size, size, objects)


def encode_rle(mask: np.ndarray) -> RleMask:
    """
    Row-major run-length encoding starting with a (possibly empty) background run.

    Time Complexity: O(H * W)
    Space Complexity: O(runs)
    """
    grid = np.asarray(mask) != 0
    flat = grid.ravel()
    if flat.size == 0:
        return RleMask([0], tuple(grid.shape))
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], changes, [flat.size]))
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts = [0] + counts
    return RleMask([int(c) for c in counts], (int(grid.shape[0]), int(grid.shape[1])))


def decode_rle(rle: RleMask) -> np.ndarray:
    """Inverse of encode_rle; returns a uint8 grid."""
    height, width = rle.size
    counts = np.asarray(rle.counts, dtype=np.int64)
    if np.any(counts < 0):
        raise FormatError(f"RLE counts must be non-negative, got {rle.counts}")
    if counts.sum() != height * width:
        raise FormatError(f"RLE counts sum to {int(counts.sum())}, expected {height} x {width} = {height * width}")
    values = (np.arange(len(counts)) % 2).astype(np.uint8)
    return np.repeat(values, counts).reshape(height, width)


def sample_affine(params: AugmentParams, rng: np.random.Generator, height: int, width: int) -> AffineSample:
    return AffineSample(
        angle=float(rng.uniform(*params.rotation)),
        tx=float(rng.uniform(*params.translate_x) * width),
        ty=float(rng.uniform(*params.translate_y) * height),
        scale=float(rng.uniform(*params.scale)),
        shear=float(rng.uniform(*params.shear)),
        blur_length=int(rng.integers(params.blur_length[0], params.blur_length[1] + 1)),
    )


def _motion_kernel(length: int, angle: float) -> np.ndarray:
    kernel = np.zeros((length, length))
    center = (length - 1) / 2.0
    for s in np.linspace(-center, center, 4 * length):
        kernel[int(round(center + s * math.sin(angle))), int(round(center + s * math.cos(angle)))] = 1.0
    return kernel / kernel.sum()


def warp_pair(image: np.ndarray, gt: GroundTruth, sample: AffineSample) -> Tuple[VideoClip, GroundTruth]:
    """
    Build a two-frame clip: the input and its affine-warped, motion-blurred copy.

    Masks are warped with nearest-neighbour sampling so ids stay exact.
    """
    height, width = image.shape[:2]
    if gt.masks.shape != (1, height, width):
        raise ShapeError(f"mask shape {gt.masks.shape} does not match image {image.shape}")

    theta, shear = math.radians(sample.angle), math.radians(sample.shear)
    rotation = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    forward_xy = rotation @ np.array([[1.0, math.tan(shear)], [0.0, 1.0]]) * sample.scale
    swap = np.array([[0.0, 1.0], [1.0, 0.0]])
    forward_rc = swap @ forward_xy @ swap
    inverse = np.linalg.inv(forward_rc)
    center = np.array([(height - 1) / 2.0, (width - 1) / 2.0])
    offset = center - inverse @ (center + np.array([sample.ty, sample.tx]))

    warped = np.stack([
        ndimage.affine_transform(image[..., c].astype(np.float64), inverse, offset=offset,
                                 order=1, mode="constant", cval=0.0)
        for c in range(3)
    ], axis=-1)
    if sample.blur_length > 1:
        kernel = _motion_kernel(sample.blur_length, math.atan2(sample.ty, sample.tx))
        warped = np.stack([ndimage.convolve(warped[..., c], kernel, mode="nearest") for c in range(3)], axis=-1)
    warped_ids = ndimage.affine_transform(gt.masks[0], inverse, offset=offset, order=0, mode="constant", cval=0)

    objects = []
    for obj in gt.objects:
        visible = bool((warped_ids == obj.track_id).any())
        objects.append(TrackAnnotation(obj.track_id, obj.category_id, [obj.present[0], visible]))
    frames = np.stack([image.astype(np.float32), np.clip(warped, 0.0, 1.0).astype(np.float32)])
    return VideoClip("pseudo-pair", frames), GroundTruth(np.stack([gt.masks[0], warped_ids]), objects)


def augment_pair(image: np.ndarray, gt: GroundTruth, params: AugmentParams,
                 seed: int) -> Tuple[VideoClip, GroundTruth]:
    """Simulate video motion from a static image; deterministic in the seed."""
    rng = np.random.default_rng(seed)
    sample = sample_affine(params, rng, image.shape[0], image.shape[1])
    return warp_pair(image, gt, sample)


class _ObjectRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")
    track_id: int = Field(ge=1)
    category_id: int
    present: List[bool]


class _ClipRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")
    id: str
    num_frames: int = Field(ge=1)
    height: int = Field(ge=1)
    width: int = Field(ge=1)
    objects: List[_ObjectRecord]

    @model_validator(mode="after")
    def _flags_cover_frames(self) -> "_ClipRecord":
        for obj in self.objects:
            if len(obj.present) != self.num_frames:
                raise ValueError(f"track {obj.track_id} has {len(obj.present)} presence flags for {self.num_frames} frames")
        return self


class _CategoryRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")
    id: int
    name: str


class _Annotations(BaseModel):
    model_config = ConfigDict(extra="forbid")
    categories: List[_CategoryRecord]
    clips: List[_ClipRecord]


def write_dataset(clips: Sequence[VideoClip], ground_truths: Sequence[GroundTruth],
                  root_dir: Union[str, Path]) -> Path:
    """Frames as 8-bit RGB PNG, instance ids as 16-bit PNG, metadata in annotations.json."""
    root = Path(root_dir)
    if len(clips) != len(ground_truths):
        raise ContractError(f"{len(clips)} clips but {len(ground_truths)} ground truths")
    records = []
    for clip, gt in zip(clips, ground_truths):
        if gt.masks.max(initial=0) > np.iinfo(np.uint16).max:
            raise ContractError(f"clip {clip.clip_id}: instance ids exceed 16 bits")
        clip_dir = root / "clips" / clip.clip_id
        (clip_dir / "frames").mkdir(parents=True, exist_ok=True)
        (clip_dir / "masks").mkdir(parents=True, exist_ok=True)
        pixels = np.rint(np.clip(clip.frames, 0.0, 1.0) * 255.0).astype(np.uint8)
        for t in range(clip.num_frames):
            Image.fromarray(pixels[t]).save(clip_dir / "frames" / f"{t:05d}.png")
            Image.fromarray(gt.masks[t].astype(np.uint16)).save(clip_dir / "masks" / f"{t:05d}.png")
        height, width = clip.size
        records.append({
            "id": clip.clip_id, "num_frames": clip.num_frames, "height": height, "width": width,
            "objects": [{"track_id": o.track_id, "category_id": o.category_id, "present": list(o.present)}
                        for o in gt.objects],
        })
    payload = {"categories": [{"id": k, "name": v} for k, v in CATEGORIES.items()], "clips": records}
    root.mkdir(parents=True, exist_ok=True)
    (root / ANNOTATIONS_FILE).write_text(json.dumps(payload, indent=2))
    return root


class SyntheticDataset:
    """Handle over a dataset directory; clips load lazily and the most recent few stay cached."""

    def __init__(self, root: Path, annotations: _Annotations, cache_size: int = CLIP_CACHE_SIZE):
        self.root = root
        self.categories: Dict[int, str] = {c.id: c.name for c in annotations.categories}
        self._records = {record.id: record for record in annotations.clips}
        self._cached_read = functools.lru_cache(maxsize=cache_size)(self._read_clip_id)

    @property
    def clip_ids(self) -> List[str]:
        return list(self._records)

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self) -> Iterator[Tuple[VideoClip, GroundTruth]]:
        for clip_id in self._records:
            yield self.load(clip_id)

    def load(self, clip_id: str) -> Tuple[VideoClip, GroundTruth]:
        if clip_id not in self._records:
            raise ContractError(f"unknown clip id {clip_id!r}")
        return self._cached_read(clip_id)

    def ground_truth(self, clip_id: str) -> GroundTruth:
        return self.load(clip_id)[1]

    def _read_clip_id(self, clip_id: str) -> Tuple[VideoClip, GroundTruth]:
        return self._read_clip(self._records[clip_id])

    def _read_clip(self, record: _ClipRecord) -> Tuple[VideoClip, GroundTruth]:
        clip_dir = self.root / "clips" / record.id
        frames, masks = [], []
        for t in range(record.num_frames):
            frame_path, mask_path = clip_dir / "frames" / f"{t:05d}.png", clip_dir / "masks" / f"{t:05d}.png"
            if not frame_path.exists() or not mask_path.exists():
                raise FormatError(f"clip {record.id}: missing frame or mask {t:05d}.png")
            with Image.open(frame_path) as img:
                frames.append(np.asarray(img.convert("RGB"), dtype=np.uint8))
            with Image.open(mask_path) as img:
                masks.append(np.asarray(img).astype(np.int32))
            if frames[-1].shape[:2] != (record.height, record.width) or masks[-1].shape != (record.height, record.width):
                raise FormatError(f"clip {record.id}: frame {t} is not {record.height}x{record.width}")
        clip = VideoClip(record.id, np.stack(frames).astype(np.float32) / 255.0)
        objects = [TrackAnnotation(o.track_id, o.category_id, list(o.present)) for o in record.objects]
        try:
            gt = GroundTruth(np.stack(masks), objects)
        except ContractError as exc:
            raise FormatError(f"clip {record.id}: {exc}") from exc
        return clip, gt


def _describe_validation_error(exc: ValidationError, raw: object) -> str:
    error = exc.errors()[0]
    loc = error["loc"]
    clip_id = None
    if len(loc) >= 2 and loc[0] == "clips" and isinstance(loc[1], int) and isinstance(raw, dict):
        try:
            clip_id = raw["clips"][loc[1]].get("id")
        except (KeyError, IndexError, AttributeError, TypeError):
            clip_id = None
    path = ".".join(str(part) for part in loc)
    return f"{ANNOTATIONS_FILE}: clip {clip_id!r}: {path}: {error['msg']}"


def read_dataset(root_dir: Union[str, Path], cache_size: int = CLIP_CACHE_SIZE) -> SyntheticDataset:
    root = Path(root_dir)
    annotation_path = root / ANNOTATIONS_FILE
    if not annotation_path.is_file():
        raise FormatError(f"no {ANNOTATIONS_FILE} in {root}")
    try:
        raw = json.loads(annotation_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{ANNOTATIONS_FILE}: invalid JSON: {exc}") from exc
    try:
        annotations = _Annotations.model_validate(raw)
    except ValidationError as exc:
        raise FormatError(_describe_validation_error(exc, raw)) from exc
    for record in annotations.clips:
        if not (root / "clips" / record.id).is_dir():
            raise FormatError(f"{ANNOTATIONS_FILE} references clip {record.id!r} but {root / 'clips' / record.id} is missing")
    logger.info("opened dataset %s with %d clips", root, len(annotations.clips))
    return SyntheticDataset(root, annotations, cache_size)
