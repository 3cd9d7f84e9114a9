"""
Track-Level Evaluation - Solution Implementation

Description: Spatio-temporal IoU, the video AP/AR protocol (10 IoU thresholds, 101-point
interpolation, per-category averaging), the unsupervised DAVIS J&F protocol, ID-switch
counting and the results / report JSON files.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, TypeAdapter, ValidationError
from scipy import ndimage
from scipy.optimize import linear_sum_assignment

from app.utils.errors import ContractError, FormatError
from app.vision.synthdata.synthdata import GroundTruth, RleMask, decode_rle, encode_rle

logger = logging.getLogger(__name__)

IOU_THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
MAX_DETECTIONS = (1, 10, 100)
BOUNDARY_TOLERANCE = 0.008
DECAY_BINS = 4


@dataclass
class PredictedTrack:
    """One track of one clip; frames missing from `masks` hold an empty mask."""

    clip_id: str
    track_id: int
    category_id: int
    score: float
    masks: Dict[int, RleMask] = field(default_factory=dict)

    def dense(self, num_frames: int, size: Tuple[int, int]) -> np.ndarray:
        """(T, H, W) boolean masks."""
        grid = np.zeros((num_frames,) + tuple(size), dtype=bool)
        for frame, rle in self.masks.items():
            if tuple(rle.size) != tuple(size):
                raise ContractError(f"clip {self.clip_id} track {self.track_id}: mask size {rle.size} != {size}")
            if not 0 <= frame < num_frames:
                raise ContractError(f"clip {self.clip_id} track {self.track_id}: frame {frame} outside 0..{num_frames - 1}")
            grid[frame] = decode_rle(rle).astype(bool)
        return grid


class EvalReport(BaseModel):
    """Both protocols share one report; the protocol that did not run leaves its fields at 0."""

    model_config = ConfigDict(extra="forbid")

    protocol: Literal["vis", "uvos"] = "vis"
    AP: float = Field(0.0, ge=0.0, le=1.0)
    AP50: float = Field(0.0, ge=0.0, le=1.0)
    AP75: float = Field(0.0, ge=0.0, le=1.0)
    AR1: float = Field(0.0, ge=0.0, le=1.0)
    AR10: float = Field(0.0, ge=0.0, le=1.0)
    J_mean: float = Field(0.0, ge=0.0, le=1.0)
    J_recall: float = Field(0.0, ge=0.0, le=1.0)
    J_decay: float = Field(0.0, ge=-1.0, le=1.0)
    F_mean: float = Field(0.0, ge=0.0, le=1.0)
    F_recall: float = Field(0.0, ge=0.0, le=1.0)
    F_decay: float = Field(0.0, ge=-1.0, le=1.0)
    JF_mean: float = Field(0.0, ge=0.0, le=1.0)
    id_switches: int = Field(0, ge=0)

    def write(self, path: Union[str, Path]) -> Path:
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(self.model_dump_json(indent=2))
        return target


def tracks_from_ground_truth(clip_id: str, gt: GroundTruth, score: float = 1.0) -> List[PredictedTrack]:
    """Oracle predictions: one track per gt object, masks only on frames where it is visible."""
    tracks = []
    for obj in gt.objects:
        masks = {t: encode_rle(gt.masks[t] == obj.track_id)
                 for t in range(gt.num_frames) if (gt.masks[t] == obj.track_id).any()}
        tracks.append(PredictedTrack(clip_id, obj.track_id, obj.category_id, score, masks))
    return tracks


def _gt_track_masks(gt: GroundTruth) -> List[np.ndarray]:
    return [gt.masks == obj.track_id for obj in gt.objects]


def _st_iou_dense(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def st_iou(a: PredictedTrack, b: PredictedTrack) -> float:
    """
    Summed per-frame intersections over summed per-frame unions; 0 when the union is empty.

    Time Complexity: O(T * H * W)
    """
    if a.clip_id != b.clip_id:
        raise ContractError(f"tracks belong to different clips: {a.clip_id!r} vs {b.clip_id!r}")
    inter = union = 0
    for frame in set(a.masks) | set(b.masks):
        mask_a = decode_rle(a.masks[frame]).astype(bool) if frame in a.masks else None
        mask_b = decode_rle(b.masks[frame]).astype(bool) if frame in b.masks else None
        if mask_a is None:
            union += int(mask_b.sum())
        elif mask_b is None:
            union += int(mask_a.sum())
        else:
            if mask_a.shape != mask_b.shape:
                raise ContractError(f"frame {frame}: mask sizes {mask_a.shape} and {mask_b.shape} differ")
            inter += int(np.logical_and(mask_a, mask_b).sum())
            union += int(np.logical_or(mask_a, mask_b).sum())
    return inter / union if union else 0.0


def _interpolated_precision(tps: np.ndarray, num_gt: int) -> Tuple[float, float]:
    """101-point interpolated AP and final recall of one score-sorted TP sequence."""
    if tps.size == 0:
        return 0.0, 0.0
    tp = np.cumsum(tps).astype(np.float64)
    fp = np.cumsum(~tps).astype(np.float64)
    recall = tp / num_gt
    precision = tp / (tp + fp)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    index = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(index < precision.size, precision[np.minimum(index, precision.size - 1)], 0.0)
    return float(sampled.mean()), float(recall[-1])


def _match_clip(ious: np.ndarray, threshold: float) -> np.ndarray:
    """Greedy score-ordered matching; rows are predictions already sorted by score."""
    matched_gt = np.zeros(ious.shape[1], dtype=bool)
    tps = np.zeros(ious.shape[0], dtype=bool)
    for d in range(ious.shape[0]):
        candidates = np.where(matched_gt, -1.0, ious[d])
        if candidates.size == 0:
            continue
        g = int(np.argmax(candidates))
        if candidates[g] >= threshold:
            matched_gt[g] = True
            tps[d] = True
    return tps


def video_ap(preds: Sequence[PredictedTrack], gts: Mapping[str, GroundTruth],
             categories: Sequence[int]) -> Dict[str, float]:
    """
    Video AP / AR over IoU thresholds 0.50:0.05:0.95.

    AP uses at most 100 predictions per clip and category; AR1 / AR10 truncate to the
    top-1 / top-10. Categories without gt tracks are skipped.

    Returns:
        {"AP", "AP50", "AP75", "AR1", "AR10"}
    """
    known = set(categories)
    unknown = sorted({p.category_id for p in preds} - known)
    if unknown:
        raise ContractError(f"predictions use unknown category ids {unknown}")

    # per category, per clip: (scores sorted desc, st-IoU matrix, gt count)
    per_category: Dict[int, List[Tuple[np.ndarray, np.ndarray, int]]] = {c: [] for c in categories}
    for clip_id, gt in gts.items():
        size = gt.masks.shape[1:]
        gt_masks = _gt_track_masks(gt)
        for category in categories:
            gt_idx = [k for k, obj in enumerate(gt.objects) if obj.category_id == category]
            clip_preds = [p for p in preds if p.clip_id == clip_id and p.category_id == category]
            order = sorted(range(len(clip_preds)), key=lambda k: -clip_preds[k].score)
            clip_preds = [clip_preds[k] for k in order][:MAX_DETECTIONS[-1]]
            dense = [p.dense(gt.num_frames, size) for p in clip_preds]
            ious = np.array([[_st_iou_dense(d, gt_masks[g]) for g in gt_idx] for d in dense]).reshape(len(dense), len(gt_idx))
            scores = np.array([p.score for p in clip_preds], dtype=np.float64)
            per_category[category].append((scores, ious, len(gt_idx)))

    ap = np.zeros((len(IOU_THRESHOLDS), len(categories)))
    recall = {k: np.zeros((len(IOU_THRESHOLDS), len(categories))) for k in MAX_DETECTIONS}
    valid = np.zeros(len(categories), dtype=bool)
    for c, category in enumerate(categories):
        entries = per_category[category]
        num_gt = sum(e[2] for e in entries)
        if num_gt == 0:
            continue
        valid[c] = True
        for t, threshold in enumerate(IOU_THRESHOLDS):
            for max_det in MAX_DETECTIONS:
                scores = np.concatenate([e[0][:max_det] for e in entries]) if entries else np.zeros(0)
                tps = np.concatenate([_match_clip(e[1][:max_det], threshold) for e in entries]) if entries else np.zeros(0, bool)
                order = np.argsort(-scores, kind="mergesort")
                precision_ap, final_recall = _interpolated_precision(tps[order], num_gt)
                recall[max_det][t, c] = final_recall
                if max_det == MAX_DETECTIONS[-1]:
                    ap[t, c] = precision_ap

    if not valid.any():
        return {"AP": 0.0, "AP50": 0.0, "AP75": 0.0, "AR1": 0.0, "AR10": 0.0}
    return {
        "AP": float(ap[:, valid].mean()),
        "AP50": float(ap[0, valid].mean()),
        "AP75": float(ap[5, valid].mean()),
        "AR1": float(recall[1][:, valid].mean()),
        "AR10": float(recall[10][:, valid].mean()),
    }


def jaccard_per_frame(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Per-frame IoU of (T, H, W) masks; an empty union counts as 1."""
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    inter = np.logical_and(pred, gt).sum(axis=(1, 2)).astype(np.float64)
    union = np.logical_or(pred, gt).sum(axis=(1, 2)).astype(np.float64)
    return np.divide(inter, union, out=np.ones_like(inter), where=union > 0)


def boundary_map(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with an 8-connected background neighbour (image border counts as background)."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=np.ones((3, 3), dtype=bool), border_value=0)


def _disk(radius: float) -> np.ndarray:
    r = int(np.floor(radius))
    ys, xs = np.mgrid[-r:r + 1, -r:r + 1]
    return xs ** 2 + ys ** 2 <= radius ** 2


def boundary_f_per_frame(pred: np.ndarray, gt: np.ndarray, tolerance: float = BOUNDARY_TOLERANCE) -> np.ndarray:
    """
    Boundary F-measure per frame.

    A boundary pixel counts as matched when the other boundary lies within
    `tolerance * image diagonal` pixels (Euclidean).
    """
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    height, width = gt.shape[1:]
    footprint = _disk(tolerance * np.hypot(height, width))
    scores = np.zeros(gt.shape[0])
    for t in range(gt.shape[0]):
        pred_b, gt_b = boundary_map(pred[t]), boundary_map(gt[t])
        n_pred, n_gt = pred_b.sum(), gt_b.sum()
        if n_pred == 0 and n_gt == 0:
            scores[t] = 1.0
            continue
        if n_pred == 0 or n_gt == 0:
            continue
        precision = (pred_b & ndimage.binary_dilation(gt_b, structure=footprint)).sum() / n_pred
        recall = (gt_b & ndimage.binary_dilation(pred_b, structure=footprint)).sum() / n_gt
        if precision + recall > 0:
            scores[t] = 2 * precision * recall / (precision + recall)
    return scores


def _decay(per_frame: np.ndarray) -> float:
    if per_frame.size < DECAY_BINS:
        return float(per_frame[0] - per_frame[-1])
    bins = np.array_split(per_frame, DECAY_BINS)
    return float(bins[0].mean() - bins[-1].mean())


def _active_frames(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Frames where either mask has foreground; every frame when neither ever does."""
    active = pred.any(axis=(1, 2)) | gt.any(axis=(1, 2))
    return active if active.any() else np.ones_like(active)


def _summarize(per_object: Sequence[np.ndarray]) -> Tuple[float, float, float]:
    if not per_object:
        return 0.0, 0.0, 0.0
    means = np.array([frames.mean() for frames in per_object])
    decays = np.array([_decay(frames) for frames in per_object])
    return float(means.mean()), float((means > 0.5).mean()), float(decays.mean())


def _as_object_list(masks) -> List[np.ndarray]:
    array = masks if isinstance(masks, (list, tuple)) else [masks]
    return [np.asarray(m, dtype=bool) for m in array]


def j_measure(pred_masks, gt_masks) -> Tuple[float, float, float]:
    """
    Region similarity over corresponding objects.

    Frames where both masks are empty are left out, so an absent prediction
    earns nothing while its object is off-screen.

    Args:
        pred_masks: (T, H, W) array or list of them, one per object
        gt_masks: same layout, aligned with pred_masks

    Returns:
        (J_mean, J_recall, J_decay)
    """
    preds, gts = _as_object_list(pred_masks), _as_object_list(gt_masks)
    per_object = []
    for p, g in zip(preds, gts):
        active = _active_frames(p, g)
        per_object.append(jaccard_per_frame(p[active], g[active]))
    return _summarize(per_object)


def f_measure(pred_masks, gt_masks, tolerance: float = BOUNDARY_TOLERANCE) -> Tuple[float, float, float]:
    """Boundary accuracy over corresponding objects; same layout and aggregation as j_measure."""
    preds, gts = _as_object_list(pred_masks), _as_object_list(gt_masks)
    per_object = []
    for p, g in zip(preds, gts):
        active = _active_frames(p, g)
        per_object.append(boundary_f_per_frame(p[active], g[active], tolerance))
    return _summarize(per_object)


def object_correspondence(pred_masks: Sequence[np.ndarray], gt_masks: Sequence[np.ndarray]) -> List[Optional[int]]:
    """Prediction index per gt object maximizing total mean J (Hungarian); None when unmatched."""
    if not gt_masks or not pred_masks:
        return [None] * len(gt_masks)
    mean_j = np.array([[j_measure(p, g)[0] for p in pred_masks] for g in gt_masks])
    rows, cols = linear_sum_assignment(mean_j, maximize=True)
    assigned: List[Optional[int]] = [None] * len(gt_masks)
    for r, c in zip(rows, cols):
        assigned[r] = int(c)
    return assigned


def _check_clips(preds: Sequence[PredictedTrack], gts: Mapping[str, GroundTruth]) -> None:
    missing = sorted({p.clip_id for p in preds} - set(gts))
    if missing:
        raise ContractError(f"predictions reference clips missing from the dataset: {missing}")


def count_id_switches(preds: Sequence[PredictedTrack], gts: Mapping[str, GroundTruth],
                      iou_threshold: float = 0.5) -> int:
    """
    Per gt object, the number of times its best-IoU predicted track id changes between
    consecutive frames where it is matched (IoU >= iou_threshold).
    """
    _check_clips(preds, gts)
    switches = 0
    for clip_id, gt in gts.items():
        size = gt.masks.shape[1:]
        clip_preds = [p for p in preds if p.clip_id == clip_id]
        dense = [p.dense(gt.num_frames, size) for p in clip_preds]
        for gt_mask in _gt_track_masks(gt):
            previous = None
            for t in range(gt.num_frames):
                if not gt_mask[t].any() or not dense:
                    continue
                ious = jaccard_per_frame(np.stack([d[t] for d in dense]), np.repeat(gt_mask[t][None], len(dense), 0))
                best = int(np.argmax(ious))
                if ious[best] < iou_threshold:
                    continue
                track_id = clip_preds[best].track_id
                if previous is not None and track_id != previous:
                    switches += 1
                previous = track_id
    return switches


def evaluate_vis(preds: Sequence[PredictedTrack], gts: Mapping[str, GroundTruth],
                 categories: Sequence[int] = (1, 2, 3, 4)) -> EvalReport:
    _check_clips(preds, gts)
    scores = video_ap(preds, gts, categories)
    report = EvalReport(protocol="vis", id_switches=count_id_switches(preds, gts), **scores)
    logger.info("vis: AP %.4f AP50 %.4f AP75 %.4f AR1 %.4f AR10 %.4f",
                report.AP, report.AP50, report.AP75, report.AR1, report.AR10)
    return report


def evaluate_uvos(preds: Sequence[PredictedTrack], gts: Mapping[str, GroundTruth]) -> EvalReport:
    """
    Unsupervised J&F: categories are ignored and every gt object is matched to at most
    one predicted track per clip; unmatched objects are scored against an empty mask.
    """
    _check_clips(preds, gts)
    pred_objects: List[np.ndarray] = []
    gt_objects: List[np.ndarray] = []
    for clip_id in sorted(gts):
        gt = gts[clip_id]
        size = gt.masks.shape[1:]
        dense = [p.dense(gt.num_frames, size) for p in preds if p.clip_id == clip_id]
        gt_masks = _gt_track_masks(gt)
        for g, match in zip(gt_masks, object_correspondence(dense, gt_masks)):
            gt_objects.append(g)
            pred_objects.append(dense[match] if match is not None else np.zeros_like(g))
    j_mean, j_recall, j_decay = j_measure(pred_objects, gt_objects)
    f_mean, f_recall, f_decay = f_measure(pred_objects, gt_objects)
    report = EvalReport(protocol="uvos", J_mean=j_mean, J_recall=j_recall, J_decay=j_decay,
                        F_mean=f_mean, F_recall=f_recall, F_decay=f_decay, JF_mean=(j_mean + f_mean) / 2,
                        id_switches=count_id_switches(preds, gts))
    logger.info("uvos: J %.4f F %.4f J&F %.4f", report.J_mean, report.F_mean, report.JF_mean)
    return report


class _RleRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")
    counts: List[int]
    size: Tuple[int, int]


class _MaskRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")
    frame: int = Field(ge=0)
    rle: _RleRecord


class _TrackRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")
    clip_id: str
    track_id: int = Field(ge=1)
    category_id: int
    score: float = Field(ge=0.0, le=1.0)
    masks: List[_MaskRecord]


_RESULTS = TypeAdapter(List[_TrackRecord])


def write_results(tracks: Sequence[PredictedTrack], path: Union[str, Path]) -> Path:
    payload = [
        {
            "clip_id": t.clip_id, "track_id": t.track_id, "category_id": t.category_id, "score": t.score,
            "masks": [{"frame": f, "rle": t.masks[f].to_dict()} for f in sorted(t.masks)],
        }
        for t in tracks
    ]
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(json.dumps(payload, indent=2))
    return target


def read_results(path: Union[str, Path]) -> List[PredictedTrack]:
    source = Path(path)
    try:
        records = _RESULTS.validate_json(source.read_text())
    except ValidationError as exc:
        error = exc.errors()[0]
        location = ".".join(str(part) for part in error["loc"])
        raise FormatError(f"{source}: {location}: {error['msg']}") from exc
    tracks = []
    for record in records:
        masks = {}
        for mask in record.masks:
            rle = RleMask(list(mask.rle.counts), tuple(mask.rle.size))
            decode_rle(rle)
            masks[mask.frame] = rle
        tracks.append(PredictedTrack(record.clip_id, record.track_id, record.category_id, record.score, masks))
    return tracks
