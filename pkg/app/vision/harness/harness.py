"""
Video Instance Segmentation Pipeline - Solution Implementation

Description: Ties perception, residual fusion, the object graph and the tracker into one
model; two-frame training with SGD, online clip inference, checkpoints, evaluation,
the ablation matrix and overlay rendering.
Time Complexity: O(I * B) network passes for I iterations of batch B; O(T) passes per clip at inference
Space Complexity: O(P) for P parameters plus one frame pair of activations
"""

import colorsys
import io
import json
import logging
import math
from collections import Counter, OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw
from pydantic import ValidationError
from torch import Tensor, nn
from tqdm import tqdm

from app.utils.config import LossConfig, VisConfig
from app.utils.errors import CheckpointError, ContractError, ShapeError, TrainingError
from app.vision.metrics.metrics import (
    EvalReport, PredictedTrack, evaluate_uvos, evaluate_vis, read_results,
)
from app.vision.object_graph.object_graph import (
    NodeSource, ObjectGraph, association_loss, association_targets, encode_objects,
    match_proposals, predict_transition, relate, transition_consistency_loss,
)
from app.vision.perception.perception import (
    DenseTargets, Detection, PerceptionModel, PyramidFeatures, assign_targets, crop_mask_targets,
    decode_detections, detection_losses, frames_to_tensor, pyramid_geometry,
)
from app.vision.resfuser.resfuser import ResFuser
from app.vision.synthdata.synthdata import (
    CATEGORIES, AugmentParams, GroundTruth, SyntheticDataset, VideoClip, augment_pair, encode_rle,
    read_dataset,
)
from app.vision.tracker.tracker import OnlineTracker

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
ABLATION_VARIANTS: Dict[str, Dict[str, bool]] = {
    "base": {"resfuser.enabled": False, "gnn.enabled": False},
    "resfuser": {"resfuser.enabled": True, "gnn.enabled": False},
    "gnn": {"resfuser.enabled": False, "gnn.enabled": True},
    "resfuser_gnn": {"resfuser.enabled": True, "gnn.enabled": True},
}
GOLDEN_RATIO_CONJUGATE = 0.618033988749895
OVERLAY_ALPHA = 0.5


@dataclass
class TrainingPair:
    """Two consecutive frames (H, W, 3) with single-frame ground truth each."""

    frame_t: np.ndarray
    gt_t: GroundTruth
    frame_t1: np.ndarray
    gt_t1: GroundTruth


@dataclass
class Checkpoint:
    parameters: "OrderedDict[str, Tensor]"
    config: VisConfig
    iteration: int = 0
    seed_state: Dict[str, object] = field(default_factory=dict)
    loss_curve: Optional[pd.DataFrame] = field(default=None, compare=False, repr=False)


def combine_losses(losses: Mapping[str, Tensor], weights: LossConfig) -> Tensor:
    """Weighted sum of the named components; weights are looked up by name and zero-weight terms are left out."""
    if not losses:
        raise ContractError("no loss components to combine")
    total = None
    for name, value in losses.items():
        weight = getattr(weights, name)
        if weight == 0:
            continue
        term = weight * value
        total = term if total is None else total + term
    if total is None:
        first = next(iter(losses.values()))
        return torch.zeros((), dtype=first.dtype, requires_grad=True)
    return total


def _state_key(prefix: str, name: str) -> str:
    if prefix == "resfuser" and name.startswith("branches."):
        name = name[len("branches."):]
    return f"{prefix}/{name.replace('.', '/')}"


class VisModel(nn.Module):
    """
    Perception, ResFuser and object graph under one config.

    The ablation flags only switch the modules off in the forward path; their
    parameters always exist so every checkpoint has the same keys.
    """

    def __init__(self, config: VisConfig):
        super().__init__()
        self.config = config
        self.perception = PerceptionModel.from_config(config)
        self.resfuser = ResFuser.from_config(config)
        self.object_graph = ObjectGraph.from_config(config)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def trainable_parameters(self) -> List[nn.Parameter]:
        params = list(self.perception.parameters())
        if self.config.resfuser.enabled:
            params += list(self.resfuser.parameters())
        if self.config.gnn.enabled:
            params += list(self.object_graph.parameters())
        return params

    def frames(self, images: Sequence[np.ndarray]) -> Tensor:
        return frames_to_tensor(np.stack(images)).to(self.dtype)

    def fuse(self, prev: PyramidFeatures, curr: PyramidFeatures) -> PyramidFeatures:
        return self.resfuser.fuse(prev, curr) if self.config.resfuser.enabled else curr

    def fuse_first(self, curr: PyramidFeatures) -> PyramidFeatures:
        return self.resfuser.fuse_first_frame(curr) if self.config.resfuser.enabled else curr

    def parameter_map(self) -> "OrderedDict[str, Tensor]":
        """Parameters keyed perception/..., resfuser/level<i>/..., object_graph/..."""
        mapping: "OrderedDict[str, Tensor]" = OrderedDict()
        for prefix, module in (("perception", self.perception), ("resfuser", self.resfuser),
                               ("object_graph", self.object_graph)):
            for name, tensor in module.state_dict().items():
                mapping[_state_key(prefix, name)] = tensor.detach().clone()
        return mapping

    def load_parameter_map(self, mapping: Mapping[str, Tensor]) -> None:
        expected = self.parameter_map()
        missing = sorted(set(expected) - set(mapping))
        unexpected = sorted(set(mapping) - set(expected))
        if missing or unexpected:
            raise CheckpointError(f"parameter keys differ: missing {missing[:5]}, unexpected {unexpected[:5]}")
        for prefix, module in (("perception", self.perception), ("resfuser", self.resfuser),
                               ("object_graph", self.object_graph)):
            state = module.state_dict()
            for name in state:
                value = mapping[_state_key(prefix, name)]
                if value.shape != state[name].shape:
                    raise CheckpointError(f"{_state_key(prefix, name)}: shape {tuple(value.shape)} "
                                          f"does not match the config's {tuple(state[name].shape)}")
                state[name] = value.to(state[name].dtype)
            module.load_state_dict(state)

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint) -> "VisModel":
        model = cls(checkpoint.config)
        model.load_parameter_map(checkpoint.parameters)
        model.eval()
        return model

    def training_losses(self, pairs: Sequence[TrainingPair]) -> Dict[str, Tensor]:
        """
        Loss components of one batch of frame pairs.

        Detection and mask losses are computed on frame t+1. With the GNN enabled, frame-t
        ground-truth objects are related to frame-t+1 proposals (decoded detections plus
        ground-truth boxes) for the edge and transition terms.
        """
        config = self.config
        height, width = pairs[0].frame_t1.shape[:2]
        geometry = pyramid_geometry(config, height, width)

        p_t = self.perception.extract_pyramid(self.frames([p.frame_t for p in pairs]))
        p_t1 = self.perception.extract_pyramid(self.frames([p.frame_t1 for p in pairs]))
        fused_t = self.fuse_first(p_t)
        fused_t1 = self.fuse(p_t, p_t1)
        dense = self.perception.detect(fused_t1)
        targets = DenseTargets.stack([assign_targets(p.gt_t1, geometry) for p in pairs])

        mask_logits, mask_targets = [], []
        edge_losses, trans_losses = [], []
        for b, pair in enumerate(pairs):
            decoded = decode_detections(dense, (height, width), config.detect.score_threshold, config.detect.nms_iou,
                                        config.detect.max_detections, config.detect.pre_nms_topk, batch_index=b)
            proposals = [d.box for d in decoded] + [inst.box for inst in pair.gt_t1.instances(0)]
            matched = match_proposals(proposals, pair.gt_t1, config.detect.iou_match_threshold)
            boxes = torch.tensor(proposals, dtype=self.dtype).reshape(-1, 4)
            rois_t1 = self.perception.pool(fused_t1, boxes, batch_index=b)

            keep = [j for j, track_id in enumerate(matched) if track_id is not None]
            if keep:
                category_of = {obj.track_id: obj.category_id for obj in pair.gt_t1.objects}
                index = torch.tensor(keep)
                mask_logits.append(self.perception.mask_logits(rois_t1[index], [category_of[matched[j]] for j in keep]))
                mask_targets.append(torch.cat([
                    crop_mask_targets(pair.gt_t1.masks[0] == matched[j], boxes[j:j + 1], 2 * config.model.roi_size)
                    for j in keep
                ]))

            if config.gnn.enabled:
                edge, trans = self._graph_losses(pair, fused_t, rois_t1, proposals, b)
                edge_losses.append(edge)
                trans_losses.append(trans)

        if mask_logits:
            logits = torch.cat(mask_logits)
            losses = detection_losses(dense, targets, logits, torch.cat(mask_targets).to(logits),
                                      config.detect.focal_alpha, config.detect.focal_gamma)
        else:
            losses = detection_losses(dense, targets, None, None, config.detect.focal_alpha, config.detect.focal_gamma)
        if config.gnn.enabled:
            losses["edge"] = torch.stack(edge_losses).mean()
            losses["trans"] = torch.stack(trans_losses).mean()
        return losses

    def _graph_losses(self, pair: TrainingPair, fused_t: PyramidFeatures, rois_t1: Tensor,
                      proposals: List[Tuple[float, float, float, float]], batch_index: int) -> Tuple[Tensor, Tensor]:
        instances_t = pair.gt_t.instances(0)
        boxes_t = torch.tensor([inst.box for inst in instances_t], dtype=self.dtype).reshape(-1, 4)
        rois_t = self.perception.pool(fused_t, boxes_t, batch_index=batch_index)
        nodes_t = encode_objects(self.object_graph, rois_t, NodeSource.GROUND_TRUTH,
                                 [inst.track_id for inst in instances_t], frame=0)
        nodes_t1 = encode_objects(self.object_graph, rois_t1, NodeSource.PROPOSAL, list(range(len(proposals))), frame=1)
        graph = relate(nodes_t, nodes_t1, self.object_graph)
        labels = association_targets(pair.gt_t, proposals, pair.gt_t1, self.config.detect.iou_match_threshold)
        edge = association_loss(graph.edge_logits, labels)

        positive = torch.nonzero(labels > 0.5).tolist()
        if positive:
            predicted = torch.stack([predict_transition(nodes_t[i], graph.delta[j]) for i, j in positive])
            encoded = torch.stack([nodes_t1[j].z for _, j in positive])
        else:
            predicted = encoded = graph.delta.new_zeros((0, self.object_graph.latent_dim))
        return edge, transition_consistency_loss(predicted, encoded)


class PairSampler:
    """Draws frame pairs: a static-image pseudo-pair with probability p_img, else consecutive frames."""

    def __init__(self, dataset: SyntheticDataset, p_img: float, seed: int,
                 augment: Optional[AugmentParams] = None):
        if len(dataset) == 0:
            raise ContractError("no clips to sample training pairs from")
        self.dataset = dataset
        self.p_img = p_img
        self.augment = augment or AugmentParams()
        self.rng = np.random.default_rng(seed)

    def sample(self) -> TrainingPair:
        clip_id = self.dataset.clip_ids[int(self.rng.integers(len(self.dataset)))]
        clip, gt = self.dataset.load(clip_id)
        if self.rng.random() < self.p_img:
            t = int(self.rng.integers(clip.num_frames))
            pair_clip, pair_gt = augment_pair(clip.frames[t], gt.frame(t), self.augment,
                                              seed=int(self.rng.integers(2 ** 32)))
            return TrainingPair(pair_clip.frames[0], pair_gt.frame(0), pair_clip.frames[1], pair_gt.frame(1))
        t = int(self.rng.integers(clip.num_frames - 1))
        return TrainingPair(clip.frames[t], gt.frame(t), clip.frames[t + 1], gt.frame(t + 1))

    def batch(self, size: int) -> List[TrainingPair]:
        return [self.sample() for _ in range(size)]


def _check_frame_size(clip: VideoClip, config: VisConfig) -> None:
    expected = (config.data.image_size, config.data.image_size)
    if clip.size != expected:
        raise ShapeError(f"clip {clip.clip_id}: frames are {clip.size[0]}x{clip.size[1]}, "
                         f"the model expects {expected[0]}x{expected[1]}")


class VisTrainer:
    """
    SGD training of VisModel on frame pairs.

    Time Complexity: O(iterations * batch_size) forward/backward passes
    Space Complexity: O(parameters + one batch of activations)
    """

    def __init__(self, config: VisConfig, dataset: SyntheticDataset):
        torch.manual_seed(config.seed)
        self.config = config
        self.dataset = dataset
        for clip_id in dataset.clip_ids:
            _check_frame_size(dataset.load(clip_id)[0], config)
        self.model = VisModel(config)
        self.sampler = PairSampler(dataset, config.data.p_img, config.seed)
        optim = config.optim
        self.optimizer = torch.optim.SGD(self.model.trainable_parameters(), lr=optim.learning_rate,
                                         momentum=optim.momentum, weight_decay=optim.weight_decay)
        self.scheduler = torch.optim.lr_scheduler.MultiStepLR(self.optimizer, list(optim.resolved_milestones),
                                                              gamma=0.1)
        self.history: List[Dict[str, float]] = []

    def step(self, iteration: int) -> Dict[str, float]:
        self.model.train()
        losses = self.model.training_losses(self.sampler.batch(self.config.optim.batch_size))
        total = combine_losses(losses, self.config.loss)
        breakdown = {name: float(value.detach()) for name, value in losses.items()}
        if not math.isfinite(float(total.detach())):
            raise TrainingError(f"non-finite loss at iteration {iteration}: {breakdown}")

        self.optimizer.zero_grad()
        total.backward()
        nn.utils.clip_grad_norm_(self.model.trainable_parameters(), self.config.optim.grad_clip)
        self.optimizer.step()
        self.scheduler.step()

        row = {"iteration": iteration, "total": float(total.detach()), **breakdown,
               "lr": self.optimizer.param_groups[0]["lr"]}
        self.history.append(row)
        return row

    def run(self, progress: bool = True) -> Checkpoint:
        iterations = self.config.optim.iterations
        for iteration in tqdm(range(1, iterations + 1), desc="train", disable=not progress):
            row = self.step(iteration)
            if iteration % self.config.optim.log_every == 0 or iteration == iterations:
                parts = " ".join(f"{k}={v:.4f}" for k, v in row.items() if k not in ("iteration", "lr"))
                logger.info("iteration %d/%d %s lr=%.2e", iteration, iterations, parts, row["lr"])
        return Checkpoint(
            parameters=self.model.parameter_map(),
            config=self.config,
            iteration=iterations,
            seed_state={"seed": self.config.seed,
                        "sampler": json.dumps(self.sampler.rng.bit_generator.state),
                        "torch": torch.get_rng_state()},
            loss_curve=pd.DataFrame(self.history),
        )


def train(config: VisConfig, dataset: Optional[SyntheticDataset] = None,
          loss_curve_path: Optional[Union[str, Path]] = None, progress: bool = True) -> Checkpoint:
    """
    Train from scratch and return the final checkpoint.

    Args:
        config: validated run configuration
        dataset: training clips; read from config.data.root when omitted
        loss_curve_path: optional CSV destination for the per-iteration loss breakdown
        progress: show a progress bar
    """
    dataset = dataset if dataset is not None else read_dataset(config.data.root)
    trainer = VisTrainer(config, dataset)
    checkpoint = trainer.run(progress=progress)
    if loss_curve_path is not None:
        path = Path(loss_curve_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        checkpoint.loss_curve.to_csv(path, index=False)
    return checkpoint


def checkpoint_bytes(checkpoint: Checkpoint) -> bytes:
    payload = {
        "version": CHECKPOINT_VERSION,
        "parameters": OrderedDict((k, v.detach().cpu()) for k, v in checkpoint.parameters.items()),
        "config": checkpoint.config.model_dump_json(),
        "iteration": int(checkpoint.iteration),
        "seed_state": dict(checkpoint.seed_state),
    }
    buffer = io.BytesIO()
    torch.save(payload, buffer)
    return buffer.getvalue()


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(checkpoint_bytes(checkpoint))
    return target


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    source = Path(path)
    raw = source.read_bytes()
    try:
        payload = torch.load(io.BytesIO(raw), map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"{source}: truncated or corrupt checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or "version" not in payload:
        raise CheckpointError(f"{source}: not a checkpoint archive")
    if payload["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(f"{source}: checkpoint version {payload['version']} is not supported "
                              f"(expected {CHECKPOINT_VERSION})")
    try:
        config = VisConfig.model_validate_json(payload["config"])
    except (KeyError, ValidationError) as exc:
        raise CheckpointError(f"{source}: invalid config snapshot: {exc}") from exc
    return Checkpoint(OrderedDict(payload["parameters"]), config, int(payload["iteration"]),
                      dict(payload.get("seed_state", {})))


def paste_mask(mask_local: Tensor, box: Tuple[float, float, float, float], size: Tuple[int, int]) -> np.ndarray:
    """Bilinear resize of an M x M probability grid into its box, thresholded at 0.5."""
    height, width = size
    x1, y1, x2, y2 = box
    left, top = int(math.floor(x1)), int(math.floor(y1))
    right, bottom = int(math.ceil(x2)), int(math.ceil(y2))
    canvas = np.zeros((height, width), dtype=bool)
    if right <= left or bottom <= top:
        return canvas
    resized = F.interpolate(mask_local[None, None].float(), size=(bottom - top, right - left), mode="bilinear",
                            align_corners=False)[0, 0].numpy() >= 0.5
    y0, x0 = max(top, 0), max(left, 0)
    y1c, x1c = min(bottom, height), min(right, width)
    canvas[y0:y1c, x0:x1c] = resized[y0 - top:y1c - top, x0 - left:x1c - left]
    return canvas


def _as_model(source: Union[Checkpoint, VisModel]) -> VisModel:
    return source if isinstance(source, VisModel) else VisModel.from_checkpoint(source)


def infer_clip(checkpoint: Union[Checkpoint, VisModel], clip: VideoClip) -> List[PredictedTrack]:
    """
    Online inference over one clip.

    Frame 0 is fused with itself; every later frame with the previous frame's pyramid.
    Track score is the mean matched confidence; category is the majority vote,
    ties going to the lower category id.
    """
    model = _as_model(checkpoint)
    config = model.config
    _check_frame_size(clip, config)
    mode = config.tracker_mode
    tracker = OnlineTracker(config.tracker, mode=mode, graph=model.object_graph if mode == "edge" else None)
    size = clip.size

    masks: Dict[int, Dict[int, object]] = {}
    scores: Dict[int, List[float]] = {}
    categories: Dict[int, List[int]] = {}
    model.eval()
    with torch.no_grad():
        previous: Optional[PyramidFeatures] = None
        for t in range(clip.num_frames):
            pyramid = model.perception.extract_pyramid(model.frames([clip.frames[t]]))
            fused = model.fuse_first(pyramid) if previous is None else model.fuse(previous, pyramid)
            previous = pyramid
            detections = decode_detections(model.perception.detect(fused), size, config.detect.score_threshold,
                                           config.detect.nms_iou, config.detect.max_detections,
                                           config.detect.pre_nms_topk)
            if detections:
                boxes = torch.tensor([d.box for d in detections], dtype=model.dtype)
                rois = model.perception.pool(fused, boxes)
                probabilities = model.perception.predict_masks(rois, [d.category_id for d in detections])
                states = model.object_graph.encoder(rois) if mode == "edge" else None
                for k, detection in enumerate(detections):
                    detection.roi_feature = rois[k]
                    detection.mask_local = probabilities[k]
                    detection.state = states[k] if states is not None else None
            result = tracker.step(detections, t)
            for detection, assignment in zip(detections, result.assignments):
                track_id = assignment.track_id
                masks.setdefault(track_id, {})[t] = encode_rle(paste_mask(detection.mask_local, detection.box, size))
                scores.setdefault(track_id, []).append(detection.score)
                categories.setdefault(track_id, []).append(detection.category_id)

    tracks = []
    for track_id in sorted(masks):
        votes = Counter(categories[track_id])
        category = min(votes, key=lambda c: (-votes[c], c))
        tracks.append(PredictedTrack(clip.clip_id, track_id, category, float(np.mean(scores[track_id])),
                                     masks[track_id]))
    logger.info("clip %s: %d tracks over %d frames", clip.clip_id, len(tracks), clip.num_frames)
    return tracks


def _ground_truths(dataset: SyntheticDataset) -> Dict[str, GroundTruth]:
    if len(dataset) == 0:
        raise ContractError("no clips to evaluate")
    return {clip_id: dataset.ground_truth(clip_id) for clip_id in dataset.clip_ids}


def evaluate_results(results: Union[str, Path, Sequence[PredictedTrack]], dataset: SyntheticDataset,
                     protocol: str = "vis", report_path: Optional[Union[str, Path]] = None) -> EvalReport:
    """Score predictions from a results file (or in memory) without running inference."""
    tracks = read_results(results) if isinstance(results, (str, Path)) else list(results)
    gts = _ground_truths(dataset)
    if protocol == "vis":
        report = evaluate_vis(tracks, gts, sorted(dataset.categories))
    elif protocol == "uvos":
        report = evaluate_uvos(tracks, gts)
    else:
        raise ContractError(f"unknown protocol {protocol!r}; expected 'vis' or 'uvos'")
    if report_path is not None:
        report.write(report_path)
    return report


def infer_dataset(checkpoint: Union[Checkpoint, VisModel], dataset: SyntheticDataset) -> List[PredictedTrack]:
    model = _as_model(checkpoint)
    tracks: List[PredictedTrack] = []
    for clip_id in dataset.clip_ids:
        tracks.extend(infer_clip(model, dataset.load(clip_id)[0]))
    return tracks


def evaluate(checkpoint: Union[Checkpoint, VisModel], dataset: SyntheticDataset, protocol: str = "vis",
             report_path: Optional[Union[str, Path]] = None) -> EvalReport:
    _ground_truths(dataset)
    return evaluate_results(infer_dataset(checkpoint, dataset), dataset, protocol, report_path)


def run_ablation(config: VisConfig, dataset: SyntheticDataset, out_dir: Union[str, Path],
                 protocol: str = "vis", progress: bool = False) -> Dict[str, EvalReport]:
    """
    Train and evaluate the four {resfuser, gnn} on/off variants on one corpus.

    Writes ckpt_<variant>.pt, loss_<variant>.csv and report_<variant>.json under out_dir.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports = {}
    for variant, flags in ABLATION_VARIANTS.items():
        variant_config = config.override(flags)
        logger.info("ablation variant %s (tracker mode %s)", variant, variant_config.tracker_mode)
        checkpoint = train(variant_config, dataset, loss_curve_path=out / f"loss_{variant}.csv", progress=progress)
        save_checkpoint(checkpoint, out / f"ckpt_{variant}.pt")
        reports[variant] = evaluate(checkpoint, dataset, protocol, report_path=out / f"report_{variant}.json")
    return reports


def track_color(track_id: int) -> Tuple[int, int, int]:
    """Deterministic color: hues spaced by the golden ratio."""
    hue = (track_id * GOLDEN_RATIO_CONJUGATE) % 1.0
    r, g, b = colorsys.hsv_to_rgb(hue, 0.75, 1.0)
    return int(round(r * 255)), int(round(g * 255)), int(round(b * 255))


def visualize(clip: VideoClip, tracks: Sequence[PredictedTrack], out_dir: Union[str, Path],
              categories: Optional[Mapping[int, str]] = None) -> List[Path]:
    """
    One overlay PNG per frame plus legend.csv (track id, category, color).

    Without tracks the PNGs are the clip frames unchanged.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = dict(categories or CATEGORIES)
    height, width = clip.size
    clip_tracks = [t for t in tracks if t.clip_id == clip.clip_id]
    dense = {t.track_id: t.dense(clip.num_frames, (height, width)) for t in clip_tracks}

    paths = []
    pixels = np.rint(np.clip(clip.frames, 0.0, 1.0) * 255.0).astype(np.uint8)
    for t in range(clip.num_frames):
        frame = pixels[t].astype(np.float64)
        labels = []
        for track in clip_tracks:
            if t not in track.masks:
                continue
            mask = dense[track.track_id][t]
            if not mask.any():
                continue
            color = np.array(track_color(track.track_id), dtype=np.float64)
            frame[mask] = (1 - OVERLAY_ALPHA) * frame[mask] + OVERLAY_ALPHA * color
            rows, cols = np.nonzero(mask)
            labels.append((int(cols.min()), int(rows.min()), str(track.track_id), track_color(track.track_id)))
        image = Image.fromarray(np.rint(frame).astype(np.uint8))
        if labels:
            draw = ImageDraw.Draw(image)
            for x, y, text, color in labels:
                draw.text((x + 1, y + 1), text, fill=color)
        path = out / f"{t:05d}.png"
        image.save(path)
        paths.append(path)

    legend = pd.DataFrame(
        [{"track_id": tr.track_id, "category_id": tr.category_id,
          "category": names.get(tr.category_id, str(tr.category_id)),
          "color": "#%02x%02x%02x" % track_color(tr.track_id)} for tr in clip_tracks],
        columns=["track_id", "category_id", "category", "color"],
    )
    legend.to_csv(out / "legend.csv", index=False)
    return paths
