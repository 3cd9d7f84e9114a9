"""
Online Track Assignment - Solution Implementation

Description: Clip-level track memory and greedy, confidence-ordered assignment of detections
to stored tracks. The similarity term is the learned edge score; a plain IoU tracker is
kept as the ablation baseline.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from torchvision import ops

from app.utils.config import TrackerConfig
from app.utils.errors import ContractError, ShapeError
from app.vision.object_graph.object_graph import NodeSource, ObjectGraph, ObjectState, relate
from app.vision.perception.perception import Detection

logger = logging.getLogger(__name__)


class AssignmentKind(str, Enum):
    MATCHED_EXISTING = "matched_existing"
    NEW_INSTANCE = "new_instance"


@dataclass
class TrackEntry:
    track_id: int
    state: Optional[torch.Tensor]
    box: Tuple[float, float, float, float]
    category_id: int
    confidence: float
    last_seen: int


@dataclass
class TrackStore:
    """Track memory of one clip; entries stay sorted by track id and are never deleted."""

    entries: List[TrackEntry] = field(default_factory=list)
    next_id: int = 1

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def track_ids(self) -> List[int]:
        return [entry.track_id for entry in self.entries]

    def find(self, track_id: int) -> Optional[TrackEntry]:
        for entry in self.entries:
            if entry.track_id == track_id:
                return entry
        return None

    def boxes(self) -> np.ndarray:
        return np.array([entry.box for entry in self.entries], dtype=np.float64).reshape(-1, 4)


@dataclass(frozen=True)
class Assignment:
    track_id: int
    kind: AssignmentKind


@dataclass
class AssignmentResult:
    """One Assignment per detection, in the detections' original order."""

    assignments: List[Assignment]

    @property
    def track_ids(self) -> List[int]:
        return [a.track_id for a in self.assignments]


def box_iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (N, 4) and (M, 4) boxes in (x1, y1, x2, y2) form; a pair with zero union scores 0."""
    a = torch.as_tensor(np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4))
    b = torch.as_tensor(np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4))
    return torch.nan_to_num(ops.box_iou(a, b), nan=0.0).numpy()


def score_matrix(detections: Sequence[Detection], store: TrackStore, edge_scores: np.ndarray,
                 weights: TrackerConfig) -> np.ndarray:
    """
    Rows are detections, columns are store entries plus a final new-instance column.

    entry(n, m) = log s(m, n) + alpha [same category] + beta IoU + gamma log conf_n,
    where s is the edge score clamped to [eps, 1 - eps]; the last column is log(theta_new).

    Args:
        detections: frame-t+1 detections
        store: track memory (frame-t side)
        edge_scores: (|store|, |detections|) probabilities
        weights: tracker weights
    """
    n_det, n_store = len(detections), len(store)
    edge = np.asarray(edge_scores, dtype=np.float64).reshape(n_store, n_det)
    scores = np.full((n_det, n_store + 1), np.log(weights.theta_new))
    if n_det == 0 or n_store == 0:
        return scores

    ious = box_iou_matrix(np.array([d.box for d in detections]), store.boxes())
    same_category = np.array([[float(d.category_id == e.category_id) for e in store.entries] for d in detections])
    confidence = np.log(np.clip([d.score for d in detections], weights.eps, 1.0))[:, None]
    similarity = np.log(np.clip(edge.T, weights.eps, 1.0 - weights.eps))
    scores[:, :n_store] = similarity + weights.alpha * same_category + weights.beta * ious + weights.gamma * confidence
    return scores


def _greedy(scores: np.ndarray, confidences: Sequence[float], store: TrackStore) -> AssignmentResult:
    """Highest confidence first; each stored column is taken at most once per frame."""
    n_store = len(store)
    order = sorted(range(len(confidences)), key=lambda k: (-confidences[k], k))
    taken = np.zeros(n_store, dtype=bool)
    next_id = store.next_id
    assignments: List[Optional[Assignment]] = [None] * len(confidences)
    for k in order:
        row = np.where(np.append(taken, False), -np.inf, scores[k])
        column = int(np.argmax(row))
        if column < n_store:
            taken[column] = True
            assignments[k] = Assignment(store.entries[column].track_id, AssignmentKind.MATCHED_EXISTING)
        else:
            assignments[k] = Assignment(next_id, AssignmentKind.NEW_INSTANCE)
            next_id += 1
    return AssignmentResult(assignments)


def associate(detections: Sequence[Detection], store: TrackStore, edge_scores: np.ndarray,
              weights: TrackerConfig) -> AssignmentResult:
    """Greedy assignment on the edge-score matrix; ties go to the lowest track id."""
    scores = score_matrix(detections, store, edge_scores, weights)
    return _greedy(scores, [d.score for d in detections], store)


def iou_baseline_associate(detections: Sequence[Detection], store: TrackStore,
                           theta_iou: float = 0.3) -> AssignmentResult:
    """Same greedy scheme with IoU as the only score and theta_iou as the new-instance column."""
    scores = np.full((len(detections), len(store) + 1), theta_iou)
    if detections and len(store):
        scores[:, :len(store)] = box_iou_matrix(np.array([d.box for d in detections]), store.boxes())
    return _greedy(scores, [d.score for d in detections], store)


def update_store(store: TrackStore, detections: Sequence[Detection], assignment: AssignmentResult,
                 frame_index: int) -> TrackStore:
    """Overwrite matched entries, append new ones; unmatched entries are left untouched."""
    if len(detections) != len(assignment.assignments):
        raise ContractError(f"{len(detections)} detections but {len(assignment.assignments)} assignments")
    minted = [a.track_id for a in assignment.assignments if a.kind is AssignmentKind.NEW_INSTANCE]
    if len(set(minted)) != len(minted) or any(track_id < store.next_id for track_id in minted):
        raise ContractError(f"new track ids {minted} collide with ids minted before {store.next_id}")
    for detection, decided in zip(detections, assignment.assignments):
        state = detection.state.detach() if detection.state is not None else None
        if decided.kind is AssignmentKind.MATCHED_EXISTING:
            entry = store.find(decided.track_id)
            if entry is None:
                raise ContractError(f"assignment references unknown track {decided.track_id}")
            entry.state, entry.box = state, detection.box
            entry.category_id, entry.confidence, entry.last_seen = detection.category_id, detection.score, frame_index
        else:
            store.entries.append(TrackEntry(decided.track_id, state, detection.box, detection.category_id,
                                            detection.score, frame_index))
            store.next_id = max(store.next_id, decided.track_id + 1)
    store.entries.sort(key=lambda e: e.track_id)
    return store


class OnlineTracker:
    """Track memory plus the association rule selected by `mode` ("edge" or "iou")."""

    def __init__(self, weights: TrackerConfig, mode: str = "edge", graph: Optional[ObjectGraph] = None):
        if mode == "edge" and graph is None:
            raise ContractError("edge-score tracking needs an object graph")
        self.weights = weights
        self.mode = mode
        self.graph = graph
        self.store = TrackStore()

    def edge_scores(self, detections: Sequence[Detection], frame_index: int) -> np.ndarray:
        """(|store|, |detections|) edge scores between stored states and detection states."""
        if not detections or not len(self.store):
            return np.zeros((len(self.store), len(detections)))
        if any(d.state is None for d in detections) or any(e.state is None for e in self.store.entries):
            raise ShapeError("edge-score tracking needs a latent state on every detection and track")
        stored = [ObjectState(e.state, NodeSource.PROPOSAL, e.track_id, e.last_seen) for e in self.store.entries]
        current = [ObjectState(d.state, NodeSource.PROPOSAL, k, frame_index) for k, d in enumerate(detections)]
        with torch.no_grad():
            graph = relate(stored, current, self.graph)
        return graph.edge_scores.double().cpu().numpy()

    def step(self, detections: Sequence[Detection], frame_index: int) -> AssignmentResult:
        if self.mode == "edge":
            result = associate(detections, self.store, self.edge_scores(detections, frame_index), self.weights)
        else:
            result = iou_baseline_associate(detections, self.store, self.weights.theta_iou)
        update_store(self.store, detections, result, frame_index)
        logger.debug("frame %d: %d detections -> tracks %s", frame_index, len(detections), result.track_ids)
        return result
