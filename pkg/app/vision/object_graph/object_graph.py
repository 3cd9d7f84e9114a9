"""
Cross-Frame Object Graph - Solution Implementation

Description: Encodes RoI features into latent object states, relates frame-t and frame-t+1
objects with one step of message passing over a bipartite graph, predicts state
transitions, scores edges and computes the association / transition-consistency losses.
"""

import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn
from torchvision import ops

from app.utils.config import VisConfig
from app.utils.errors import ShapeError
from app.vision.synthdata.synthdata import GroundTruth

logger = logging.getLogger(__name__)


class NodeSource(str, Enum):
    GROUND_TRUTH = "ground_truth_node"
    PROPOSAL = "proposal_node"


@dataclass
class ObjectState:
    """Latent state z of one object; handle is a track id (ground truth) or detection index (proposal)."""

    z: Tensor
    source: NodeSource
    handle: int
    frame: int


@dataclass
class TransitionGraph:
    """
    Directed bipartite graph from frame-t nodes (i) to frame-t+1 nodes (j).

    Edge tensors are indexed [i, j]; delta is indexed by j.
    """

    frame_t_nodes: List[ObjectState]
    frame_t1_nodes: List[ObjectState]
    edge_embeddings: Optional[Tensor] = None
    delta: Optional[Tensor] = None
    edge_logits: Optional[Tensor] = None
    edge_scores: Optional[Tensor] = None

    @property
    def edges(self) -> List[Tuple[int, int]]:
        return [(i, j) for i in range(len(self.frame_t_nodes)) for j in range(len(self.frame_t1_nodes))]

    @property
    def num_edges(self) -> int:
        return len(self.frame_t_nodes) * len(self.frame_t1_nodes)


def _mlp(in_dim: int, hidden_dim: int, out_dim: int, activation: Callable[[], nn.Module]) -> nn.Sequential:
    return nn.Sequential(nn.Linear(in_dim, hidden_dim), activation(), nn.Linear(hidden_dim, out_dim))


class ObjectEncoder(nn.Module):
    """Two-layer CNN (second conv stride 2) followed by a two-layer MLP."""

    def __init__(self, channels: int, roi_size: int, latent_dim: int, hidden_dim: int,
                 activation: Callable[[], nn.Module] = nn.SiLU):
        super().__init__()
        self.channels = channels
        self.roi_size = roi_size
        self.cnn = nn.Sequential(
            nn.Conv2d(channels, channels, kernel_size=3, padding=1),
            activation(),
            nn.Conv2d(channels, channels, kernel_size=3, stride=2, padding=1),
            activation(),
        )
        reduced = (roi_size + 1) // 2
        self.mlp = _mlp(channels * reduced * reduced, hidden_dim, latent_dim, activation)

    def forward(self, roi_features: Tensor) -> Tensor:
        expected = (self.channels, self.roi_size, self.roi_size)
        if roi_features.ndim != 4 or tuple(roi_features.shape[1:]) != expected:
            raise ShapeError(f"roi features must be (K, {expected[0]}, {expected[1]}, {expected[2]}), "
                             f"got {tuple(roi_features.shape)}")
        return self.mlp(self.cnn(roi_features).flatten(start_dim=1))


class ObjectGraph(nn.Module):
    """Encoder, edge function f_e, node function f_n and the edge-score head."""

    def __init__(self, channels: int = 32, roi_size: int = 14, latent_dim: int = 64, edge_dim: int = 64,
                 hidden_dim: int = 128, activation: Callable[[], nn.Module] = nn.SiLU):
        super().__init__()
        self.latent_dim = latent_dim
        self.edge_dim = edge_dim
        self.encoder = ObjectEncoder(channels, roi_size, latent_dim, hidden_dim, activation)
        self.edge_model = _mlp(2 * latent_dim, hidden_dim, edge_dim, activation)
        self.node_model = _mlp(latent_dim + edge_dim, hidden_dim, latent_dim, activation)
        self.score_head = _mlp(edge_dim, hidden_dim, 1, activation)

    @classmethod
    def from_config(cls, config: VisConfig) -> "ObjectGraph":
        m = config.model
        return cls(m.channels, m.roi_size, m.latent_dim, m.edge_dim, m.hidden_dim)


def encode_objects(params: ObjectGraph, roi_features: Tensor, source: NodeSource,
                   handles: Sequence[int], frame: int) -> List[ObjectState]:
    if roi_features.shape[0] != len(handles):
        raise ShapeError(f"{roi_features.shape[0]} RoI features for {len(handles)} handles")
    if not handles:
        return []
    z = params.encoder(roi_features)
    return [ObjectState(z[k], source, int(handle), frame) for k, handle in enumerate(handles)]


def encode_object(params: ObjectGraph, roi_feature: Tensor, source: NodeSource = NodeSource.PROPOSAL,
                  handle: int = 0, frame: int = 0) -> ObjectState:
    """Latent state of a single (C, R, R) RoI feature."""
    if roi_feature.ndim != 3:
        raise ShapeError(f"roi feature must be (C, R, R), got {tuple(roi_feature.shape)}")
    return encode_objects(params, roi_feature.unsqueeze(0), source, [handle], frame)[0]


def build_graph(states_t: Sequence[ObjectState], states_t1: Sequence[ObjectState]) -> TransitionGraph:
    return TransitionGraph(list(states_t), list(states_t1))


def _stack_states(states: Sequence[ObjectState], latent_dim: int, like: Tensor) -> Tensor:
    if not states:
        return like.new_zeros((0, latent_dim))
    return torch.stack([s.z for s in states])


def message_pass(graph: TransitionGraph, params: ObjectGraph) -> TransitionGraph:
    """
    One message-passing step.

    e[i, j] = f_e(z_t[i], z_t1[j]); delta[j] = f_n(z_t1[j], sum_i e[i, j]).
    A frame-t+1 node without incoming edges aggregates the zero vector.
    """
    like = next(params.parameters())
    z_t = _stack_states(graph.frame_t_nodes, params.latent_dim, like)
    z_t1 = _stack_states(graph.frame_t1_nodes, params.latent_dim, like)
    n_t, n_t1 = z_t.shape[0], z_t1.shape[0]

    pairs = torch.cat([
        z_t.unsqueeze(1).expand(n_t, n_t1, z_t.shape[1]),
        z_t1.unsqueeze(0).expand(n_t, n_t1, z_t1.shape[1]),
    ], dim=2)
    if n_t * n_t1:
        embeddings = params.edge_model(pairs.reshape(n_t * n_t1, -1)).reshape(n_t, n_t1, params.edge_dim)
    else:
        embeddings = like.new_zeros((n_t, n_t1, params.edge_dim))
    incoming = embeddings.sum(dim=0) if n_t else like.new_zeros((n_t1, params.edge_dim))
    if n_t1:
        delta = params.node_model(torch.cat([z_t1, incoming], dim=1))
    else:
        delta = like.new_zeros((0, params.latent_dim))
    return replace(graph, edge_embeddings=embeddings, delta=delta)


def score_edges(graph: TransitionGraph, params: ObjectGraph) -> TransitionGraph:
    """Populate edge_logits and edge_scores = sigmoid(MLP(e)) with shape (|t|, |t+1|)."""
    if graph.edge_embeddings is None:
        raise ShapeError("edge embeddings are missing; run message_pass first")
    n_t, n_t1 = graph.edge_embeddings.shape[:2]
    if n_t * n_t1:
        logits = params.score_head(graph.edge_embeddings.reshape(n_t * n_t1, -1)).reshape(n_t, n_t1)
    else:
        logits = graph.edge_embeddings.new_zeros((n_t, n_t1))
    return replace(graph, edge_logits=logits, edge_scores=torch.sigmoid(logits))


def relate(states_t: Sequence[ObjectState], states_t1: Sequence[ObjectState], params: ObjectGraph) -> TransitionGraph:
    """build_graph, message_pass and score_edges in one call."""
    return score_edges(message_pass(build_graph(states_t, states_t1), params), params)


def predict_transition(z_t: Union[ObjectState, Tensor], delta: Tensor) -> Tensor:
    z = z_t.z if isinstance(z_t, ObjectState) else z_t
    if z.shape != delta.shape:
        raise ShapeError(f"state {tuple(z.shape)} and transition {tuple(delta.shape)} differ in shape")
    return z + delta


def match_proposals(proposal_boxes: Sequence[Tuple[float, float, float, float]], gt_t1: GroundTruth,
                    iou_match_threshold: float = 0.5) -> List[Optional[int]]:
    """Track id of the best-IoU frame-t+1 object per proposal, or None below the threshold."""
    instances = gt_t1.instances(0)
    if not proposal_boxes or not instances:
        return [None] * len(proposal_boxes)
    ious = ops.box_iou(torch.tensor(proposal_boxes, dtype=torch.float64),
                       torch.tensor([inst.box for inst in instances], dtype=torch.float64)).numpy()
    best = ious.argmax(axis=1)
    return [instances[b].track_id if ious[j, b] >= iou_match_threshold else None for j, b in enumerate(best)]


def association_targets(gt_t: GroundTruth, proposals: Sequence, gt_t1: GroundTruth,
                        iou_match_threshold: float = 0.5) -> Tensor:
    """
    Binary label per edge (i, j): frame-t gt node i and proposal j share a track id.

    Frame-t nodes are gt_t's visible instances in track-id order; proposals are
    Detection objects or plain (x1, y1, x2, y2) boxes.
    """
    track_ids = [inst.track_id for inst in gt_t.instances(0)]
    boxes = [tuple(p.box) if hasattr(p, "box") else tuple(p) for p in proposals]
    matched = match_proposals(boxes, gt_t1, iou_match_threshold)
    labels = np.array([[1.0 if m is not None and m == tid else 0.0 for m in matched] for tid in track_ids])
    return torch.from_numpy(labels.reshape(len(track_ids), len(boxes)))


def association_loss(edge_logits: Tensor, labels: Tensor) -> Tensor:
    """
    Mean binary cross-entropy of the edge scores over edges; zero for an empty edge set.

    Takes the pre-sigmoid logits (graph.edge_logits) so saturated scores keep finite gradients.
    """
    if edge_logits.numel() == 0:
        return edge_logits.sum() * 0.0
    return F.binary_cross_entropy_with_logits(edge_logits, labels.to(edge_logits))


def transition_consistency_loss(predicted: Tensor, encoded: Tensor) -> Tensor:
    """Mean squared error between z_t + delta and the encoded frame-t+1 state over matched pairs."""
    if predicted.shape != encoded.shape:
        raise ShapeError(f"predicted {tuple(predicted.shape)} and encoded {tuple(encoded.shape)} differ in shape")
    if predicted.numel() == 0:
        return predicted.sum() * 0.0
    return F.mse_loss(predicted, encoded)
