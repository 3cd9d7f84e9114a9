import random
from typing import Any, Callable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pytest
import torch

from app.utils.config import VisConfig
from app.vision.synthdata.synthdata import (
    ClipSpec, GroundTruth, TrackAnnotation, generate_corpus, read_dataset, write_dataset,
)


def small_config(overrides: Optional[Mapping[str, Any]] = None) -> VisConfig:
    """A network small enough for CPU unit tests; `overrides` uses dotted keys."""
    base = VisConfig().override({
        "data.image_size": 64,
        "model.channels": 8,
        "model.latent_dim": 16,
        "model.edge_dim": 16,
        "model.hidden_dim": 32,
        "model.roi_size": 6,
        "model.mask_size": 12,
        "optim.iterations": 3,
        "optim.batch_size": 2,
        "optim.log_every": 1,
    })
    return base.override(overrides) if overrides else base


@pytest.fixture
def config() -> VisConfig:
    return small_config()


@pytest.fixture
def tiny_dataset(tmp_path):
    spec = ClipSpec(num_frames=3, height=64, width=64, num_objects=2, seed=7)
    corpus = generate_corpus(spec, 2)
    root = write_dataset([c for c, _ in corpus], [g for _, g in corpus], tmp_path / "data")
    return read_dataset(root)


def ground_truth_from_boxes(boxes: Sequence[Tuple[int, int, int, int]], size: Tuple[int, int] = (64, 64),
                            categories: Sequence[int] = None) -> GroundTruth:
    """Single-frame ground truth with one rectangular object per box; track ids are 1..N."""
    masks = np.zeros((1,) + tuple(size), dtype=np.int32)
    objects = []
    for k, (x1, y1, x2, y2) in enumerate(boxes, start=1):
        masks[0, y1:y2, x1:x2] = k
        category = categories[k - 1] if categories else 1
        objects.append(TrackAnnotation(k, category, [True]))
    return GroundTruth(masks, objects)


def finite_difference_errors(loss_fn: Callable[[], torch.Tensor], parameters: List[torch.Tensor],
                             count: int = 20, step: float = 1e-5, seed: int = 0) -> List[float]:
    """
    Relative errors between autograd and central differences for `count` randomly drawn
    scalar entries of `parameters` (double precision expected).
    """
    picker = random.Random(seed)
    for p in parameters:
        p.grad = None
    loss_fn().backward()
    errors = []
    for _ in range(count):
        param = picker.choice(parameters)
        index = tuple(picker.randrange(n) for n in param.shape)
        analytic = float(param.grad[index])
        with torch.no_grad():
            original = float(param[index])
            param[index] = original + step
            plus = float(loss_fn())
            param[index] = original - step
            minus = float(loss_fn())
            param[index] = original
        numeric = (plus - minus) / (2 * step)
        errors.append(abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6))
    return errors
