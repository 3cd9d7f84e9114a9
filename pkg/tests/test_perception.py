import math

import numpy as np
import pytest
import torch

from app.utils.errors import ContractError, ShapeError
from app.vision.perception.perception import (
    DenseHeadOutput, Detection, PerceptionModel, assign_targets, crop_mask_targets, decode_detections,
    detection_losses, frames_to_tensor, level_locations, predict_mask, pyramid_geometry, roi_align, roi_levels,
)
from app.vision.synthdata.synthdata import ClipSpec, generate_clip
from tests.conftest import finite_difference_errors, ground_truth_from_boxes, small_config


@pytest.fixture
def model():
    torch.manual_seed(0)
    return PerceptionModel.from_config(small_config())


def test_pyramid_shapes_for_default_model():
    torch.manual_seed(0)
    net = PerceptionModel(channels=32)
    features = net.extract_pyramid(torch.rand(1, 3, 128, 128))
    assert list(features.levels) == [3, 4, 5]
    assert features.geometry() == {3: (1, 32, 16, 16), 4: (1, 32, 8, 8), 5: (1, 32, 4, 4)}
    assert features.strides == {3: 8, 4: 16, 5: 32}


def test_frame_size_must_divide_by_coarsest_stride(model):
    with pytest.raises(ShapeError, match="multiple of 32"):
        model.extract_pyramid(torch.rand(1, 3, 100, 128))
    with pytest.raises(ShapeError):
        model.extract_pyramid(torch.rand(3, 64, 64))


def test_zero_frame_without_biases_gives_zero_features(model):
    with torch.no_grad():
        for module in (model.backbone, model.fpn):
            for name, param in module.named_parameters():
                if name.endswith("bias"):
                    param.zero_()
        features = model.extract_pyramid(torch.zeros(1, 3, 64, 64))
    for grid in features.levels.values():
        assert torch.count_nonzero(grid) == 0


def test_detect_shapes_and_non_negative_boxes(model):
    with torch.no_grad():
        dense = model.detect(model.extract_pyramid(torch.rand(2, 3, 64, 64)))
    cls, box, ctr = dense.flatten()
    assert cls.shape == (2, 64 + 16 + 4, 4)
    assert box.shape == (2, 84, 4)
    assert ctr.shape == (2, 84)
    assert bool((box >= 0).all())


def test_extraction_is_deterministic(model):
    frame = torch.rand(1, 3, 64, 64)
    with torch.no_grad():
        a = model.extract_pyramid(frame)
        b = model.extract_pyramid(frame)
    for level in a.levels:
        assert torch.equal(a.levels[level], b.levels[level])


def test_frames_to_tensor_layout():
    frames = np.random.default_rng(0).random((2, 8, 6, 3)).astype(np.float32)
    tensor = frames_to_tensor(frames)
    assert tensor.shape == (2, 3, 8, 6)
    assert float(tensor[1, 2, 5, 4]) == pytest.approx(float(frames[1, 5, 4, 2]))
    with pytest.raises(ShapeError):
        frames_to_tensor(np.zeros((8, 6)))


def test_forty_pixel_box_positives_match_brute_force():
    geometry = pyramid_geometry(small_config({"data.image_size": 128}), 128, 128)
    box = (20, 30, 60, 70)
    targets = assign_targets(ground_truth_from_boxes([box], size=(128, 128)), geometry)

    expected = 0
    for level in geometry.levels:
        low, high = geometry.scale_ranges[level]
        for x, y in level_locations(geometry, level):
            d = (x - box[0], y - box[1], box[2] - x, box[3] - y)
            if min(d) > 0 and low < max(d) <= high:
                expected += 1
    assert expected == 25
    assert targets.num_positive == expected
    assert targets.positive[:targets.level_sizes[0]].sum() == 25


def test_location_at_box_center_has_unit_centerness():
    geometry = pyramid_geometry(small_config(), 64, 64)
    targets = assign_targets(ground_truth_from_boxes([(16, 16, 48, 48)], categories=[3]), geometry)
    center = 4 * 8 + 4
    assert int(targets.labels[center]) == 3
    assert float(targets.centerness[center]) == pytest.approx(1.0)
    assert targets.ltrb[center].tolist() == [16.0, 16.0, 16.0, 16.0]


def test_empty_ground_truth_has_no_positives():
    geometry = pyramid_geometry(small_config(), 64, 64)
    targets = assign_targets(ground_truth_from_boxes([]), geometry)
    assert targets.num_positive == 0
    assert targets.labels.shape == (84,)


def test_smaller_box_wins_shared_location():
    geometry = pyramid_geometry(small_config(), 64, 64)
    gt = ground_truth_from_boxes([(4, 4, 60, 60), (20, 20, 44, 44)], categories=[1, 2])
    targets = assign_targets(gt, geometry)
    assert int(targets.labels[4 * 8 + 4]) == 2


def _single_level_output(cls_logits, box_regression, centerness):
    return DenseHeadOutput({3: cls_logits}, {3: box_regression}, {3: centerness})


def _logit(p: float) -> float:
    return math.log(p / (1 - p))


def test_decode_hand_case_is_clipped():
    cls = torch.full((1, 4, 4, 4), -20.0)
    cls[0, 0, 1, 1] = _logit(0.81)
    box = torch.zeros(1, 4, 4, 4)
    box[0, :, 1, 1] = 16.0
    ctr = torch.full((1, 1, 4, 4), 30.0)
    detections = decode_detections(_single_level_output(cls, box, ctr), (32, 32))
    assert len(detections) == 1
    assert detections[0].box == (0.0, 0.0, 24.0, 24.0)
    assert detections[0].category_id == 1
    assert detections[0].score == pytest.approx(0.9, abs=1e-5)
    assert detections[0].level == 3


def test_decode_suppresses_duplicate_box():
    cls = torch.full((1, 4, 4, 4), -20.0)
    cls[0, 0, 1, 1] = _logit(0.81)
    cls[0, 0, 2, 2] = _logit(0.64)
    box = torch.zeros(1, 4, 4, 4)
    box[0, :, 1, 1] = 16.0
    box[0, :, 2, 2] = torch.tensor([24.0, 24.0, 8.0, 8.0])
    ctr = torch.full((1, 1, 4, 4), 30.0)
    detections = decode_detections(_single_level_output(cls, box, ctr), (32, 32), nms_iou=0.5)
    assert [round(d.score, 4) for d in detections] == [0.9]


def test_decode_below_threshold_is_empty():
    cls = torch.full((1, 4, 4, 4), -20.0)
    output = _single_level_output(cls, torch.ones(1, 4, 4, 4), torch.zeros(1, 1, 4, 4))
    assert decode_detections(output, (32, 32)) == []


def test_detection_rejects_degenerate_box():
    with pytest.raises(ContractError):
        Detection((5.0, 5.0, 5.0, 9.0), 1, 0.5)


def _bilinear(grid: np.ndarray, y: float, x: float) -> float:
    height, width = grid.shape
    if y < -1.0 or y > height or x < -1.0 or x > width:
        return 0.0
    y, x = max(y, 0.0), max(x, 0.0)
    y_low, x_low = int(y), int(x)
    if y_low >= height - 1:
        y_low = y_high = height - 1
        y = float(y_low)
    else:
        y_high = y_low + 1
    if x_low >= width - 1:
        x_low = x_high = width - 1
        x = float(x_low)
    else:
        x_high = x_low + 1
    ly, lx = y - y_low, x - x_low
    return ((1 - ly) * (1 - lx) * grid[y_low, x_low] + (1 - ly) * lx * grid[y_low, x_high]
            + ly * (1 - lx) * grid[y_high, x_low] + ly * lx * grid[y_high, x_high])


def _roi_align_oracle(grid: np.ndarray, box, size: int, stride: int, samples: int = 2) -> np.ndarray:
    x1, y1, x2, y2 = (v / stride for v in box)
    bin_w, bin_h = max(x2 - x1, 1.0) / size, max(y2 - y1, 1.0) / size
    out = np.zeros((size, size))
    for ph in range(size):
        for pw in range(size):
            acc = 0.0
            for iy in range(samples):
                y = y1 + ph * bin_h + (iy + 0.5) * bin_h / samples
                for ix in range(samples):
                    x = x1 + pw * bin_w + (ix + 0.5) * bin_w / samples
                    acc += _bilinear(grid, y, x)
            out[ph, pw] = acc / samples ** 2
    return out


def test_roi_align_constant_feature():
    feature = torch.full((5, 8, 8), 2.5)
    pooled = roi_align(feature, (8.0, 12.0, 40.0, 50.0), output_size=14, stride=8)
    assert pooled.shape == (5, 14, 14)
    torch.testing.assert_close(pooled, torch.full((5, 14, 14), 2.5))


@pytest.mark.parametrize("box", [(4.0, 4.0, 40.0, 52.0), (0.0, 0.0, 64.0, 64.0), (10.0, 3.0, 13.0, 7.0)])
def test_roi_align_matches_bilinear_oracle(box):
    ys, xs = np.mgrid[0:8, 0:8].astype(np.float64)
    grid = 0.5 * xs + 0.25 * ys + 1.0 + 0.1 * np.sin(xs * ys)
    pooled = roi_align(torch.from_numpy(grid)[None], box, output_size=7, stride=8)
    np.testing.assert_allclose(pooled[0].numpy(), _roi_align_oracle(grid, box, 7, 8), atol=1e-6)


def test_roi_align_rejects_degenerate_box():
    with pytest.raises(ContractError):
        roi_align(torch.zeros(1, 8, 8), (4.0, 4.0, 4.0, 10.0))


def test_roi_levels_follow_box_size():
    boxes = torch.tensor([[0, 0, 16, 16], [0, 0, 64, 64], [0, 0, 128, 128], [0, 0, 512, 512]], dtype=torch.float32)
    assert roi_levels(boxes, (3, 4, 5)).tolist() == [3, 3, 4, 5]


def test_pool_returns_one_roi_per_box(model):
    features = model.extract_pyramid(torch.rand(2, 3, 64, 64))
    boxes = torch.tensor([[4.0, 4.0, 30.0, 30.0], [10.0, 20.0, 60.0, 62.0]])
    pooled = model.pool(features, boxes, batch_index=1)
    assert pooled.shape == (2, 8, 6, 6)
    assert model.pool(features, boxes[:0]).shape == (0, 8, 6, 6)


def test_predict_mask_range_and_shape(model):
    mask = predict_mask(model, torch.rand(8, 6, 6), category_id=2)
    assert mask.shape == (12, 12)
    assert bool(((mask > 0) & (mask < 1)).all())
    with pytest.raises(ContractError):
        predict_mask(model, torch.rand(8, 6, 6), category_id=9)
    with pytest.raises(ShapeError):
        predict_mask(model, torch.rand(6, 6), category_id=1)


def test_zeroed_attention_weighs_every_cell_half(model):
    with torch.no_grad():
        model.mask_head.attention_conv.weight.zero_()
        model.mask_head.attention_conv.bias.zero_()
        attention = model.mask_head.attention(torch.rand(3, 8, 6, 6))
    torch.testing.assert_close(attention, torch.full((3, 1, 6, 6), 0.5))


def test_crop_mask_targets_full_box_is_all_ones():
    mask = np.zeros((64, 64), dtype=bool)
    mask[10:40, 20:50] = True
    targets = crop_mask_targets(mask, torch.tensor([[20.0, 10.0, 50.0, 40.0]]), 12)
    assert targets.shape == (1, 12, 12)
    assert bool((targets == 1).all())


def _dense_from_targets(targets, geometry, num_classes: int = 4) -> DenseHeadOutput:
    cls_logits, boxes, centerness = {}, {}, {}
    start = 0
    for level, size in zip(geometry.levels, targets.level_sizes):
        rows, cols = geometry.grid_size(level)
        labels = targets.labels[start:start + size]
        logits = torch.full((size, num_classes), -30.0, dtype=torch.float64)
        positive = labels > 0
        logits[positive, labels[positive] - 1] = 30.0
        ctr = targets.centerness[start:start + size].double().clamp(1e-9, 1 - 1e-9)
        ctr_logits = torch.where(positive, torch.log(ctr / (1 - ctr)), torch.zeros_like(ctr))
        cls_logits[level] = logits.T.reshape(1, num_classes, rows, cols)
        boxes[level] = targets.ltrb[start:start + size].double().T.reshape(1, 4, rows, cols)
        centerness[level] = ctr_logits.reshape(1, 1, rows, cols)
        start += size
    return DenseHeadOutput(cls_logits, boxes, centerness)


def test_losses_vanish_for_perfect_predictions():
    geometry = pyramid_geometry(small_config(), 64, 64)
    targets = assign_targets(ground_truth_from_boxes([(8, 8, 40, 30), (30, 36, 60, 62)], categories=[1, 4]),
                             geometry)
    losses = detection_losses(_dense_from_targets(targets, geometry), targets)
    assert float(losses["box"]) == pytest.approx(0.0, abs=1e-9)
    assert float(losses["cls"]) < 1e-6
    c = targets.centerness[targets.positive].double()
    entropy = -(torch.xlogy(c, c) + torch.xlogy(1 - c, 1 - c)).sum() / targets.num_positive
    assert float(losses["ctr"]) == pytest.approx(float(entropy), abs=1e-6)
    assert float(losses["mask"]) == 0.0


def test_empty_ground_truth_leaves_only_classification(model):
    geometry = pyramid_geometry(small_config(), 64, 64)
    targets = assign_targets(ground_truth_from_boxes([]), geometry)
    dense = model.detect(model.extract_pyramid(torch.rand(1, 3, 64, 64)))
    losses = detection_losses(dense, targets, mask_logits=torch.zeros(0, 12, 12), mask_targets=torch.zeros(0, 12, 12))
    assert float(losses["box"]) == 0.0
    assert float(losses["ctr"]) == 0.0
    assert float(losses["mask"]) == 0.0
    assert float(losses["cls"]) > 0.0
    assert all(torch.isfinite(v) for v in losses.values())


def test_detection_loss_gradients_match_finite_differences():
    torch.manual_seed(0)
    net = PerceptionModel.from_config(small_config()).double()
    clip, gt = generate_clip(ClipSpec(num_frames=2, height=64, width=64, num_objects=2, seed=5))
    frame = frames_to_tensor(clip.frames[0]).double()
    frame_gt = gt.frame(0)
    targets = assign_targets(frame_gt, pyramid_geometry(small_config(), 64, 64))
    instances = frame_gt.instances(0)
    boxes = torch.tensor([inst.box for inst in instances], dtype=torch.float64)
    categories = [inst.category_id for inst in instances]
    mask_targets = torch.cat([crop_mask_targets(inst.mask, boxes[k:k + 1], 12) for k, inst in enumerate(instances)])
    assert targets.num_positive > 0

    def loss_fn():
        features = net.extract_pyramid(frame)
        logits = net.mask_logits(net.pool(features, boxes), categories)
        losses = detection_losses(net.detect(features), targets, logits, mask_targets)
        return sum(losses.values())

    errors = finite_difference_errors(loss_fn, list(net.parameters()), count=20)
    assert max(errors) < 1e-4
