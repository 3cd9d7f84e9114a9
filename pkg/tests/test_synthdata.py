import json
import math
import shutil

import numpy as np
import pytest
from pydantic import ValidationError

from app.utils.errors import ContractError, FormatError
from app.vision.synthdata.synthdata import (
    AffineSample, AugmentParams, ClipSpec, GroundTruth, RleMask, ScriptedObject, TrackAnnotation,
    augment_pair, decode_rle, encode_rle, generate_clip, generate_corpus, mask_to_box, read_dataset,
    render_clip, reentry_clip, shape_area, warp_pair, write_dataset,
)


def test_same_spec_renders_identical_clips():
    spec = ClipSpec(num_frames=4, num_objects=3, seed=11, occlusion_rate=0.5, motion_model="linear_plus_jitter")
    clip_a, gt_a = generate_clip(spec)
    clip_b, gt_b = generate_clip(spec)
    np.testing.assert_array_equal(clip_a.frames, clip_b.frames)
    np.testing.assert_array_equal(gt_a.masks, gt_b.masks)


def test_different_seeds_render_different_clips():
    clip_a, _ = generate_clip(ClipSpec(seed=1))
    clip_b, _ = generate_clip(ClipSpec(seed=2))
    assert not np.array_equal(clip_a.frames, clip_b.frames)


def test_three_objects_are_all_visible_in_first_frame():
    clip, gt = generate_clip(ClipSpec(num_frames=5, num_objects=3, seed=3))
    assert clip.frames.shape == (5, 128, 128, 3)
    assert clip.frames.dtype == np.float32
    assert 0.0 <= clip.frames.min() and clip.frames.max() <= 1.0
    assert len(gt.objects) == 3
    assert all(obj.present[0] for obj in gt.objects)
    assert len(gt.instances(0)) == 3


def test_each_pixel_belongs_to_at_most_one_object():
    _, gt = generate_clip(ClipSpec(num_objects=4, occlusion_rate=1.0, seed=5))
    ids = {obj.track_id for obj in gt.objects}
    assert set(np.unique(gt.masks).tolist()) <= ids | {0}


def test_visible_area_lies_within_radius_range():
    spec = ClipSpec(num_frames=2, height=256, width=256, num_objects=2, radius_range=(0.15, 0.2), seed=9)
    _, gt = generate_clip(spec)
    for obj in gt.objects:
        area = int((gt.masks[0] == obj.track_id).sum())
        low = shape_area(obj.category_id, 0.15 * 256) * 0.99
        high = shape_area(obj.category_id, 0.2 * 256) * 1.01
        assert low <= area <= high


@pytest.mark.parametrize("category_id", [1, 2, 3, 4])
def test_rasterized_area_matches_analytic_area(category_id):
    radius = 40.0
    obj = ScriptedObject(1, category_id, radius, np.array([[100.3, 120.7]]), np.array([0.37]),
                         np.array([0.8, 0.5, 0.2]))
    _, gt = render_clip("area", 256, 256, [obj])
    area = int((gt.masks[0] == 1).sum())
    assert area == pytest.approx(shape_area(category_id, radius), rel=0.01)


def test_nearer_object_owns_overlap():
    centers = np.array([[32.0, 32.0]])
    far = ScriptedObject(1, 1, 12.0, centers, np.zeros(1), np.array([1.0, 0.0, 0.0]))
    near = ScriptedObject(2, 2, 12.0, centers, np.zeros(1), np.array([0.0, 0.0, 1.0]))
    _, gt = render_clip("overlap", 64, 64, [far, near])
    assert gt.masks[0, 32, 32] == 2
    assert gt.objects[0].present == [True]


def test_exit_and_reentry_object_disappears_then_returns():
    spec = ClipSpec(num_frames=9, num_objects=2, exit_reentry=True, seed=4)
    _, gt = generate_clip(spec)
    returning = [o for o in gt.objects if o.present[0] and o.present[-1] and not all(o.present)]
    assert returning


def test_reentry_clip_keeps_identity():
    _, gt = reentry_clip(num_frames=9)
    triangle = next(o for o in gt.objects if o.category_id == 3)
    assert triangle.present[0] and triangle.present[-1]
    assert not all(triangle.present)


def test_reentry_clip_needs_three_frames():
    with pytest.raises(ContractError, match="num_frames"):
        reentry_clip(num_frames=2)


def test_corpus_clip_names_and_seeds():
    corpus = generate_corpus(ClipSpec(num_frames=2, seed=6), 3)
    assert [clip.clip_id for clip, _ in corpus] == ["clip0000", "clip0001", "clip0002"]
    clip0, _ = generate_clip(ClipSpec(num_frames=2, seed=6))
    np.testing.assert_array_equal(corpus[0][0].frames, clip0.frames)


def test_invalid_spec_names_the_field():
    with pytest.raises(ValidationError, match="num_frames"):
        ClipSpec(num_frames=1)
    with pytest.raises(ValidationError, match="category_set"):
        ClipSpec(category_set=(7,))


def test_rle_examples():
    assert encode_rle(np.zeros((2, 3), dtype=np.uint8)).counts == [6]
    assert encode_rle(np.array([[0, 0, 1, 1, 1, 0]])).counts == [2, 3, 1]
    assert encode_rle(np.ones((2, 3))).counts == [0, 6]
    np.testing.assert_array_equal(decode_rle(RleMask([0, 6], (2, 3))), np.ones((2, 3), dtype=np.uint8))
    np.testing.assert_array_equal(decode_rle(RleMask([2, 3, 1], (1, 6))), [[0, 0, 1, 1, 1, 0]])


def test_rle_round_trip_on_random_masks():
    rng = np.random.default_rng(0)
    for _ in range(100):
        mask = rng.random((int(rng.integers(1, 12)), int(rng.integers(1, 12)))) < rng.random()
        rle = encode_rle(mask)
        assert sum(rle.counts) == mask.size
        assert rle.area == int(mask.sum())
        np.testing.assert_array_equal(decode_rle(rle), mask.astype(np.uint8))


def test_rle_rejects_bad_counts():
    with pytest.raises(FormatError, match="sum to 5"):
        decode_rle(RleMask([2, 3], (2, 3)))
    with pytest.raises(FormatError):
        decode_rle(RleMask([-1, 7], (2, 3)))


def test_mask_to_box_uses_pixel_edges():
    mask = np.zeros((10, 10), dtype=bool)
    mask[2:5, 3:8] = True
    assert mask_to_box(mask) == (3.0, 2.0, 8.0, 5.0)
    with pytest.raises(ContractError):
        mask_to_box(np.zeros((4, 4), dtype=bool))


def _single_frame(seed: int = 0):
    clip, gt = generate_clip(ClipSpec(num_frames=2, num_objects=2, seed=seed))
    return clip.frames[0], gt.frame(0)


def test_identity_augmentation_copies_the_frame():
    image, gt = _single_frame()
    params = AugmentParams(rotation=(0, 0), translate_x=(0, 0), translate_y=(0, 0), scale=(1, 1),
                           shear=(0, 0), blur_length=(1, 1))
    pair, pair_gt = augment_pair(image, gt, params, seed=3)
    np.testing.assert_allclose(pair.frames[1], pair.frames[0], atol=1e-6)
    np.testing.assert_array_equal(pair_gt.masks[1], pair_gt.masks[0])


def test_translation_moves_centroid():
    obj = ScriptedObject(1, 1, 15.0, np.array([[64.0, 64.0]]), np.zeros(1), np.array([0.9, 0.9, 0.9]))
    clip, gt = render_clip("still", 128, 128, [obj])
    _, pair_gt = warp_pair(clip.frames[0], gt, AffineSample(angle=0.0, tx=5.0, ty=-3.0, scale=1.0, shear=0.0,
                                                            blur_length=1))
    before = np.argwhere(pair_gt.masks[0] == 1).mean(axis=0)
    after = np.argwhere(pair_gt.masks[1] == 1).mean(axis=0)
    shift = after - before
    assert shift[1] == pytest.approx(5.0, abs=0.5)
    assert shift[0] == pytest.approx(-3.0, abs=0.5)


def test_augmentation_is_deterministic_in_seed():
    image, gt = _single_frame()
    a, a_gt = augment_pair(image, gt, AugmentParams(), seed=21)
    b, b_gt = augment_pair(image, gt, AugmentParams(), seed=21)
    np.testing.assert_array_equal(a.frames, b.frames)
    np.testing.assert_array_equal(a_gt.masks, b_gt.masks)


def test_object_warped_out_of_frame_is_absent():
    image, gt = _single_frame()
    _, pair_gt = warp_pair(image, gt, AffineSample(angle=0.0, tx=500.0, ty=0.0, scale=1.0, shear=0.0,
                                                   blur_length=1))
    assert all(obj.present == [True, False] for obj in pair_gt.objects)
    assert not pair_gt.masks[1].any()


def test_ground_truth_rejects_stray_ids():
    masks = np.zeros((1, 4, 4), dtype=np.int32)
    masks[0, 0, 0] = 5
    with pytest.raises(ContractError, match="5"):
        GroundTruth(masks, [TrackAnnotation(1, 1, [False])])


@pytest.fixture
def dataset_root(tmp_path):
    corpus = generate_corpus(ClipSpec(num_frames=3, height=64, width=64, num_objects=2, seed=1), 2)
    return write_dataset([c for c, _ in corpus], [g for _, g in corpus], tmp_path / "ds"), corpus


def test_dataset_round_trip(dataset_root):
    root, corpus = dataset_root
    dataset = read_dataset(root)
    assert dataset.clip_ids == ["clip0000", "clip0001"]
    assert dataset.categories[3] == "triangle"
    for (clip, gt), (loaded_clip, loaded_gt) in zip(corpus, dataset):
        np.testing.assert_array_equal(loaded_clip.frames, clip.frames)
        np.testing.assert_array_equal(loaded_gt.masks, gt.masks)
        assert [o.present for o in loaded_gt.objects] == [o.present for o in gt.objects]


def test_missing_annotations_file(tmp_path):
    with pytest.raises(FormatError, match="annotations.json"):
        read_dataset(tmp_path)


def test_missing_clip_directory_is_named(dataset_root):
    root, _ = dataset_root
    shutil.rmtree(root / "clips" / "clip0001")
    with pytest.raises(FormatError, match="clip0001"):
        read_dataset(root)


def test_malformed_annotation_names_clip_and_field(dataset_root):
    root, _ = dataset_root
    payload = json.loads((root / "annotations.json").read_text())
    payload["clips"][1]["objects"][0]["track_id"] = "x"
    (root / "annotations.json").write_text(json.dumps(payload))
    with pytest.raises(FormatError) as info:
        read_dataset(root)
    assert "clip0001" in str(info.value)
    assert "track_id" in str(info.value)


def test_missing_frame_file_fails_on_load(dataset_root):
    root, _ = dataset_root
    (root / "clips" / "clip0000" / "frames" / "00002.png").unlink()
    dataset = read_dataset(root)
    with pytest.raises(FormatError, match="00002.png"):
        dataset.load("clip0000")


def test_clip_cache_is_bounded(dataset_root):
    dataset = read_dataset(dataset_root[0], cache_size=1)
    first = dataset.load("clip0000")
    assert dataset.load("clip0000") is first
    dataset.load("clip0001")
    again = dataset.load("clip0000")
    assert again is not first
    np.testing.assert_array_equal(again[0].frames, first[0].frames)


def test_unknown_clip_id(dataset_root):
    dataset = read_dataset(dataset_root[0])
    with pytest.raises(ContractError):
        dataset.load("nope")


def test_shape_area_rejects_unknown_category():
    with pytest.raises(ContractError):
        shape_area(9, 1.0)
    assert shape_area(1, 2.0) == pytest.approx(4 * math.pi)
