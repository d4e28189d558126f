"""Tests for the shared vocabulary types: boxes, detections, specs."""

import numpy as np
import pytest
import torch

from patchlab.core import (
    AdvMode,
    AttackSpec,
    AttackType,
    BoundingBox,
    Detection,
    InitMode,
    LossWeights,
    RawDetections,
    clamp01,
    iou,
    validate_image,
    validate_patch,
)

from _oracles import iou_ref


class TestBoundingBox:
    def test_rejects_nonpositive_extent(self):
        with pytest.raises(ValueError, match="positive"):
            BoundingBox(0.5, 0.5, 0.0, 0.2)
        with pytest.raises(ValueError, match="positive"):
            BoundingBox(0.5, 0.5, 0.2, -0.1)

    def test_rejects_center_outside_unit_square(self):
        with pytest.raises(ValueError, match="center"):
            BoundingBox(1.2, 0.5, 0.2, 0.2)
        with pytest.raises(ValueError, match="center"):
            BoundingBox(0.5, -0.01, 0.2, 0.2)

    def test_corners_are_clipped(self):
        box = BoundingBox(0.05, 0.5, 0.2, 0.2)
        x1, y1, x2, y2 = box.corners()
        assert x1 == 0.0
        assert x2 == pytest.approx(0.15)
        assert (y1, y2) == (pytest.approx(0.4), pytest.approx(0.6))

    def test_from_corners_round_trip(self):
        box = BoundingBox.from_corners(0.25, 0.25, 0.75, 0.5, class_id=3)
        assert (box.cx, box.cy, box.w, box.h) == (0.5, 0.375, 0.5, 0.25)
        assert box.class_id == 3
        assert box.corners() == (0.25, 0.25, 0.75, 0.5)

    def test_from_corners_rejects_degenerate(self):
        with pytest.raises(ValueError, match="degenerate"):
            BoundingBox.from_corners(0.5, 0.2, 0.5, 0.4)
        with pytest.raises(ValueError, match="degenerate"):
            BoundingBox.from_corners(0.2, 0.5, 0.4, 0.3)

    def test_contains_is_inclusive_at_edges(self):
        box = BoundingBox.from_corners(0.25, 0.25, 0.75, 0.75)
        assert box.contains(0.25, 0.75)
        assert box.contains(0.5, 0.5)
        assert not box.contains(0.2499, 0.5)
        assert not box.contains(0.5, 0.7501)

    def test_area_accounts_for_clipping(self):
        box = BoundingBox(0.0, 0.0, 0.5, 0.5)
        assert box.area() == pytest.approx(0.0625)

    def test_with_class_preserves_geometry(self):
        box = BoundingBox(0.3, 0.4, 0.1, 0.2)
        relabeled = box.with_class(5)
        assert relabeled.class_id == 5
        assert (relabeled.cx, relabeled.cy, relabeled.w, relabeled.h) == (
            box.cx,
            box.cy,
            box.w,
            box.h,
        )


class TestIou:
    def test_identical_boxes(self):
        box = BoundingBox(0.5, 0.5, 0.4, 0.2)
        assert iou(box, box) == 1.0

    def test_disjoint_boxes(self):
        a = BoundingBox.from_corners(0.0, 0.0, 0.2, 0.2)
        b = BoundingBox.from_corners(0.5, 0.5, 0.7, 0.7)
        assert iou(a, b) == 0.0

    def test_touching_boxes_have_zero_iou(self):
        a = BoundingBox.from_corners(0.0, 0.0, 0.5, 0.5)
        b = BoundingBox.from_corners(0.5, 0.0, 1.0, 0.5)
        assert iou(a, b) == 0.0

    def test_nested_boxes(self):
        outer = BoundingBox.from_corners(0.0, 0.0, 1.0, 1.0)
        inner = BoundingBox.from_corners(0.25, 0.25, 0.75, 0.75)
        assert iou(outer, inner) == 0.25

    def test_half_overlap(self):
        a = BoundingBox.from_corners(0.0, 0.0, 0.5, 1.0)
        b = BoundingBox.from_corners(0.0, 0.0, 1.0, 1.0)
        assert iou(a, b) == 0.5

    def test_matches_reference_on_random_pairs(self):
        rng = np.random.default_rng(7)
        for _ in range(300):
            boxes = []
            for _ in range(2):
                w, h = rng.uniform(0.05, 0.9, size=2)
                cx = rng.uniform(0.0, 1.0)
                cy = rng.uniform(0.0, 1.0)
                boxes.append(BoundingBox(float(cx), float(cy), float(w), float(h)))
            a, b = boxes
            assert iou(a, b) == pytest.approx(iou_ref(a, b), abs=1e-12)
            assert iou(a, b) == iou(b, a)
            assert 0.0 <= iou(a, b) <= 1.0


class TestDetection:
    def test_class_id_passthrough(self):
        det = Detection(BoundingBox(0.5, 0.5, 0.2, 0.2, class_id=4), 0.9)
        assert det.class_id == 4

    def test_class_id_requires_label(self):
        det = Detection(BoundingBox(0.5, 0.5, 0.2, 0.2), 0.9)
        with pytest.raises(ValueError, match="class"):
            det.class_id


class TestRawDetections:
    def test_shape_validation(self):
        with pytest.raises(ValueError, match="shapes"):
            RawDetections(torch.zeros(3, 4), torch.zeros(2), torch.zeros(2, 5))
        with pytest.raises(ValueError, match="shapes"):
            RawDetections(torch.zeros(2, 4), torch.zeros(2), torch.zeros(3, 5))

    def test_len_and_num_classes(self):
        raw = RawDetections(torch.zeros(6, 4), torch.zeros(6), torch.zeros(6, 3))
        assert len(raw) == 6
        assert raw.num_classes == 3

    def test_box_clamps_degenerate_values(self):
        boxes = torch.tensor([[1.5, -0.2, 0.0, 0.3]])
        raw = RawDetections(boxes, torch.ones(1), torch.ones(1, 2))
        box = raw.box(0)
        assert box.cx == 1.0
        assert box.cy == 0.0
        assert box.w == pytest.approx(1e-6)
        assert box.h == pytest.approx(0.3)


class TestLossWeights:
    def test_rejects_negative_weight(self):
        with pytest.raises(ValueError, match="non-negative"):
            LossWeights(adv=-1.0)

    def test_defaults_per_attack(self):
        hiding = LossWeights.defaults_for(AttackType.HIDING)
        assert (hiding.adv, hiding.tv, hiding.nps, hiding.his) == (3.0, 1.0, 1.0, 0.0)
        for attack in (AttackType.CREATING, AttackType.ALTERING):
            w = LossWeights.defaults_for(attack)
            assert (w.adv, w.tv, w.nps, w.his) == (3.0, 0.5, 1.0, 0.3)

    def test_dict_round_trip(self):
        w = LossWeights(adv=2.0, tv=0.25, nps=0.5, his=0.1)
        assert LossWeights.from_dict(w.to_dict()) == w


class TestAttackSpec:
    def test_creating_requires_target(self):
        with pytest.raises(ValueError, match="target class"):
            AttackSpec(AttackType.CREATING)
        with pytest.raises(ValueError, match="target class"):
            AttackSpec(AttackType.ALTERING, target_class=-1)

    def test_hiding_target_optional(self):
        spec = AttackSpec(AttackType.HIDING)
        assert spec.target_class is None
        assert spec.adv_mode is AdvMode.BOTH

    def test_dict_round_trip(self):
        spec = AttackSpec(
            AttackType.CREATING,
            target_class=2,
            adv_mode=AdvMode.CLS_ONLY,
            weights=LossWeights(3.0, 0.5, 1.0, 0.3),
            init_mode=InitMode.REFERENCE,
        )
        assert AttackSpec.from_dict(spec.to_dict()) == spec

    def test_from_dict_fills_defaults(self):
        spec = AttackSpec.from_dict({"attack_type": "hiding"})
        assert spec.attack_type is AttackType.HIDING
        assert spec.weights == LossWeights()
        assert spec.init_mode is InitMode.GRAY


class TestValidators:
    def test_clamp01(self):
        x = torch.tensor([-0.5, 0.25, 1.75])
        assert torch.equal(clamp01(x), torch.tensor([0.0, 0.25, 1.0]))

    def test_validate_image_shape(self):
        with pytest.raises(ValueError, match="shape"):
            validate_image(torch.zeros(1, 8, 8))
        with pytest.raises(ValueError, match="shape"):
            validate_image(torch.zeros(3, 8))

    def test_validate_image_dtype_and_range(self):
        with pytest.raises(ValueError, match="float"):
            validate_image(torch.zeros(3, 8, 8, dtype=torch.uint8))
        with pytest.raises(ValueError, match="outside"):
            validate_image(torch.full((3, 8, 8), 1.5))

    def test_validate_patch_square_and_minimum_side(self):
        validate_patch(torch.rand(3, 8, 8))
        with pytest.raises(ValueError, match="square"):
            validate_patch(torch.rand(3, 8, 9))
        with pytest.raises(ValueError, match="minimum"):
            validate_patch(torch.rand(3, 7, 7))
