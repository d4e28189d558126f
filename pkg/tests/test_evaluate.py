"""Tests for patch application and whole-set attack evaluation."""

import numpy as np
import pytest
import torch

from patchlab.core import AttackSpec, AttackType, BoundingBox
from patchlab.evaluate import (
    EvalConfig,
    apply_patch_to_image,
    attack_report,
    build_reference_histogram,
    compose_patch,
    evaluate_attack,
    mean_cm,
    noise_patch,
    sample_placements,
)
from patchlab.geometry import CreatingPlacement, MaskSpec, rasterize_mask
from patchlab.losses import Histogram
from patchlab.metrics import EvalCase
from patchlab.render import mask_to_tensor

HIDING = AttackSpec(AttackType.HIDING)
CREATING = AttackSpec(AttackType.CREATING, target_class=1)

BOXES = [
    BoundingBox(0.3, 0.3, 0.4, 0.4, class_id=0),
    BoundingBox(0.72, 0.72, 0.35, 0.35, class_id=1),
]


def _image(size=128, fill=0.4):
    return torch.full((3, size, size), fill)


@pytest.fixture(scope="module")
def val_scenes(tiny_ds):
    return tiny_ds.load_split("val")


@pytest.fixture(scope="module")
def eval_patch():
    return noise_patch(16, np.random.default_rng(9))


@pytest.fixture(scope="module")
def report_and_inputs(tiny_detector, val_scenes):
    patch = noise_patch(16, np.random.default_rng(21))
    report = attack_report(tiny_detector, val_scenes, patch, HIDING, seed=5)
    return report, patch


class TestEvalConfig:
    def test_defaults(self):
        cfg = EvalConfig()
        assert cfg.patch_frac == 0.35
        assert cfg.apply_phys is True
        assert cfg.conf_thresh == 0.25

    def test_validation(self):
        with pytest.raises(ValueError, match="batch_size"):
            EvalConfig(batch_size=0)
        with pytest.raises(ValueError, match="max_images"):
            EvalConfig(max_images=0)


class TestNoisePatch:
    def test_shape_and_range(self):
        p = noise_patch(16, np.random.default_rng(0))
        assert p.shape == (3, 16, 16)
        assert p.dtype == torch.float32
        assert p.min() >= 0.0 and p.max() <= 1.0

    def test_deterministic_per_seed(self):
        a = noise_patch(16, np.random.default_rng(4))
        b = noise_patch(16, np.random.default_rng(4))
        c = noise_patch(16, np.random.default_rng(5))
        assert torch.equal(a, b)
        assert not torch.equal(a, c)


class TestSamplePlacements:
    def test_hiding_one_placement_per_object(self):
        specs, placement = sample_placements(
            BOXES, HIDING, np.random.default_rng(0), EvalConfig(), (128, 128)
        )
        assert len(specs) == 2
        assert placement is None
        assert all(isinstance(s, MaskSpec) for s in specs)

    def test_creating_single_region(self):
        specs, placement = sample_placements(
            [], CREATING, np.random.default_rng(0), EvalConfig(), (128, 128)
        )
        assert len(specs) == 1
        assert isinstance(placement, CreatingPlacement)

    def test_small_object_skipped_with_warning(self):
        boxes = [BOXES[0], BoundingBox(0.8, 0.2, 0.1, 0.1, class_id=1)]
        with pytest.warns(UserWarning, match="unpatchable"):
            specs, _ = sample_placements(
                boxes, HIDING, np.random.default_rng(0), EvalConfig(), (128, 128)
            )
        assert len(specs) == 1


class TestComposePatch:
    def test_untouched_outside_union_of_masks(self):
        x = _image()
        rng = np.random.default_rng(3)
        specs, _ = sample_placements(BOXES, HIDING, rng, EvalConfig(), (128, 128))
        patch = noise_patch(16, np.random.default_rng(1))
        out = compose_patch(x, patch, specs, rng, EvalConfig())
        union = torch.zeros(128, 128)
        for ms in specs:
            union = torch.maximum(union, mask_to_tensor(rasterize_mask(ms)))
        outside = union == 0
        assert torch.equal(out[:, outside], x[:, outside])
        assert not torch.equal(out, x)

    def test_same_seed_reproduces_composition(self):
        x = _image()
        patch = noise_patch(16, np.random.default_rng(1))
        outs = []
        for _ in range(2):
            rng = np.random.default_rng(5)
            specs, _ = sample_placements(BOXES, HIDING, rng, EvalConfig(), (128, 128))
            outs.append(compose_patch(x, patch, specs, rng, EvalConfig()))
        assert torch.equal(outs[0], outs[1])

    def test_no_placements_returns_input(self):
        x = _image()
        out = compose_patch(x, noise_patch(16, np.random.default_rng(0)), [], np.random.default_rng(0), EvalConfig())
        assert out is x


class TestApplyPatchToImage:
    def test_none_patch_returns_image_unchanged(self):
        x = _image()
        out, placement = apply_patch_to_image(
            x, BOXES, None, HIDING, np.random.default_rng(0), EvalConfig()
        )
        assert out is x
        assert placement is None

    def test_none_patch_still_consumes_geometry_draws(self):
        rng1 = np.random.default_rng(0)
        apply_patch_to_image(_image(), BOXES, None, HIDING, rng1, EvalConfig())
        rng2 = np.random.default_rng(0)
        sample_placements(BOXES, HIDING, rng2, EvalConfig(), (128, 128))
        assert rng1.uniform() == rng2.uniform()

    def test_creating_returns_placement(self):
        patch = noise_patch(16, np.random.default_rng(1))
        out, placement = apply_patch_to_image(
            _image(), [], patch, CREATING, np.random.default_rng(0), EvalConfig()
        )
        assert isinstance(placement, CreatingPlacement)
        assert not torch.equal(out, _image())

    def test_invalid_patch_rejected(self):
        with pytest.raises(ValueError, match="square"):
            apply_patch_to_image(
                _image(),
                BOXES,
                torch.full((3, 16, 8), 0.5),
                HIDING,
                np.random.default_rng(0),
                EvalConfig(),
            )


class TestEvaluateAttack:
    def test_case_per_scene_with_default_ids(self, tiny_detector, val_scenes, eval_patch):
        cases = evaluate_attack(tiny_detector, val_scenes, eval_patch, HIDING, seed=0)
        assert len(cases) == len(val_scenes)
        assert [c.image_id for c in cases] == [f"img_{i:05d}" for i in range(len(cases))]
        assert all(c.attack_type is AttackType.HIDING for c in cases)
        assert all(c.rm is None for c in cases)

    def test_creating_cases_carry_rm(self, tiny_detector, val_scenes, eval_patch):
        cases = evaluate_attack(tiny_detector, val_scenes, eval_patch, CREATING, seed=0)
        assert len(cases) == len(val_scenes)
        assert all(isinstance(c.rm, BoundingBox) for c in cases)
        assert all(c.target_class == 1 for c in cases)

    def test_boxless_scene_skipped_with_warning(self, tiny_detector, val_scenes, eval_patch):
        scenes = [val_scenes[0], (val_scenes[1][0], [])]
        with pytest.warns(UserWarning, match="no objects to attack"):
            cases = evaluate_attack(tiny_detector, scenes, eval_patch, HIDING, seed=0)
        assert len(cases) == 1

    def test_all_scenes_skipped_returns_empty(self, tiny_detector, val_scenes, eval_patch):
        scenes = [(val_scenes[0][0], [])]
        with pytest.warns(UserWarning, match="no objects"):
            cases = evaluate_attack(tiny_detector, scenes, eval_patch, HIDING, seed=0)
        assert cases == []

    def test_same_seed_same_detections(self, tiny_detector, val_scenes, eval_patch):
        first = evaluate_attack(tiny_detector, val_scenes, eval_patch, HIDING, seed=11)
        second = evaluate_attack(tiny_detector, val_scenes, eval_patch, HIDING, seed=11)
        assert len(first) == len(second)
        for a, b in zip(first, second):
            assert len(a.detections) == len(b.detections)
            for da, db in zip(a.detections, b.detections):
                assert da.confidence == db.confidence
                assert da.box == db.box

    def test_custom_image_ids(self, tiny_detector, val_scenes, eval_patch):
        ids = [f"val_{i}" for i in range(len(val_scenes))]
        cases = evaluate_attack(
            tiny_detector, val_scenes, eval_patch, HIDING, seed=0, image_ids=ids
        )
        assert [c.image_id for c in cases] == ids

    def test_too_few_image_ids(self, tiny_detector, val_scenes, eval_patch):
        with pytest.raises(ValueError, match="image ids"):
            evaluate_attack(
                tiny_detector, val_scenes, eval_patch, HIDING, seed=0, image_ids=["only_one"]
            )

    def test_max_images_truncates(self, tiny_detector, val_scenes, eval_patch):
        cfg = EvalConfig(max_images=3)
        cases = evaluate_attack(tiny_detector, val_scenes, eval_patch, HIDING, seed=0, cfg=cfg)
        assert len(cases) == 3


class TestMeanCm:
    def test_empty_raises(self):
        with pytest.raises(ValueError, match="no evaluation cases"):
            mean_cm([])

    def test_mean_over_cases(self):
        gt = [BoundingBox(0.5, 0.5, 0.2, 0.2, class_id=0)]
        hidden = EvalCase("a", gt, [], AttackType.HIDING)
        assert mean_cm([hidden, hidden]) == 1.0


class TestAttackReport:
    def test_row_order(self, report_and_inputs):
        report, _ = report_and_inputs
        labels = [r.label for r in report.rows]
        assert labels[:3] == ["no attack", "random noise", "trained patch"]

    def test_noise_baseline_uses_offset_seed(self, report_and_inputs, tiny_detector, val_scenes):
        report, patch = report_and_inputs
        noise = noise_patch(int(patch.shape[1]), np.random.default_rng(5 + 983_041))
        manual = evaluate_attack(tiny_detector, val_scenes, noise, HIDING, seed=5)
        noise_row = next(r for r in report.rows if r.label == "random noise")
        assert noise_row.cm == mean_cm(manual)

    def test_without_baselines(self, tiny_detector, val_scenes):
        patch = noise_patch(16, np.random.default_rng(21))
        report = attack_report(
            tiny_detector, val_scenes, patch, HIDING, seed=5, with_baselines=False
        )
        labels = {r.label for r in report.rows}
        assert "no attack" not in labels and "random noise" not in labels
        assert report.notes == ["no baseline rows for attack 'hiding'"]

    def test_empty_scenes(self, tiny_detector):
        patch = noise_patch(16, np.random.default_rng(21))
        report = attack_report(tiny_detector, [], patch, HIDING, seed=5)
        assert report.rows == []
        assert report.notes == ["no scenes to evaluate"]


class TestBuildReferenceHistogram:
    def test_returns_hsv_histogram(self, tiny_ds):
        hist = build_reference_histogram(tiny_ds, 0)
        assert isinstance(hist, Histogram)
        assert hist.space == "hsv"
        assert hist.counts.shape == (3, 256)
        assert np.allclose(hist.counts.sum(axis=1), 1.0)
