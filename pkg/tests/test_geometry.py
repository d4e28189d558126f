"""Tests for placement sampling and binary mask rasterization."""

import math

import numpy as np
import pytest

from patchlab.core import BoundingBox
from patchlab.geometry import (
    DEFAULT_PATCH_FRAC,
    DIAG_MARGIN_FACTOR,
    MAX_ANGLE_DEG,
    AffineParams,
    CreatingPlacement,
    MaskSpec,
    PlacementInfeasibleError,
    footprint_corners,
    rasterize_mask,
    sample_creating_placement,
    sample_object_placement,
)


class TestAffineParams:
    def test_rejects_out_of_range_angle(self):
        with pytest.raises(ValueError, match="angle"):
            AffineParams(angle_deg=46.0, scale=0.5, loc=(0.5, 0.5))
        AffineParams(angle_deg=-45.0, scale=0.5, loc=(0.5, 0.5))

    def test_rejects_bad_scale(self):
        with pytest.raises(ValueError, match="scale"):
            AffineParams(angle_deg=0.0, scale=0.0, loc=(0.5, 0.5))
        with pytest.raises(ValueError, match="scale"):
            AffineParams(angle_deg=0.0, scale=1.2, loc=(0.5, 0.5))
        AffineParams(angle_deg=0.0, scale=1.0, loc=(0.0, 1.0))


class TestObjectPlacement:
    def test_side_is_fraction_of_smaller_box_side(self):
        rng = np.random.default_rng(0)
        box = BoundingBox(0.5, 0.5, 0.5, 0.25)
        spec = sample_object_placement(box, 0.35, rng, raster_shape=(100, 200))
        # Box is 100 px wide and 25 px tall on a 200x100 raster.
        assert spec.side_px == pytest.approx(0.35 * 25.0)
        assert spec.host_box == box
        assert spec.raster_shape == (100, 200)

    def test_draw_order_is_angle_then_location(self):
        box = BoundingBox(0.5, 0.5, 0.6, 0.6)
        spec = sample_object_placement(
            box, 0.35, np.random.default_rng(123), raster_shape=(128, 128)
        )
        replay = np.random.default_rng(123)
        angle = float(replay.uniform(-MAX_ANGLE_DEG, MAX_ANGLE_DEG))
        u = float(replay.uniform())
        v = float(replay.uniform())
        assert spec.angle_deg == angle
        assert spec.affine.loc == (u, v)
        x1, y1, _, _ = box.corners()
        side = 0.35 * 0.6 * 128
        lo = x1 * 128 + side / 2
        hi = (x1 + 0.6) * 128 - side / 2
        assert spec.center_px[0] == pytest.approx(lo + u * (hi - lo))

    def test_unrotated_footprint_stays_inside_box(self):
        rng = np.random.default_rng(42)
        raster = (256, 256)
        for _ in range(500):
            w = float(rng.uniform(0.15, 0.8))
            h = float(rng.uniform(0.15, 0.8))
            cx = float(rng.uniform(w / 2, 1 - w / 2))
            cy = float(rng.uniform(h / 2, 1 - h / 2))
            box = BoundingBox(cx, cy, w, h)
            spec = sample_object_placement(box, DEFAULT_PATCH_FRAC, rng, raster)
            assert abs(spec.angle_deg) <= MAX_ANGLE_DEG
            x1, y1, x2, y2 = box.corners()
            half = spec.side_px / 2
            assert spec.center_px[0] >= x1 * 256 + half - 1e-9
            assert spec.center_px[0] <= x2 * 256 - half + 1e-9
            assert spec.center_px[1] >= y1 * 256 + half - 1e-9
            assert spec.center_px[1] <= y2 * 256 - half + 1e-9

    def test_patch_frac_bounds(self):
        rng = np.random.default_rng(0)
        box = BoundingBox(0.5, 0.5, 0.5, 0.5)
        for bad in (0.0, 0.61, -0.1):
            with pytest.raises(ValueError, match="patch_frac"):
                sample_object_placement(box, bad, rng, (128, 128))

    def test_small_box_is_infeasible(self):
        rng = np.random.default_rng(0)
        box = BoundingBox(0.5, 0.5, 0.1, 0.1)
        # 0.35 * 0.1 * 128 = 4.48 px < 8 px minimum.
        with pytest.raises(PlacementInfeasibleError, match="minimum"):
            sample_object_placement(box, 0.35, rng, (128, 128))


class TestCreatingPlacement:
    def test_draw_order_and_derived_quantities(self):
        placement = sample_creating_placement(256, 192, np.random.default_rng(99))
        replay = np.random.default_rng(99)
        rw = float(replay.uniform(0.20, 0.70))
        rh = float(replay.uniform(0.20, 0.70))
        rm_x1 = float(replay.uniform(0.0, 1.0 - rw))
        rm_y1 = float(replay.uniform(0.0, 1.0 - rh))
        frac = float(replay.uniform(0.25, 0.40))
        angle = float(replay.uniform(-MAX_ANGLE_DEG, MAX_ANGLE_DEG))
        assert (placement.rw, placement.rh) == (rw, rh)
        assert placement.rm == (rm_x1, rm_y1, rm_x1 + rw, rm_y1 + rh)
        assert placement.p_size_frac == frac
        assert placement.p_size_px == pytest.approx(min(rw * 256, rh * 192) * frac)
        assert placement.l_diag_px == pytest.approx(
            placement.p_size_px * (math.sqrt(2.0) - 1.0)
        )
        assert placement.angle_deg == angle

    def test_sampled_ranges(self):
        rng = np.random.default_rng(5)
        for _ in range(1000):
            p = sample_creating_placement(256, 256, rng)
            assert 0.20 <= p.rw <= 0.70 and 0.20 <= p.rh <= 0.70
            assert 0.25 <= p.p_size_frac <= 0.40
            x1, y1, x2, y2 = p.rm
            assert 0.0 <= x1 < x2 <= 1.0 + 1e-12
            assert 0.0 <= y1 < y2 <= 1.0 + 1e-12
            assert abs(p.angle_deg) <= MAX_ANGLE_DEG

    def test_rotated_footprint_contained_in_region(self):
        rng = np.random.default_rng(17)
        for _ in range(1000):
            p = sample_creating_placement(320, 240, rng)
            spec = MaskSpec.from_placement(p, (240, 320))
            corners = footprint_corners(spec)
            x1, y1, x2, y2 = p.rm
            assert (corners[:, 0] >= x1 * 320 - 1e-6).all()
            assert (corners[:, 0] <= x2 * 320 + 1e-6).all()
            assert (corners[:, 1] >= y1 * 240 - 1e-6).all()
            assert (corners[:, 1] <= y2 * 240 + 1e-6).all()

    def test_rejects_small_images(self):
        with pytest.raises(ValueError, match="64"):
            sample_creating_placement(63, 256, np.random.default_rng(0))

    def test_from_placement_resolves_pixels(self):
        p = sample_creating_placement(200, 100, np.random.default_rng(3))
        spec = MaskSpec.from_placement(p, (100, 200))
        assert spec.center_px == (p.center[0] * 200, p.center[1] * 100)
        assert spec.side_px == p.p_size_px
        assert spec.angle_deg == p.angle_deg
        smaller = min(p.rw * 200, p.rh * 100)
        assert spec.affine.scale == pytest.approx(p.p_size_px / smaller)
        assert spec.placement is p

    def test_rm_box_round_trip(self):
        p = CreatingPlacement(
            rm=(0.1, 0.2, 0.5, 0.6),
            rw=0.4,
            rh=0.4,
            p_size_frac=0.3,
            p_size_px=30.0,
            l_diag_px=30.0 * DIAG_MARGIN_FACTOR,
            center=(0.3, 0.4),
            angle_deg=10.0,
        )
        box = p.rm_box()
        assert box.corners() == pytest.approx((0.1, 0.2, 0.5, 0.6))


class TestFootprintCorners:
    def test_axis_aligned(self):
        spec = MaskSpec(raster_shape=(64, 64), center_px=(20.0, 30.0), side_px=10.0, angle_deg=0.0)
        corners = footprint_corners(spec)
        expected = np.array([[15, 25], [25, 25], [25, 35], [15, 35]], dtype=np.float64)
        np.testing.assert_allclose(corners, expected, atol=1e-12)

    def test_45_degree_rotation_puts_corner_on_vertical(self):
        spec = MaskSpec(raster_shape=(64, 64), center_px=(32.0, 32.0), side_px=10.0, angle_deg=45.0)
        corners = footprint_corners(spec)
        radius = 5.0 * math.sqrt(2.0)
        # First corner (-h, -h) rotates onto the vertical axis above center.
        np.testing.assert_allclose(corners[0], [32.0, 32.0 - radius], atol=1e-9)
        dists = np.linalg.norm(corners - np.array([32.0, 32.0]), axis=1)
        np.testing.assert_allclose(dists, radius, atol=1e-9)


class TestRasterizeMask:
    def test_mask_is_binary(self):
        spec = MaskSpec(raster_shape=(64, 64), center_px=(30.0, 30.0), side_px=13.0, angle_deg=30.0)
        mask = rasterize_mask(spec)
        assert mask.dtype == np.float32
        assert set(np.unique(mask)).issubset({0.0, 1.0})

    def test_axis_aligned_exact_pixel_count(self):
        # Even side with integer center: exactly side^2 pixel centers inside.
        spec = MaskSpec(raster_shape=(64, 64), center_px=(32.0, 32.0), side_px=10.0, angle_deg=0.0)
        mask = rasterize_mask(spec)
        assert mask.sum() == 100.0
        assert mask[27:37, 27:37].all()
        assert mask.sum() == mask[27:37, 27:37].sum()

    def test_rotated_area_close_to_side_squared(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            side = float(rng.uniform(12.0, 40.0))
            spec = MaskSpec(
                raster_shape=(128, 128),
                center_px=(float(rng.uniform(40, 88)), float(rng.uniform(40, 88))),
                side_px=side,
                angle_deg=float(rng.uniform(-45, 45)),
            )
            area = rasterize_mask(spec).sum()
            assert abs(area - side**2) <= 4.0 * side

    def test_mask_bounded_by_circumscribed_circle(self):
        spec = MaskSpec(raster_shape=(128, 128), center_px=(64.0, 64.0), side_px=20.0, angle_deg=33.0)
        mask = rasterize_mask(spec)
        ys, xs = np.nonzero(mask)
        dists = np.hypot(xs + 0.5 - 64.0, ys + 0.5 - 64.0)
        assert dists.max() <= 10.0 * math.sqrt(2.0) + 1.0

    def test_sub_pixel_footprint_warns_and_is_empty(self):
        spec = MaskSpec(raster_shape=(32, 32), center_px=(16.0, 16.0), side_px=0.5, angle_deg=0.0)
        with pytest.warns(UserWarning, match="below 1 px"):
            mask = rasterize_mask(spec)
        assert mask.sum() == 0.0

    def test_rotation_by_90_degrees_matches_axis_aligned(self):
        base = MaskSpec(raster_shape=(64, 64), center_px=(32.0, 32.0), side_px=12.0, angle_deg=0.0)
        quarter = MaskSpec(
            raster_shape=(64, 64), center_px=(32.0, 32.0), side_px=12.0, angle_deg=90.0
        )
        np.testing.assert_array_equal(rasterize_mask(base), rasterize_mask(quarter))
