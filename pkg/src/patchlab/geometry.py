"""Patch placement sampling and binary mask rasterization.

A placement is a square footprint (center, side, rotation) on the image
raster.  For hiding/altering attacks the footprint is sampled inside an
object's bounding box; for creating attacks it is sampled inside a random
rectangular region ``rm`` with enough margin that any rotation up to 45
degrees keeps the footprint inside ``rm``.  Masks are strictly binary:
a pixel belongs to the mask iff its center lies inside the rotated square.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .core import MIN_PATCH_SIDE, BoundingBox

__all__ = [
    "AffineParams",
    "CreatingPlacement",
    "MaskSpec",
    "PlacementInfeasibleError",
    "DEFAULT_PATCH_FRAC",
    "MAX_ANGLE_DEG",
    "sample_object_placement",
    "sample_creating_placement",
    "rasterize_mask",
    "footprint_corners",
]

DEFAULT_PATCH_FRAC = 0.35
MAX_ANGLE_DEG = 45.0

# Margin factor keeping a square of side s inside its host for any rotation
# up to 45 degrees: sqrt(2) - 1 of the side, measured from the unrotated
# footprint edge.  This is twice the analytically required (sqrt(2)-1)/2,
# i.e. deliberately conservative.
DIAG_MARGIN_FACTOR = math.sqrt(2.0) - 1.0


class PlacementInfeasibleError(ValueError):
    """Raised when a host box cannot fit the minimum patch footprint."""


@dataclass(frozen=True)
class AffineParams:
    """Sampled placement transform: rotation, relative size, relative offset.

    Attributes:
        angle_deg: Rotation of the footprint in [-45, 45] degrees.
        scale: Footprint side as a fraction of the host region's smaller side.
        loc: (u, v) in [0, 1]^2 locating the footprint center within the
            feasible center region of the host.
    """

    angle_deg: float
    scale: float
    loc: tuple[float, float]

    def __post_init__(self) -> None:
        if abs(self.angle_deg) > MAX_ANGLE_DEG + 1e-9:
            raise ValueError(f"|angle| must be <= {MAX_ANGLE_DEG}, got {self.angle_deg}")
        if not (0.0 < self.scale <= 1.0):
            raise ValueError(f"scale must be in (0, 1], got {self.scale}")


@dataclass(frozen=True)
class CreatingPlacement:
    """Random region and patch footprint for the creating attack.

    Attributes:
        rm: Normalized corners (x1, y1, x2, y2) of the random mask region.
        rw, rh: Region extents as fractions of image width / height.
        p_size_frac: Patch side as a fraction of the smaller rm pixel extent.
        p_size_px: Patch side in pixels.
        l_diag_px: Rotation-safety margin in pixels, p_size * (sqrt(2) - 1).
        center: Normalized (x, y) footprint center.
        angle_deg: Footprint rotation.
    """

    rm: tuple[float, float, float, float]
    rw: float
    rh: float
    p_size_frac: float
    p_size_px: float
    l_diag_px: float
    center: tuple[float, float]
    angle_deg: float

    def rm_box(self) -> BoundingBox:
        """The rm region as a class-less BoundingBox."""
        x1, y1, x2, y2 = self.rm
        return BoundingBox.from_corners(x1, y1, x2, y2)


@dataclass(frozen=True)
class MaskSpec:
    """Fully determined mask: host region, affine draw, and concrete footprint.

    ``center_px``/``side_px``/``angle_deg`` are the resolved footprint in
    pixel coordinates (x right, y down, origin at the top-left image corner);
    they alone determine the raster.
    """

    raster_shape: tuple[int, int]  # (H, W)
    center_px: tuple[float, float]  # (cx, cy)
    side_px: float
    angle_deg: float
    affine: AffineParams | None = None
    host_box: BoundingBox | None = None
    placement: CreatingPlacement | None = None

    @staticmethod
    def from_placement(placement: CreatingPlacement, raster_shape: tuple[int, int]) -> "MaskSpec":
        h, w = raster_shape
        rm_x1, rm_y1, rm_x2, rm_y2 = placement.rm
        smaller = min((rm_x2 - rm_x1) * w, (rm_y2 - rm_y1) * h)
        affine = AffineParams(
            angle_deg=placement.angle_deg,
            scale=placement.p_size_px / smaller,
            loc=_loc_in_region(
                placement.center,
                placement.rm,
                raster_shape,
                margin_px=placement.p_size_px / 2 + placement.l_diag_px,
            ),
        )
        return MaskSpec(
            raster_shape=raster_shape,
            center_px=(placement.center[0] * w, placement.center[1] * h),
            side_px=placement.p_size_px,
            angle_deg=placement.angle_deg,
            affine=affine,
            placement=placement,
        )


def _loc_in_region(
    center: tuple[float, float],
    region: tuple[float, float, float, float],
    raster_shape: tuple[int, int],
    margin_px: float,
) -> tuple[float, float]:
    """Invert the feasible-region mapping: recover (u, v) from a center."""
    h, w = raster_shape
    x1, y1, x2, y2 = region
    lo_x, hi_x = x1 * w + margin_px, x2 * w - margin_px
    lo_y, hi_y = y1 * h + margin_px, y2 * h - margin_px
    u = 0.5 if hi_x <= lo_x else (center[0] * w - lo_x) / (hi_x - lo_x)
    v = 0.5 if hi_y <= lo_y else (center[1] * h - lo_y) / (hi_y - lo_y)
    return (min(max(u, 0.0), 1.0), min(max(v, 0.0), 1.0))


def sample_object_placement(
    box: BoundingBox,
    patch_frac: float,
    rng: np.random.Generator,
    raster_shape: tuple[int, int],
    max_angle_deg: float = MAX_ANGLE_DEG,
) -> MaskSpec:
    """Sample a patch footprint inside an object's bounding box.

    The footprint side is ``patch_frac`` times the smaller box side (in
    pixels); the center is uniform such that the unrotated footprint stays
    inside the box; rotation is uniform in [-max_angle, +max_angle].

    Args:
        box: Host object box, normalized coordinates.
        patch_frac: Footprint side as a fraction of the smaller box side,
            in (0, 0.6].
        rng: Seeded random generator; draws angle, then (u, v).
        raster_shape: Target raster (H, W) in pixels.
        max_angle_deg: Rotation half-range.

    Raises:
        PlacementInfeasibleError: If the footprint would be under 8 px.
    """
    if not (0.0 < patch_frac <= 0.6):
        raise ValueError(f"patch_frac must be in (0, 0.6], got {patch_frac}")
    img_h, img_w = raster_shape
    x1, y1, x2, y2 = box.corners()
    bw_px = (x2 - x1) * img_w
    bh_px = (y2 - y1) * img_h
    side = patch_frac * min(bw_px, bh_px)
    if side < MIN_PATCH_SIDE:
        raise PlacementInfeasibleError(
            f"box of {bw_px:.1f}x{bh_px:.1f} px at patch_frac={patch_frac} "
            f"gives footprint side {side:.1f} px < {MIN_PATCH_SIDE} px minimum"
        )
    angle = float(rng.uniform(-max_angle_deg, max_angle_deg))
    u = float(rng.uniform())
    v = float(rng.uniform())
    lo_x, hi_x = x1 * img_w + side / 2, x2 * img_w - side / 2
    lo_y, hi_y = y1 * img_h + side / 2, y2 * img_h - side / 2
    cx = lo_x + u * (hi_x - lo_x)
    cy = lo_y + v * (hi_y - lo_y)
    return MaskSpec(
        raster_shape=raster_shape,
        center_px=(cx, cy),
        side_px=side,
        angle_deg=angle,
        affine=AffineParams(angle_deg=angle, scale=patch_frac, loc=(u, v)),
        host_box=box,
    )


def sample_creating_placement(
    img_w: int, img_h: int, rng: np.random.Generator
) -> CreatingPlacement:
    """Sample the creating-attack region rm and a rotation-safe footprint.

    The region extents are uniform fractions in [0.20, 0.70] of the image
    and the region is placed uniformly inside the image.  The footprint side
    is the smaller rm pixel extent times a uniform factor in [0.25, 0.40];
    its center keeps a margin of ``side/2 + l_diag`` from every rm edge with
    l_diag = side * (sqrt(2) - 1), so any rotation up to 45 degrees stays
    inside rm.

    Args:
        img_w, img_h: Image size in pixels, both >= 64.
        rng: Seeded generator; draws rw, rh, region offsets, size factor,
            angle, then (u, v), in that order.
    """
    if img_w < 64 or img_h < 64:
        raise ValueError(f"image must be at least 64x64 px, got {img_w}x{img_h}")
    rw = float(rng.uniform(0.20, 0.70))
    rh = float(rng.uniform(0.20, 0.70))
    rm_x1 = float(rng.uniform(0.0, 1.0 - rw))
    rm_y1 = float(rng.uniform(0.0, 1.0 - rh))
    rm = (rm_x1, rm_y1, rm_x1 + rw, rm_y1 + rh)
    p_size_frac = float(rng.uniform(0.25, 0.40))
    p_size_px = min(rw * img_w, rh * img_h) * p_size_frac
    l_diag_px = p_size_px * DIAG_MARGIN_FACTOR
    angle = float(rng.uniform(-MAX_ANGLE_DEG, MAX_ANGLE_DEG))
    u = float(rng.uniform())
    v = float(rng.uniform())
    margin = p_size_px / 2 + l_diag_px
    lo_x, hi_x = rm[0] * img_w + margin, rm[2] * img_w - margin
    lo_y, hi_y = rm[1] * img_h + margin, rm[3] * img_h - margin
    cx_px = lo_x + u * (hi_x - lo_x)
    cy_px = lo_y + v * (hi_y - lo_y)
    return CreatingPlacement(
        rm=rm,
        rw=rw,
        rh=rh,
        p_size_frac=p_size_frac,
        p_size_px=p_size_px,
        l_diag_px=l_diag_px,
        center=(cx_px / img_w, cy_px / img_h),
        angle_deg=angle,
    )


def footprint_corners(spec: MaskSpec) -> np.ndarray:
    """The four rotated footprint corners in pixel coordinates, shape (4, 2)."""
    cx, cy = spec.center_px
    half = spec.side_px / 2
    local = np.array(
        [[-half, -half], [half, -half], [half, half], [-half, half]], dtype=np.float64
    )
    theta = math.radians(spec.angle_deg)
    rot = np.array(
        [[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]],
        dtype=np.float64,
    )
    return local @ rot.T + np.array([cx, cy])


def rasterize_mask(spec: MaskSpec) -> np.ndarray:
    """Binary (H, W) float32 mask of the rotated footprint.

    A pixel is inside iff its center, rotated into the footprint frame,
    falls within the axis-aligned half-side bound (inclusive).  Footprints
    under 1 px produce an empty mask with a warning.
    """
    h, w = spec.raster_shape
    if spec.side_px < 1.0:
        warnings.warn(
            f"footprint side {spec.side_px:.3f} px is below 1 px; emitting empty mask",
            stacklevel=2,
        )
        return np.zeros((h, w), dtype=np.float32)
    cx, cy = spec.center_px
    xs = np.arange(w, dtype=np.float64) + 0.5 - cx
    ys = np.arange(h, dtype=np.float64) + 0.5 - cy
    dx = xs[None, :]
    dy = ys[:, None]
    theta = math.radians(spec.angle_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    # Rotate pixel offsets by -angle into the unrotated footprint frame.
    local_x = cos_t * dx + sin_t * dy
    local_y = -sin_t * dx + cos_t * dy
    half = spec.side_px / 2
    inside = (np.abs(local_x) <= half) & (np.abs(local_y) <= half)
    return inside.astype(np.float32)
