"""Physical-robustness transforms and differentiable patch compositing.

The per-sample pipeline is: jitter the patch appearance (contrast,
brightness, additive noise), warp it into its rotated footprint on the
image raster, then composite through the binary mask.  Every step keeps
gradients flowing from the composited image back to the patch pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import MaskSpec

__all__ = [
    "PhysRanges",
    "PhysParams",
    "transform_patch",
    "warp_patch",
    "compose",
    "mask_to_tensor",
]


@dataclass(frozen=True)
class PhysRanges:
    """Sampling ranges for appearance jitter.

    Contrast is multiplicative in [c_lo, c_hi] (c_lo > 0), brightness is an
    additive offset in [b_lo, b_hi], and noise is per-pixel-per-channel
    uniform in [-noise_amp, +noise_amp].
    """

    c_lo: float = 0.8
    c_hi: float = 1.2
    b_lo: float = -0.10
    b_hi: float = 0.10
    noise_amp: float = 0.10

    def __post_init__(self) -> None:
        if self.c_lo <= 0:
            raise ValueError(f"contrast lower bound must be positive, got {self.c_lo}")
        if self.c_hi < self.c_lo or self.b_hi < self.b_lo or self.noise_amp < 0:
            raise ValueError("invalid appearance-jitter ranges")

    def sample(self, rng: np.random.Generator, patch_side: int) -> "PhysParams":
        """Draw one concrete transform; order: contrast, brightness, noise."""
        contrast = float(rng.uniform(self.c_lo, self.c_hi))
        brightness = float(rng.uniform(self.b_lo, self.b_hi))
        noise = rng.uniform(-self.noise_amp, self.noise_amp, size=(3, patch_side, patch_side))
        return PhysParams(contrast=contrast, brightness=brightness, noise=noise)


@dataclass(frozen=True)
class PhysParams:
    """One sampled appearance transform; defaults are the identity."""

    contrast: float = 1.0
    brightness: float = 0.0
    noise: np.ndarray | None = None


def transform_patch(p0: torch.Tensor, params: PhysParams) -> torch.Tensor:
    """Apply contrast/brightness/noise jitter and clamp to [0, 1].

    Gradient w.r.t. ``p0`` equals the contrast factor on unclamped pixels.
    """
    out = p0 * params.contrast + params.brightness
    if params.noise is not None:
        noise = torch.as_tensor(params.noise, dtype=p0.dtype, device=p0.device)
        if noise.shape != p0.shape:
            raise ValueError(f"noise shape {tuple(noise.shape)} != patch shape {tuple(p0.shape)}")
        out = out + noise
    return out.clamp(0.0, 1.0)


def _sampling_grid(spec: MaskSpec, side: int, dtype: torch.dtype) -> torch.Tensor:
    """Grid mapping raster pixel centers into normalized patch coordinates.

    Built so that the footprint edges land exactly on the patch pixel-edge
    boundaries under align_corners=False sampling; at 1:1 scale and zero
    rotation, patch pixels are copied verbatim.
    """
    h, w = spec.raster_shape
    cx, cy = spec.center_px
    xs = torch.arange(w, dtype=dtype) + 0.5 - cx
    ys = torch.arange(h, dtype=dtype) + 0.5 - cy
    dx = xs[None, :].expand(h, w)
    dy = ys[:, None].expand(h, w)
    theta = math.radians(spec.angle_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    local_x = cos_t * dx + sin_t * dy
    local_y = -sin_t * dx + cos_t * dy
    half = spec.side_px / 2
    grid = torch.stack((local_x / half, local_y / half), dim=-1)
    return grid.unsqueeze(0)


def warp_patch(p: torch.Tensor, spec: MaskSpec) -> torch.Tensor:
    """Resample the patch into its rotated footprint on a full-size raster.

    Args:
        p: Patch tensor (3, s, s).
        spec: Placement; ``spec.raster_shape`` sets the output size.

    Returns:
        (3, H, W) tensor: bilinear resampling of the patch inside the
        footprint, zeros elsewhere; differentiable w.r.t. ``p``.
    """
    if p.ndim != 3 or p.shape[0] != 3:
        raise ValueError(f"expected patch of shape (3, s, s), got {tuple(p.shape)}")
    grid = _sampling_grid(spec, p.shape[1], p.dtype)
    warped = F.grid_sample(
        p.unsqueeze(0), grid, mode="bilinear", padding_mode="zeros", align_corners=False
    )
    return warped.squeeze(0)


def mask_to_tensor(mask: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Convert a rasterized (H, W) mask to a torch tensor."""
    return torch.from_numpy(np.ascontiguousarray(mask)).to(dtype)


def compose(x: torch.Tensor, m: torch.Tensor, p_warped: torch.Tensor) -> torch.Tensor:
    """Composite the warped patch into the image through a binary mask.

    x_adv = (1 - m) * x + m * p_warped.  Pixels outside the mask are
    bit-identical to ``x``.

    Args:
        x: Image (3, H, W).
        m: Binary mask, (H, W) or (1, H, W); every value must be 0 or 1.
        p_warped: Patch raster (3, H, W).
    """
    if m.ndim == 2:
        m = m.unsqueeze(0)
    if x.shape != p_warped.shape or m.shape[-2:] != x.shape[-2:]:
        raise ValueError(
            f"shape mismatch: image {tuple(x.shape)}, mask {tuple(m.shape)}, "
            f"patch raster {tuple(p_warped.shape)}"
        )
    if not torch.all((m == 0) | (m == 1)):
        raise ValueError("mask must be strictly binary")
    m = m.to(x.dtype)
    return (1.0 - m) * x + m * p_warped
