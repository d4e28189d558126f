"""Scalar training objectives for patch optimization.

Three adversarial detection losses (one per attack family), two appearance
regularizers (total variation, non-printability), and a differentiable
color-histogram similarity loss that steers the patch toward the HSV
distribution of a reference crop.  All losses accept torch tensors and are
differentiable w.r.t. patch pixels; the exact (non-differentiable)
histogram path shared with the analysis module lives here too.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources

import numpy as np
import torch

from .core import AdvMode, AttackSpec, BoundingBox, RawDetections
from .geometry import CreatingPlacement

__all__ = [
    "PrintPalette",
    "Histogram",
    "loss_tv",
    "loss_nps",
    "loss_hiding_adv",
    "loss_creating_adv",
    "loss_altering_adv",
    "loss_hist",
    "composite_loss",
    "reference_histogram",
    "rgb_to_hsv_exact",
    "rgb_to_hsv_diff",
    "hard_histogram",
    "soft_histogram",
    "scale_channels",
    "chi_square_distance",
    "associated_indices",
    "TV_EPS",
    "HIST_EPS",
]

TV_EPS = 1e-8
NPS_EPS = 1e-12
HIST_EPS = 1e-10
SAT_GRAD_CUTOFF = 1e-4
ASSOC_IOU_GATE = 0.1


# ---------------------------------------------------------------------------
# printable palette


@dataclass(frozen=True)
class PrintPalette:
    """A set of printable RGB colors, each component in [0, 1]."""

    colors: np.ndarray  # (K, 3) float64

    def __post_init__(self) -> None:
        c = np.asarray(self.colors, dtype=np.float64)
        if c.ndim != 2 or c.shape[1] != 3 or c.shape[0] < 1:
            raise ValueError(f"palette must be a non-empty (K, 3) array, got {c.shape}")
        if c.min() < 0.0 or c.max() > 1.0:
            raise ValueError("palette colors must lie in [0, 1]")
        object.__setattr__(self, "colors", c)

    @staticmethod
    def load(path) -> "PrintPalette":
        """Parse a palette file: one 'r g b' triplet per line, '#' comments."""
        colors = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                parts = line.split()
                if len(parts) != 3:
                    raise ValueError(f"{path}:{lineno}: expected 3 values, got {len(parts)}")
                colors.append([float(v) for v in parts])
        return PrintPalette(np.array(colors, dtype=np.float64))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r, g, b in self.colors:
                fh.write(f"{r:.6f} {g:.6f} {b:.6f}\n")

    @staticmethod
    def default() -> "PrintPalette":
        """The shipped 125-color 5x5x5 RGB lattice."""
        ref = resources.files("patchlab").joinpath("resources/palette_5x5x5.txt")
        with resources.as_file(ref) as path:
            return PrintPalette.load(path)


# ---------------------------------------------------------------------------
# appearance regularizers


def loss_tv(p: torch.Tensor, eps: float = TV_EPS) -> torch.Tensor:
    """Total-variation smoothness: mean gradient magnitude over the patch.

    For every pixel that has both a right and a down neighbor, computes
    sqrt(dx^2 + dy^2 + eps^2); the result is the mean over those pixels and
    the three channels.  ``eps`` keeps the gradient finite on flat regions.
    """
    if p.shape[-1] < 2 or p.shape[-2] < 2:
        raise ValueError(f"patch too small for TV, got {tuple(p.shape)}")
    dx = p[..., :, 1:] - p[..., :, :-1]
    dy = p[..., 1:, :] - p[..., :-1, :]
    dx = dx[..., :-1, :]  # rows that also have a down neighbor
    dy = dy[..., :, :-1]  # cols that also have a right neighbor
    return torch.sqrt(dx * dx + dy * dy + eps * eps).mean()


def loss_nps(p: torch.Tensor, palette: PrintPalette) -> torch.Tensor:
    """Non-printability score: mean distance to the nearest palette color.

    Uses sqrt(d^2 + eps) - sqrt(eps) so the value is exactly zero when a
    pixel sits on a palette color while the gradient stays bounded there.
    """
    pixels = p.reshape(3, -1).transpose(0, 1)  # (N, 3)
    colors = torch.as_tensor(palette.colors, dtype=p.dtype, device=p.device)  # (K, 3)
    diff = pixels.unsqueeze(1) - colors.unsqueeze(0)  # (N, K, 3)
    sq = (diff * diff).sum(dim=-1)  # (N, K)
    min_sq = sq.min(dim=1).values
    # Both roots in the patch dtype so an exact palette hit yields exactly 0.
    eps = torch.as_tensor(NPS_EPS, dtype=p.dtype, device=p.device)
    return (torch.sqrt(min_sq + eps) - torch.sqrt(eps)).mean()


# ---------------------------------------------------------------------------
# HSV conversion and histograms

_HSV_SCALE = np.array([256.0 / 360.0, 256.0, 256.0])
_RGB_SCALE = np.array([256.0, 256.0, 256.0])


@dataclass(frozen=True)
class Histogram:
    """Per-channel 256-bin normalized histogram.

    Attributes:
        counts: (3, 256) array; every channel sums to 1.
        space: "hsv" or "rgb".
    """

    counts: np.ndarray
    space: str = "hsv"

    def __post_init__(self) -> None:
        c = np.asarray(self.counts, dtype=np.float64)
        if c.shape != (3, 256):
            raise ValueError(f"histogram must have shape (3, 256), got {c.shape}")
        if c.min() < 0.0:
            raise ValueError("histogram bins must be non-negative")
        sums = c.sum(axis=1)
        if not np.allclose(sums, 1.0, atol=1e-6):
            raise ValueError(f"each channel must sum to 1, got sums {sums}")
        if self.space not in ("hsv", "rgb"):
            raise ValueError(f"unknown color space {self.space!r}")
        object.__setattr__(self, "counts", c)


def rgb_to_hsv_exact(rgb: np.ndarray) -> np.ndarray:
    """Hexagonal-cone RGB->HSV for float arrays shaped (3, ...).

    Returns H in [0, 360), S and V in [0, 1].  Ties between channels are
    resolved with red-then-green priority, matching the differentiable
    conversion so the two paths bin identically.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[0], rgb[1], rgb[2]
    v = np.maximum(np.maximum(r, g), b)
    minc = np.minimum(np.minimum(r, g), b)
    c = v - minc
    s = np.where(v > 0, c / np.where(v > 0, v, 1.0), 0.0)
    safe_c = np.where(c > 0, c, 1.0)
    h_r = np.mod((g - b) / safe_c, 6.0)
    h_g = (b - r) / safe_c + 2.0
    h_b = (r - g) / safe_c + 4.0
    is_r = (r >= g) & (r >= b)
    is_g = (~is_r) & (g >= b)
    h6 = np.where(is_r, h_r, np.where(is_g, h_g, h_b))
    h = np.where(c > 0, h6 * 60.0, 0.0)
    return np.stack((h, s, v))


def scale_channels(values: np.ndarray, space: str) -> np.ndarray:
    """Scale channel values into the common [0, 256] binning range.

    RGB channels are value*256; HSV scales hue by 256/360 and S, V by 256.
    """
    scale = _HSV_SCALE if space == "hsv" else _RGB_SCALE
    return np.asarray(values, dtype=np.float64) * scale.reshape((3,) + (1,) * (values.ndim - 1))


def hard_histogram(scaled: np.ndarray) -> np.ndarray:
    """Integer-binned (3, 256) histogram of channel values in [0, 256]."""
    flat = scaled.reshape(3, -1)
    n = flat.shape[1]
    if n == 0:
        raise ValueError("cannot histogram an empty pixel set")
    out = np.empty((3, 256), dtype=np.float64)
    for ch in range(3):
        idx = np.clip(np.floor(flat[ch]).astype(np.int64), 0, 255)
        out[ch] = np.bincount(idx, minlength=256) / n
    return out


def reference_histogram(x_ref, y_ref: BoundingBox) -> Histogram:
    """HSV histogram of an image crop, the target for the histogram loss.

    Args:
        x_ref: (3, H, W) image, torch tensor or numpy array, values in [0, 1].
        y_ref: Normalized crop box; must cover at least 4 pixels.
    """
    if isinstance(x_ref, torch.Tensor):
        arr = x_ref.detach().cpu().numpy()
    else:
        arr = np.asarray(x_ref)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) image, got {arr.shape}")
    _, img_h, img_w = arr.shape
    x1, y1, x2, y2 = y_ref.corners()
    c0, c1 = int(np.floor(x1 * img_w)), int(np.ceil(x2 * img_w))
    r0, r1 = int(np.floor(y1 * img_h)), int(np.ceil(y2 * img_h))
    crop = arr[:, max(r0, 0) : min(r1, img_h), max(c0, 0) : min(c1, img_w)]
    if crop.shape[1] * crop.shape[2] < 4:
        raise ValueError(f"degenerate crop of {crop.shape[1]}x{crop.shape[2]} px (< 4 px)")
    hsv = rgb_to_hsv_exact(crop.astype(np.float64))
    return Histogram(hard_histogram(scale_channels(hsv, "hsv")), space="hsv")


def rgb_to_hsv_diff(p: torch.Tensor) -> torch.Tensor:
    """Piecewise-differentiable RGB->HSV for a (3, ...) tensor.

    Matches :func:`rgb_to_hsv_exact` in value (H in [0, 360), S, V in
    [0, 1]) except that the hue is held at zero — value and gradient —
    wherever saturation falls below 1e-4, where hue is numerically
    meaningless and its gradient would explode.
    """
    r, g, b = p[0], p[1], p[2]
    v = torch.maximum(torch.maximum(r, g), b)
    minc = torch.minimum(torch.minimum(r, g), b)
    c = v - minc
    s = c / (v + 1e-8)
    safe_c = c + 1e-12
    h_r = torch.remainder((g - b) / safe_c, 6.0)
    h_g = (b - r) / safe_c + 2.0
    h_b = (r - g) / safe_c + 4.0
    is_r = (r >= g) & (r >= b)
    is_g = (~is_r) & (g >= b)
    h6 = torch.where(is_r, h_r, torch.where(is_g, h_g, h_b))
    h = h6 * 60.0
    keep_hue = (s >= SAT_GRAD_CUTOFF).detach()
    h = torch.where(keep_hue, h, torch.zeros((), dtype=p.dtype, device=p.device))
    return torch.stack((h, s, v))


def soft_histogram(p: torch.Tensor, space: str = "hsv") -> torch.Tensor:
    """Differentiable (3, 256) histogram via triangular kernels of width 1 bin.

    Converts the patch to HSV (if requested), scales channels into [0, 256],
    and spreads each value linearly over the two bins whose centers bracket
    it; channels are normalized to sum to 1.
    """
    if space == "hsv":
        chans = rgb_to_hsv_diff(p)
        scale = torch.as_tensor(_HSV_SCALE, dtype=p.dtype, device=p.device)
    elif space == "rgb":
        chans = p
        scale = torch.as_tensor(_RGB_SCALE, dtype=p.dtype, device=p.device)
    else:
        raise ValueError(f"unknown color space {space!r}")
    values = chans.reshape(3, -1) * scale.unsqueeze(1)  # (3, N) in [0, 256]
    centers = torch.arange(256, dtype=p.dtype, device=p.device) + 0.5
    weights = torch.relu(1.0 - torch.abs(values.unsqueeze(-1) - centers))  # (3, N, 256)
    hist = weights.sum(dim=1)
    return hist / hist.sum(dim=1, keepdim=True)


def chi_square_distance(h1: np.ndarray, h2: np.ndarray, eps: float = HIST_EPS) -> float:
    """Chi-square histogram distance, summed over channels and bins."""
    h1 = np.asarray(h1, dtype=np.float64)
    h2 = np.asarray(h2, dtype=np.float64)
    return float(((h1 - h2) ** 2 / (h1 + h2 + eps)).sum())


def loss_hist(
    p: torch.Tensor,
    h_ref: Histogram,
    eps: float = HIST_EPS,
    channel_mask: tuple[bool, bool, bool] = (True, True, True),
) -> torch.Tensor:
    """Chi-square distance between the patch's soft HSV histogram and a reference.

    Args:
        p: Patch tensor (3, s, s).
        h_ref: Reference histogram (HSV space).
        eps: Denominator stabilizer for empty bins.
        channel_mask: Which of (H, S, V) participate; all by default.
    """
    if h_ref.space != "hsv":
        raise ValueError("reference histogram must be in HSV space")
    h_p = soft_histogram(p, space="hsv")
    ref = torch.as_tensor(h_ref.counts, dtype=p.dtype, device=p.device)
    per_bin = (ref - h_p) ** 2 / (ref + h_p + eps)
    keep = torch.as_tensor(channel_mask, dtype=torch.bool, device=p.device)
    return per_bin[keep].sum()


# ---------------------------------------------------------------------------
# adversarial detection losses


def _pred_corners(boxes: np.ndarray) -> tuple[np.ndarray, ...]:
    """Clipped corner arrays for (N, 4) center-format prediction boxes."""
    x1 = np.clip(boxes[:, 0] - boxes[:, 2] / 2, 0.0, 1.0)
    y1 = np.clip(boxes[:, 1] - boxes[:, 3] / 2, 0.0, 1.0)
    x2 = np.clip(boxes[:, 0] + boxes[:, 2] / 2, 0.0, 1.0)
    y2 = np.clip(boxes[:, 1] + boxes[:, 3] / 2, 0.0, 1.0)
    return x1, y1, x2, y2


def _iou_with_box(boxes: np.ndarray, box: BoundingBox) -> np.ndarray:
    """IoU of every (N, 4) center-format prediction box against one box."""
    px1, py1, px2, py2 = _pred_corners(boxes)
    bx1, by1, bx2, by2 = box.corners()
    iw = np.minimum(px2, bx2) - np.maximum(px1, bx1)
    ih = np.minimum(py2, by2) - np.maximum(py1, by1)
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_p = np.clip(px2 - px1, 0.0, None) * np.clip(py2 - py1, 0.0, None)
    union = area_p + box.area() - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def associated_indices(
    raw: RawDetections,
    patched_box: BoundingBox,
    patch_center: tuple[float, float] | None = None,
    iou_gate: float = ASSOC_IOU_GATE,
) -> np.ndarray:
    """Predictions attributed to a patched object.

    Primary rule: every prediction whose box overlaps the object's
    ground-truth box with IoU above ``iou_gate``.  If none qualify, falls
    back to the single highest-objectness prediction whose box contains the
    patch center (the object-box center when no explicit center is given).
    Selection happens on detached values; gradients are unaffected.
    """
    boxes = raw.boxes.detach().cpu().numpy().astype(np.float64)
    ious = _iou_with_box(boxes, patched_box)
    idx = np.nonzero(ious > iou_gate)[0]
    if idx.size > 0:
        return idx
    px, py = patch_center if patch_center is not None else (patched_box.cx, patched_box.cy)
    x1, y1, x2, y2 = _pred_corners(boxes)
    contains = (x1 <= px) & (px <= x2) & (y1 <= py) & (py <= y2)
    cand = np.nonzero(contains)[0]
    if cand.size == 0:
        return cand
    obj = raw.obj.detach().cpu().numpy()
    return cand[[int(np.argmax(obj[cand]))]]


def loss_hiding_adv(
    raw: RawDetections,
    patched_box: BoundingBox,
    mode: AdvMode = AdvMode.BOTH,
    patch_center: tuple[float, float] | None = None,
) -> torch.Tensor:
    """Score to suppress for a hidden object: the strongest associated prediction.

    Depending on ``mode`` this is max(y_cls), max(y_obj), or
    max(y_obj * max(y_cls)) over associated predictions; zero when nothing
    is associated (nothing left to suppress).
    """
    idx = associated_indices(raw, patched_box, patch_center)
    if idx.size == 0:
        return torch.zeros((), dtype=raw.obj.dtype, device=raw.obj.device)
    obj = raw.obj[idx]
    cls = raw.cls[idx]
    if mode is AdvMode.CLS_ONLY:
        return cls.max()
    if mode is AdvMode.OBJ_ONLY:
        return obj.max()
    return (obj * cls.max(dim=1).values).max()


def loss_creating_adv(
    raw: RawDetections,
    placement: CreatingPlacement | BoundingBox,
    target_class: int,
) -> torch.Tensor:
    """One minus the best target-class score among predictions centered in rm.

    Equals 1 when no prediction centers inside the region (nothing created).
    """
    if isinstance(placement, CreatingPlacement):
        x1, y1, x2, y2 = placement.rm
    else:
        x1, y1, x2, y2 = placement.corners()
    if not 0 <= target_class < raw.num_classes:
        raise ValueError(f"target class {target_class} outside [0, {raw.num_classes})")
    boxes = raw.boxes.detach().cpu().numpy().astype(np.float64)
    cx = np.clip(boxes[:, 0], 0.0, 1.0)
    cy = np.clip(boxes[:, 1], 0.0, 1.0)
    inside = np.nonzero((x1 <= cx) & (cx <= x2) & (y1 <= cy) & (cy <= y2))[0]
    if inside.size == 0:
        return torch.ones((), dtype=raw.obj.dtype, device=raw.obj.device)
    score = (raw.obj[inside] * raw.cls[inside, target_class]).max()
    return 1.0 - score


def loss_altering_adv(
    raw: RawDetections,
    patched_box: BoundingBox,
    target_class: int,
    patch_center: tuple[float, float] | None = None,
) -> torch.Tensor:
    """Push the patched object's class toward the target.

    At the associated prediction with highest objectness:
    max over non-target classes of y_cls, plus twice (1 - y_cls[target]).
    Returns the maximal penalty 2 when nothing is associated (the target
    is absent and there is nothing to suppress).
    """
    if not 0 <= target_class < raw.num_classes:
        raise ValueError(f"target class {target_class} outside [0, {raw.num_classes})")
    idx = associated_indices(raw, patched_box, patch_center)
    if idx.size == 0:
        return torch.full((), 2.0, dtype=raw.obj.dtype, device=raw.obj.device)
    obj = raw.obj.detach().cpu().numpy()
    best = idx[int(np.argmax(obj[idx]))]
    ycls = raw.cls[best]
    others = torch.cat([ycls[:target_class], ycls[target_class + 1 :]])
    other_term = (
        others.max()
        if others.numel() > 0
        else torch.zeros((), dtype=raw.obj.dtype, device=raw.obj.device)
    )
    return other_term + 2.0 * (1.0 - ycls[target_class])


def composite_loss(spec: AttackSpec, terms: dict[str, torch.Tensor]) -> torch.Tensor:
    """Weighted sum of the loss terms active for this attack.

    ``terms`` maps "adv"/"tv"/"nps" (required) and "his" (required whenever
    the histogram weight is positive) to scalar tensors.
    """
    w = spec.weights
    for name in ("adv", "tv", "nps"):
        if name not in terms:
            raise ValueError(f"missing loss term {name!r}")
    total = w.adv * terms["adv"] + w.tv * terms["tv"] + w.nps * terms["nps"]
    if w.his > 0:
        if terms.get("his") is None:
            raise ValueError(
                "histogram weight is positive but no histogram loss term was provided"
            )
        total = total + w.his * terms["his"]
    return total
