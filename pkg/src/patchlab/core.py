"""Shared vocabulary types for the attack pipelines.

Images and patches are float tensors in [0, 1]: an image is (3, H, W), a
patch is a square (3, s, s) with s >= 8.  Boxes are stored in normalized
center format (cx, cy, w, h) relative to image size, matching the on-disk
annotation format.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import torch

__all__ = [
    "AttackType",
    "AdvMode",
    "InitMode",
    "BoundingBox",
    "Detection",
    "RawDetections",
    "LossWeights",
    "AttackSpec",
    "MIN_PATCH_SIDE",
    "iou",
    "clamp01",
    "validate_image",
    "validate_patch",
]

MIN_PATCH_SIDE = 8


class AttackType(str, enum.Enum):
    """The three patch objectives: suppress, fabricate, or re-label detections."""

    HIDING = "hiding"
    CREATING = "creating"
    ALTERING = "altering"


class AdvMode(str, enum.Enum):
    """Which detector scores the hiding loss suppresses."""

    CLS_ONLY = "cls_only"
    OBJ_ONLY = "obj_only"
    BOTH = "both"


class InitMode(str, enum.Enum):
    """Patch initialization strategies."""

    GRAY = "gray"
    RANDOM = "random"
    REFERENCE = "reference"


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in normalized center format.

    Attributes:
        cx, cy: Box center in [0, 1], relative to image width / height.
        w, h: Box extents in (0, 1], relative to image width / height.
        class_id: Optional integer class label.
    """

    cx: float
    cy: float
    w: float
    h: float
    class_id: int | None = None

    def __post_init__(self) -> None:
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box extents must be positive, got w={self.w}, h={self.h}")
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValueError(f"box center must lie in [0,1]^2, got ({self.cx}, {self.cy})")

    def corners(self) -> tuple[float, float, float, float]:
        """Return (x1, y1, x2, y2) corners clipped to the unit square."""
        x1 = max(0.0, self.cx - self.w / 2)
        y1 = max(0.0, self.cy - self.h / 2)
        x2 = min(1.0, self.cx + self.w / 2)
        y2 = min(1.0, self.cy + self.h / 2)
        return x1, y1, x2, y2

    @staticmethod
    def from_corners(
        x1: float, y1: float, x2: float, y2: float, class_id: int | None = None
    ) -> "BoundingBox":
        if not (x2 > x1 and y2 > y1):
            raise ValueError(f"degenerate corners ({x1}, {y1}, {x2}, {y2})")
        return BoundingBox((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1, class_id)

    def area(self) -> float:
        x1, y1, x2, y2 = self.corners()
        return max(0.0, x2 - x1) * max(0.0, y2 - y1)

    def contains(self, x: float, y: float) -> bool:
        """True if normalized point (x, y) lies inside the clipped box."""
        x1, y1, x2, y2 = self.corners()
        return x1 <= x <= x2 and y1 <= y <= y2

    def with_class(self, class_id: int) -> "BoundingBox":
        return BoundingBox(self.cx, self.cy, self.w, self.h, class_id)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes (class labels ignored)."""
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.area() + b.area() - inter
    return inter / union if union > 0.0 else 0.0


@dataclass(frozen=True)
class Detection:
    """A post-NMS detection: a classified box with a confidence score."""

    box: BoundingBox
    confidence: float

    @property
    def class_id(self) -> int:
        if self.box.class_id is None:
            raise ValueError("detection box carries no class label")
        return self.box.class_id


@dataclass
class RawDetections:
    """Pre-NMS detector head output, kept as tensors so gradients survive.

    Attributes:
        boxes: (N, 4) normalized (cx, cy, w, h) per prediction.
        obj: (N,) objectness scores in [0, 1].
        cls: (N, C) per-class scores in [0, 1].
    """

    boxes: torch.Tensor
    obj: torch.Tensor
    cls: torch.Tensor

    def __post_init__(self) -> None:
        n = self.obj.shape[0]
        if self.boxes.shape != (n, 4) or self.cls.shape[0] != n or self.cls.ndim != 2:
            raise ValueError(
                f"inconsistent raw detection shapes: boxes {tuple(self.boxes.shape)}, "
                f"obj {tuple(self.obj.shape)}, cls {tuple(self.cls.shape)}"
            )

    def __len__(self) -> int:
        return int(self.obj.shape[0])

    @property
    def num_classes(self) -> int:
        return int(self.cls.shape[1])

    def box(self, i: int) -> BoundingBox:
        cx, cy, w, h = (float(v) for v in self.boxes[i])
        return BoundingBox(
            min(max(cx, 0.0), 1.0), min(max(cy, 0.0), 1.0), max(w, 1e-6), max(h, 1e-6)
        )


@dataclass(frozen=True)
class LossWeights:
    """Multipliers for the composite patch-training loss."""

    adv: float = 3.0
    tv: float = 1.0
    nps: float = 1.0
    his: float = 0.0

    def __post_init__(self) -> None:
        for name in ("adv", "tv", "nps", "his"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")

    def to_dict(self) -> dict:
        return {"adv": self.adv, "tv": self.tv, "nps": self.nps, "his": self.his}

    @staticmethod
    def from_dict(d: dict) -> "LossWeights":
        return LossWeights(**d)

    @staticmethod
    def defaults_for(attack_type: AttackType) -> "LossWeights":
        """Default weighting per attack family.

        Hiding uses (adv, tv, nps) = (3, 1, 1) with no histogram term;
        creating and altering add the color-histogram term at 0.3 and relax
        smoothness to 0.5.
        """
        if attack_type is AttackType.HIDING:
            return LossWeights(adv=3.0, tv=1.0, nps=1.0, his=0.0)
        return LossWeights(adv=3.0, tv=0.5, nps=1.0, his=0.3)


@dataclass(frozen=True)
class AttackSpec:
    """Everything that defines one attack experiment besides the data.

    Attributes:
        attack_type: Which objective the patch optimizes.
        target_class: Class the patch creates or alters toward; ignored for
            hiding.
        adv_mode: Score-suppression mode (hiding only).
        weights: Composite loss multipliers.
        init_mode: Patch initialization strategy.
    """

    attack_type: AttackType
    target_class: int | None = None
    adv_mode: AdvMode = AdvMode.BOTH
    weights: LossWeights = field(default_factory=LossWeights)
    init_mode: InitMode = InitMode.GRAY

    def __post_init__(self) -> None:
        if self.attack_type in (AttackType.CREATING, AttackType.ALTERING):
            if self.target_class is None or self.target_class < 0:
                raise ValueError(f"{self.attack_type.value} attack requires a target class")

    def to_dict(self) -> dict:
        return {
            "attack_type": self.attack_type.value,
            "target_class": self.target_class,
            "adv_mode": self.adv_mode.value,
            "weights": self.weights.to_dict(),
            "init_mode": self.init_mode.value,
        }

    @staticmethod
    def from_dict(d: dict) -> "AttackSpec":
        return AttackSpec(
            attack_type=AttackType(d["attack_type"]),
            target_class=d.get("target_class"),
            adv_mode=AdvMode(d.get("adv_mode", AdvMode.BOTH.value)),
            weights=LossWeights.from_dict(d.get("weights", LossWeights().to_dict())),
            init_mode=InitMode(d.get("init_mode", InitMode.GRAY.value)),
        )


def clamp01(x: torch.Tensor) -> torch.Tensor:
    """Clamp pixel values into the valid [0, 1] range."""
    return x.clamp(0.0, 1.0)


def validate_image(x: torch.Tensor) -> torch.Tensor:
    """Check that `x` is a (3, H, W) float tensor with values in [0, 1]."""
    if x.ndim != 3 or x.shape[0] != 3:
        raise ValueError(f"expected image of shape (3, H, W), got {tuple(x.shape)}")
    if not x.is_floating_point():
        raise ValueError(f"expected float image, got dtype {x.dtype}")
    lo, hi = float(x.min()), float(x.max())
    if lo < -1e-6 or hi > 1.0 + 1e-6:
        raise ValueError(f"image values outside [0,1]: min={lo}, max={hi}")
    return x


def validate_patch(p: torch.Tensor) -> torch.Tensor:
    """Check that `p` is a square (3, s, s) patch, s >= 8, values in [0, 1]."""
    validate_image(p)
    if p.shape[1] != p.shape[2]:
        raise ValueError(f"patch must be square, got {tuple(p.shape)}")
    if p.shape[1] < MIN_PATCH_SIDE:
        raise ValueError(f"patch side {p.shape[1]} below minimum {MIN_PATCH_SIDE}")
    return p
