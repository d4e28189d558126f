"""Attack application and evaluation over image sets.

Placement and photometric sampling are driven by one np.random.Generator
per evaluation run, with a fixed per-image draw order (documented in
``apply_patch_to_image``).  Re-running with the same seed and a patch of
the same side therefore reproduces identical placements, which is how the
random-noise baseline is made directly comparable to a trained patch.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .core import AttackSpec, AttackType, BoundingBox, validate_patch
from .data import Scene, image_to_tensor
from .detector import DetectorAdapter, decode_detections
from .geometry import (
    DEFAULT_PATCH_FRAC,
    CreatingPlacement,
    MaskSpec,
    PlacementInfeasibleError,
    rasterize_mask,
    sample_creating_placement,
    sample_object_placement,
)
from .losses import reference_histogram
from .metrics import EvalCase, Report, ReportRow, assemble_report, summarize_cases
from .render import PhysParams, PhysRanges, compose, mask_to_tensor, transform_patch, warp_patch

__all__ = [
    "EvalConfig",
    "sample_placements",
    "compose_patch",
    "apply_patch_to_image",
    "noise_patch",
    "evaluate_attack",
    "attack_report",
    "mean_cm",
]


@dataclass(frozen=True)
class EvalConfig:
    """Knobs for applying and scoring a patch on an image set."""

    patch_frac: float = DEFAULT_PATCH_FRAC
    apply_phys: bool = True
    phys: PhysRanges = field(default_factory=PhysRanges)
    conf_thresh: float = 0.25
    nms_iou: float = 0.45
    batch_size: int = 8
    max_images: int | None = None

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_images is not None and self.max_images < 1:
            raise ValueError(f"max_images must be >= 1, got {self.max_images}")


def noise_patch(side: int, rng: np.random.Generator) -> torch.Tensor:
    """Uniform-random patch used as the unoptimized baseline."""
    return torch.from_numpy(rng.uniform(0.0, 1.0, (3, side, side)).astype(np.float32))


def sample_placements(
    boxes: list[BoundingBox],
    spec: AttackSpec,
    rng: np.random.Generator,
    cfg: EvalConfig,
    raster_shape: tuple[int, int],
) -> tuple[list[MaskSpec], CreatingPlacement | None]:
    """Draw patch placements for one image.

    Hiding/altering draw one placement per ground-truth object; creating
    draws a single region rm and one placement inside it.  Objects too
    small to carry a patch are skipped with a warning.
    """
    h, w = raster_shape
    if spec.attack_type is AttackType.CREATING:
        placement = sample_creating_placement(w, h, rng)
        return [MaskSpec.from_placement(placement, (h, w))], placement
    mask_specs: list[MaskSpec] = []
    for box in boxes:
        try:
            mask_specs.append(sample_object_placement(box, cfg.patch_frac, rng, (h, w)))
        except PlacementInfeasibleError as exc:
            warnings.warn(f"skipping unpatchable object: {exc}")
    return mask_specs, None


def compose_patch(
    x: torch.Tensor,
    patch: torch.Tensor,
    mask_specs: list[MaskSpec],
    rng: np.random.Generator,
    cfg: EvalConfig,
) -> torch.Tensor:
    """Render the patch into the image at each placement.

    Per placement, in order: photometric parameters are drawn (when
    enabled), the patch is transformed, warped into image coordinates, and
    composited under a binary mask.  Gradients flow back to ``patch``.
    """
    out = x
    for mask_spec in mask_specs:
        if cfg.apply_phys:
            params = cfg.phys.sample(rng, int(patch.shape[1]))
        else:
            params = PhysParams()
        p_t = transform_patch(patch, params)
        p_w = warp_patch(p_t, mask_spec)
        m = mask_to_tensor(rasterize_mask(mask_spec))
        out = compose(out, m, p_w)
    return out


def apply_patch_to_image(
    x: torch.Tensor,
    boxes: list[BoundingBox],
    patch: torch.Tensor | None,
    spec: AttackSpec,
    rng: np.random.Generator,
    cfg: EvalConfig,
) -> tuple[torch.Tensor, CreatingPlacement | None]:
    """Compose a patch into one image according to the attack type.

    Per-image draw order: geometry for every placement first, then
    photometric parameters per placement.  A None patch consumes the
    geometry draws but leaves the image unchanged, so clean baselines stay
    aligned with patched runs.

    Returns:
        (possibly patched image, creating placement or None).
    """
    if patch is not None:
        validate_patch(patch)
    mask_specs, placement = sample_placements(
        boxes, spec, rng, cfg, (int(x.shape[1]), int(x.shape[2]))
    )
    if patch is None:
        return x, placement
    return compose_patch(x, patch, mask_specs, rng, cfg), placement


def _to_tensor(image) -> torch.Tensor:
    if isinstance(image, torch.Tensor):
        return image
    return image_to_tensor(image)


def evaluate_attack(
    adapter: DetectorAdapter,
    scenes: list[Scene],
    patch: torch.Tensor | None,
    spec: AttackSpec,
    seed: int,
    cfg: EvalConfig | None = None,
    image_ids: list[str] | None = None,
) -> list[EvalCase]:
    """Apply a patch across scenes and collect per-image evaluation cases.

    Args:
        adapter: Detector under attack.
        scenes: (image, gt boxes) pairs; images uint8 arrays or float tensors.
        patch: Patch pixels, or None for a clean baseline pass.
        spec: Attack definition (type, target class).
        seed: Seed for all placement and photometric sampling.
        cfg: Evaluation knobs; defaults applied when None.
        image_ids: Optional stable ids; defaults to the scene index.

    Returns:
        One EvalCase per usable scene.
    """
    cfg = cfg or EvalConfig()
    rng = np.random.default_rng(seed)
    if cfg.max_images is not None:
        scenes = scenes[: cfg.max_images]
    ids = image_ids if image_ids is not None else [f"img_{i:05d}" for i in range(len(scenes))]
    if len(ids) < len(scenes):
        raise ValueError(f"got {len(ids)} image ids for {len(scenes)} scenes")
    prepared: list[tuple[str, list[BoundingBox], torch.Tensor, CreatingPlacement | None]] = []
    for image_id, (image, boxes) in zip(ids, scenes):
        if spec.attack_type is not AttackType.CREATING and not boxes:
            warnings.warn(f"skipping {image_id}: no objects to attack")
            continue
        x = _to_tensor(image)
        x_adv, placement = apply_patch_to_image(x, boxes, patch, spec, rng, cfg)
        prepared.append((image_id, boxes, x_adv, placement))
    cases: list[EvalCase] = []
    with torch.no_grad():
        for start in range(0, len(prepared), cfg.batch_size):
            chunk = prepared[start : start + cfg.batch_size]
            raws = adapter.detect_raw_batch(torch.stack([p[2] for p in chunk]))
            for (image_id, boxes, _, placement), raw in zip(chunk, raws):
                dets = decode_detections(raw, cfg.conf_thresh, cfg.nms_iou)
                cases.append(
                    EvalCase(
                        image_id=image_id,
                        gt=boxes,
                        detections=dets,
                        attack_type=spec.attack_type,
                        target_class=spec.target_class,
                        rm=placement.rm_box() if placement is not None else None,
                    )
                )
    return cases


def mean_cm(cases: list[EvalCase]) -> float:
    """Mean per-image confusion-matrix success rate (the R_S statistic)."""
    from .metrics import _CM_FNS

    if not cases:
        raise ValueError("no evaluation cases")
    fn = _CM_FNS[cases[0].attack_type]
    return float(np.mean([fn(c) for c in cases]))


def attack_report(
    adapter: DetectorAdapter,
    scenes: list[Scene],
    patch: torch.Tensor,
    spec: AttackSpec,
    seed: int,
    cfg: EvalConfig | None = None,
    label: str = "trained patch",
    with_baselines: bool = True,
    image_ids: list[str] | None = None,
) -> Report:
    """Evaluate a patch with clean and random-noise baseline rows.

    The noise baseline reuses the same seed and patch side, so its
    placements and photometric draws match the trained-patch run exactly.
    """
    if not scenes:
        return Report(rows=[], notes=["no scenes to evaluate"])
    cfg = cfg or EvalConfig()
    rows: list[ReportRow] = []
    baselines: list[ReportRow] = []
    patch_cases = evaluate_attack(adapter, scenes, patch, spec, seed, cfg, image_ids)
    rows.append(summarize_cases(patch_cases, label))
    if with_baselines:
        clean_cases = evaluate_attack(adapter, scenes, None, spec, seed, cfg, image_ids)
        baselines.append(summarize_cases(clean_cases, "no attack"))
        noise_rng = np.random.default_rng(seed + 983_041)
        noise = noise_patch(int(patch.shape[1]), noise_rng)
        noise_cases = evaluate_attack(adapter, scenes, noise, spec, seed, cfg, image_ids)
        baselines.append(summarize_cases(noise_cases, "random noise"))
    return assemble_report(rows, baselines)


def build_reference_histogram(dataset, class_id: int):
    """Histogram of the dataset's designated reference object for a class."""
    image, box = dataset.reference_crop(class_id)
    return reference_histogram(image_to_tensor(image), box)
