"""White-box patch optimization against a differentiable detector.

Only the patch pixels are trained: Adam (lr 0.03) steps the patch, values
are clamped to [0, 1] after every update, and the detector weights are
left untouched.  The learning rate decays by 10x via ReduceLROnPlateau on
the validation loss (patience 50, floor 1e-5).  Every epoch records the
training loss terms, validation loss, validation attack success rate, the
learning rate in effect, and wall time.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core import MIN_PATCH_SIDE, AttackSpec, AttackType, InitMode
from .data import Scene, image_to_tensor, save_patch
from .detector import DetectorAdapter, decode_detections
from .evaluate import EvalConfig, build_reference_histogram, compose_patch, sample_placements
from .geometry import DEFAULT_PATCH_FRAC, CreatingPlacement, MaskSpec
from .losses import (
    Histogram,
    PrintPalette,
    composite_loss,
    loss_altering_adv,
    loss_creating_adv,
    loss_hiding_adv,
    loss_hist,
    loss_nps,
    loss_tv,
)
from .metrics import EvalCase
from .render import PhysRanges

__all__ = [
    "RefStats",
    "TrainConfig",
    "EpochRecord",
    "TrainHistory",
    "init_patch",
    "train_patch",
    "compute_convergence",
    "final_success_rate",
]

_INIT_NOISE_STD = 0.3
_FINAL_WINDOW = 10


@dataclass(frozen=True)
class RefStats:
    """Summary color statistics of a reference object class."""

    mean_rgb: tuple[float, float, float]
    source: str = ""

    def __post_init__(self) -> None:
        if len(self.mean_rgb) != 3 or any(not 0.0 <= v <= 1.0 for v in self.mean_rgb):
            raise ValueError(f"mean_rgb must be three values in [0, 1], got {self.mean_rgb}")

    @staticmethod
    def from_dataset(dataset, class_id: int) -> "RefStats":
        """Pull class color statistics from a dataset manifest."""
        mean = dataset.class_mean_rgb(class_id)
        return RefStats(mean_rgb=mean, source=f"{dataset.root}:class{class_id}")


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for patch training."""

    patch_side: int = 64
    epochs: int = 200
    lr: float = 0.03
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    patience: int = 50
    decay_factor: float = 0.1
    min_lr: float = 1e-5
    batch_size: int = 8
    seed: int = 0
    patch_frac: float = DEFAULT_PATCH_FRAC
    apply_phys: bool = True
    phys: PhysRanges = field(default_factory=PhysRanges)
    train_images: int | None = None
    val_images: int | None = None
    conf_thresh: float = 0.25
    nms_iou: float = 0.45
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None

    def __post_init__(self) -> None:
        if self.patch_side < MIN_PATCH_SIDE:
            raise ValueError(f"patch_side must be >= {MIN_PATCH_SIDE}, got {self.patch_side}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.lr <= 0 or self.min_lr <= 0:
            raise ValueError("learning rates must be positive")
        if not 0.0 < self.decay_factor < 1.0:
            raise ValueError(f"decay_factor must lie in (0, 1), got {self.decay_factor}")
        if self.patience < 0:
            raise ValueError(f"patience must be >= 0, got {self.patience}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.checkpoint_every < 0:
            raise ValueError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")
        if self.checkpoint_every > 0 and self.checkpoint_dir is None:
            raise ValueError("checkpoint_every > 0 requires checkpoint_dir")

    def eval_config(self) -> EvalConfig:
        return EvalConfig(
            patch_frac=self.patch_frac,
            apply_phys=self.apply_phys,
            phys=self.phys,
            conf_thresh=self.conf_thresh,
            nms_iou=self.nms_iou,
            batch_size=self.batch_size,
        )


@dataclass(frozen=True)
class EpochRecord:
    """Loss and validation telemetry for one training epoch (1-based)."""

    epoch: int
    loss_total: float
    loss_adv: float
    loss_tv: float
    loss_nps: float
    loss_his: float
    val_loss: float
    val_rs: float
    lr: float
    seconds: float


@dataclass
class TrainHistory:
    """Per-epoch records, serializable as JSON lines."""

    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: EpochRecord) -> None:
        self.records.append(record)

    def to_jsonl(self, path: str | Path) -> None:
        lines = [json.dumps(asdict(r), sort_keys=True) for r in self.records]
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))

    @staticmethod
    def from_jsonl(path: str | Path) -> "TrainHistory":
        history = TrainHistory()
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if line:
                history.append(EpochRecord(**json.loads(line)))
        return history


def final_success_rate(history: TrainHistory) -> float:
    """Mean validation success rate over the final (up to) 10 epochs."""
    if not history.records:
        raise ValueError("history has no epochs")
    window = history.records[-_FINAL_WINDOW:]
    return float(np.mean([r.val_rs for r in window]))


def compute_convergence(history: TrainHistory) -> int:
    """First epoch whose validation success rate enters the final band.

    The band is [min, max] of the final 10 epochs' validation success
    rates; the returned epoch number is 1-based.  Requires at least 20
    recorded epochs to be meaningful.
    """
    if len(history) < 2 * _FINAL_WINDOW:
        raise ValueError(
            f"convergence needs at least {2 * _FINAL_WINDOW} epochs, got {len(history)}"
        )
    window = [r.val_rs for r in history.records[-_FINAL_WINDOW:]]
    lo, hi = min(window), max(window)
    for record in history.records:
        if lo <= record.val_rs <= hi:
            return record.epoch
    return history.records[-1].epoch


def init_patch(
    mode: InitMode,
    side: int,
    rng: np.random.Generator,
    ref_stats: RefStats | None = None,
) -> torch.Tensor:
    """Build the initial patch.

    gray: constant 0.5.  random: 0.5 + N(0, 0.3) per pixel, clamped.
    reference: per-channel reference mean + N(0, 0.3), clamped; requires
    ``ref_stats``.
    """
    if side < MIN_PATCH_SIDE:
        raise ValueError(f"patch side must be >= {MIN_PATCH_SIDE}, got {side}")
    if mode is InitMode.GRAY:
        return torch.full((3, side, side), 0.5, dtype=torch.float32)
    noise = rng.standard_normal((3, side, side)) * _INIT_NOISE_STD
    if mode is InitMode.RANDOM:
        arr = 0.5 + noise
    elif mode is InitMode.REFERENCE:
        if ref_stats is None:
            raise ValueError("reference initialization requires RefStats")
        arr = np.asarray(ref_stats.mean_rgb)[:, None, None] + noise
    else:
        raise ValueError(f"unknown init mode {mode!r}")
    return torch.from_numpy(np.clip(arr, 0.0, 1.0).astype(np.float32))


def _image_adv(
    raw,
    spec: AttackSpec,
    mask_specs: list[MaskSpec],
    placement: CreatingPlacement | None,
) -> torch.Tensor | None:
    """Adversarial term for one image; None when nothing was patched."""
    if spec.attack_type is AttackType.CREATING:
        if placement is None:
            return None
        return loss_creating_adv(raw, placement, int(spec.target_class))
    terms = []
    for ms in mask_specs:
        if ms.host_box is None:
            continue
        h, w = ms.raster_shape
        center = (ms.center_px[0] / w, ms.center_px[1] / h)
        if spec.attack_type is AttackType.HIDING:
            terms.append(loss_hiding_adv(raw, ms.host_box, spec.adv_mode, center))
        else:
            terms.append(loss_altering_adv(raw, ms.host_box, int(spec.target_class), center))
    if not terms:
        return None
    return torch.stack(terms).mean()


def _batch_forward(
    adapter: DetectorAdapter,
    scenes: list[Scene],
    indices,
    patch: torch.Tensor,
    spec: AttackSpec,
    rng: np.random.Generator,
    eval_cfg: EvalConfig,
):
    """Patch, stack, and run one batch; returns raws plus per-image context."""
    xs = []
    contexts = []
    for i in indices:
        image, boxes = scenes[i]
        x = image_to_tensor(image)
        shape = (int(x.shape[1]), int(x.shape[2]))
        mask_specs, placement = sample_placements(boxes, spec, rng, eval_cfg, shape)
        if mask_specs:
            x = compose_patch(x, patch, mask_specs, rng, eval_cfg)
        xs.append(x)
        contexts.append((boxes, mask_specs, placement))
    raws = adapter.detect_raw_batch(torch.stack(xs))
    return raws, contexts


def _batch_adv(raws, contexts, spec: AttackSpec) -> torch.Tensor:
    per_image = []
    for raw, (_, mask_specs, placement) in zip(raws, contexts):
        term = _image_adv(raw, spec, mask_specs, placement)
        if term is not None:
            per_image.append(term)
    if not per_image:
        return torch.zeros(())
    return torch.stack(per_image).mean()


def _patch_terms(
    patch: torch.Tensor,
    spec: AttackSpec,
    palette: PrintPalette,
    h_ref: Histogram | None,
) -> dict[str, torch.Tensor]:
    terms: dict[str, torch.Tensor] = {
        "tv": loss_tv(patch),
        "nps": loss_nps(patch, palette),
    }
    if spec.weights.his > 0:
        terms["his"] = loss_hist(patch, h_ref)
    return terms


def _validate(
    adapter: DetectorAdapter,
    scenes: list[Scene],
    patch: torch.Tensor,
    spec: AttackSpec,
    cfg: TrainConfig,
    eval_cfg: EvalConfig,
    palette: PrintPalette,
    h_ref: Histogram | None,
    epoch: int,
) -> tuple[float, float]:
    """Validation loss and attack success rate with epoch-seeded placements."""
    from .evaluate import mean_cm

    rng = np.random.default_rng(cfg.seed + 1_000_003 * epoch)
    adv_terms: list[torch.Tensor] = []
    cases: list[EvalCase] = []
    with torch.no_grad():
        for start in range(0, len(scenes), cfg.batch_size):
            indices = range(start, min(start + cfg.batch_size, len(scenes)))
            raws, contexts = _batch_forward(adapter, scenes, indices, patch, spec, rng, eval_cfg)
            for offset, (raw, (boxes, mask_specs, placement)) in enumerate(zip(raws, contexts)):
                term = _image_adv(raw, spec, mask_specs, placement)
                if term is not None:
                    adv_terms.append(term)
                dets = decode_detections(raw, cfg.conf_thresh, cfg.nms_iou)
                cases.append(
                    EvalCase(
                        image_id=f"val_{start + offset:05d}",
                        gt=boxes,
                        detections=dets,
                        attack_type=spec.attack_type,
                        target_class=spec.target_class,
                        rm=placement.rm_box() if placement is not None else None,
                    )
                )
        adv = torch.stack(adv_terms).mean() if adv_terms else torch.zeros(())
        terms = _patch_terms(patch, spec, palette, h_ref)
        terms["adv"] = adv
        val_loss = float(composite_loss(spec, terms))
    return val_loss, mean_cm(cases)


def _usable_scenes(scenes: list[Scene], spec: AttackSpec, split: str) -> list[Scene]:
    """Drop unlabeled scenes for attacks that need objects to patch."""
    if spec.attack_type is AttackType.CREATING:
        return scenes
    kept = [s for s in scenes if s[1]]
    dropped = len(scenes) - len(kept)
    if dropped:
        warnings.warn(f"dropping {dropped} unlabeled {split} scenes")
    return kept


def train_patch(
    adapter: DetectorAdapter,
    dataset,
    spec: AttackSpec,
    cfg: TrainConfig | None = None,
    ref_stats: RefStats | None = None,
    h_ref: Histogram | None = None,
    palette: PrintPalette | None = None,
) -> tuple[torch.Tensor, TrainHistory]:
    """Optimize a patch against a white-box detector.

    Args:
        adapter: Differentiable detector; its weights are never modified.
        dataset: Object with load_split("train"/"val") -> list[Scene]; a
            manifest-backed Dataset also supplies reference statistics.
        spec: Attack definition (type, target, loss weights, init mode).
        cfg: Training hyperparameters; defaults when None.
        ref_stats: Color statistics for reference initialization; derived
            from the dataset manifest when omitted and a target is set.
        h_ref: Reference histogram for the color-matching loss; derived
            from the dataset's designated reference object when omitted.
        palette: Printable colors for the NPS term; bundled default if None.

    Returns:
        (trained patch (3, s, s) in [0, 1], per-epoch history).
    """
    cfg = cfg or TrainConfig()
    if not adapter.differentiable:
        raise ValueError(
            "adapter does not expose gradients; use the shadow-model or "
            "transfer pipelines in patchlab.blackbox instead"
        )
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    palette = palette or PrintPalette.default()

    train_scenes = _usable_scenes(dataset.load_split("train"), spec, "train")
    if cfg.train_images is not None:
        train_scenes = train_scenes[: cfg.train_images]
    if not train_scenes:
        raise ValueError("train split has no usable scenes")
    try:
        val_scenes = _usable_scenes(dataset.load_split("val"), spec, "val")
    except KeyError:
        warnings.warn("dataset has no val split; validating on training scenes")
        val_scenes = train_scenes
    if cfg.val_images is not None:
        val_scenes = val_scenes[: cfg.val_images]
    if not val_scenes:
        raise ValueError("val split has no usable scenes")

    if spec.init_mode is InitMode.REFERENCE and ref_stats is None:
        if spec.target_class is None:
            raise ValueError("reference initialization requires a target class or RefStats")
        ref_stats = RefStats.from_dataset(dataset, int(spec.target_class))
    if spec.weights.his > 0 and h_ref is None:
        if spec.target_class is None:
            raise ValueError("histogram loss requires a target class or an explicit h_ref")
        h_ref = build_reference_histogram(dataset, int(spec.target_class))

    patch0 = init_patch(spec.init_mode, cfg.patch_side, rng, ref_stats)
    history = TrainHistory()
    if cfg.epochs == 0:
        return patch0, history

    patch = patch0.clone().requires_grad_(True)
    opt = torch.optim.Adam([patch], lr=cfg.lr, betas=cfg.betas, eps=cfg.adam_eps)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, mode="min", factor=cfg.decay_factor, patience=cfg.patience, min_lr=cfg.min_lr
    )
    eval_cfg = cfg.eval_config()

    # patch training must not disturb the detector, so freeze and restore
    frozen: list[tuple[torch.nn.Parameter, bool]] = []
    net = getattr(adapter, "net", None)
    if isinstance(net, torch.nn.Module):
        for param in net.parameters():
            frozen.append((param, param.requires_grad))
            param.requires_grad_(False)
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            perm = rng.permutation(len(train_scenes))
            sums = {"total": 0.0, "adv": 0.0, "tv": 0.0, "nps": 0.0, "his": 0.0}
            n_batches = 0
            for start in range(0, len(perm), cfg.batch_size):
                indices = perm[start : start + cfg.batch_size]
                raws, contexts = _batch_forward(
                    adapter, train_scenes, indices, patch, spec, rng, eval_cfg
                )
                terms = _patch_terms(patch, spec, palette, h_ref)
                terms["adv"] = _batch_adv(raws, contexts, spec)
                total = composite_loss(spec, terms)
                if not torch.isfinite(total):
                    raise RuntimeError(
                        f"non-finite training loss at epoch {epoch} "
                        f"(lr={opt.param_groups[0]['lr']:g}, seed={cfg.seed})"
                    )
                opt.zero_grad()
                total.backward()
                opt.step()
                with torch.no_grad():
                    patch.clamp_(0.0, 1.0)
                sums["total"] += float(total.detach())
                for name in ("adv", "tv", "nps"):
                    sums[name] += float(terms[name].detach())
                his_term = terms.get("his")
                sums["his"] += float(his_term.detach()) if his_term is not None else 0.0
                n_batches += 1
            lr_now = float(opt.param_groups[0]["lr"])
            val_loss, val_rs = _validate(
                adapter, val_scenes, patch, spec, cfg, eval_cfg, palette, h_ref, epoch
            )
            sched.step(val_loss)
            history.append(
                EpochRecord(
                    epoch=epoch,
                    loss_total=sums["total"] / n_batches,
                    loss_adv=sums["adv"] / n_batches,
                    loss_tv=sums["tv"] / n_batches,
                    loss_nps=sums["nps"] / n_batches,
                    loss_his=sums["his"] / n_batches,
                    val_loss=val_loss,
                    val_rs=val_rs,
                    lr=lr_now,
                    seconds=time.perf_counter() - t0,
                )
            )
            if cfg.checkpoint_every > 0 and epoch % cfg.checkpoint_every == 0:
                ckpt_dir = Path(cfg.checkpoint_dir)
                ckpt_dir.mkdir(parents=True, exist_ok=True)
                save_patch(
                    ckpt_dir / f"patch_epoch{epoch:04d}.npy",
                    patch.detach(),
                    {"epoch": epoch, "seed": cfg.seed, "attack": spec.to_dict()},
                )
    finally:
        for param, flag in frozen:
            param.requires_grad_(flag)
    return patch.detach().clone(), history
