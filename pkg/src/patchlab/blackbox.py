"""Black-box attack pipelines: transfer evaluation and shadow-model extraction.

The victim is only ever queried through its detection interface.  A
query-counting wrapper enforces that view: it runs the inner detector
under no_grad, reports itself as non-differentiable, and counts both
queries and any attempt to pull gradients through it.  The shadow
pipeline extracts pseudo-labels from victim predictions, trains a
substitute detector on them, optimizes a patch against the substitute
(white-box), and scores that patch on the victim.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .core import AttackSpec, BoundingBox, Detection, RawDetections
from .data import Scene, image_to_tensor, parse_label_file, write_label_file
from .detector import (
    DetectorAdapter,
    ToyDetectorConfig,
    ToyTrainConfig,
    decode_detections,
    train_toy_detector,
)
from .evaluate import EvalConfig, attack_report
from .losses import Histogram
from .metrics import Report
from .optimize import TrainConfig, TrainHistory, train_patch

__all__ = [
    "DEFAULT_PSEUDO_CONF",
    "BudgetExhaustedError",
    "QueryBudget",
    "QueryCountingVictim",
    "PseudoLabelSet",
    "collect_pseudo_labels",
    "pseudo_dataset",
    "transfer_eval",
    "ShadowResult",
    "shadow_pipeline",
]

DEFAULT_PSEUDO_CONF = 0.25
_PSEUDO_VAL_FRACTION = 0.15


class BudgetExhaustedError(RuntimeError):
    """Raised when an operation needs more victim queries than remain."""


@dataclass
class QueryBudget:
    """A hard cap on victim queries, with exact consumption accounting."""

    max_queries: int
    used: int = 0

    def __post_init__(self) -> None:
        if self.max_queries < 0:
            raise ValueError(f"max_queries must be >= 0, got {self.max_queries}")
        if not 0 <= self.used <= self.max_queries:
            raise ValueError(f"used must lie in [0, {self.max_queries}], got {self.used}")

    @property
    def remaining(self) -> int:
        return self.max_queries - self.used

    @property
    def exhausted(self) -> bool:
        return self.used >= self.max_queries

    def consume(self, n: int = 1) -> None:
        if n < 0:
            raise ValueError(f"cannot consume {n} queries")
        if self.used + n > self.max_queries:
            raise BudgetExhaustedError(
                f"budget exceeded: {self.used} used + {n} requested > {self.max_queries}"
            )
        self.used += n


class QueryCountingVictim(DetectorAdapter):
    """Black-box view of a detector: counts queries, denies gradients.

    Every detect_raw call (per image) increments ``queries``.  Calls made
    in a gradient-enabled context on gradient-requiring input increment
    ``gradient_accesses`` — a nonzero value means some stage tried to
    treat the victim as white-box.  The inner model always runs under
    no_grad on detached input.
    """

    def __init__(self, inner: DetectorAdapter):
        self.inner = inner
        self.queries = 0
        self.gradient_accesses = 0

    @property
    def num_classes(self) -> int:
        return self.inner.num_classes

    @property
    def input_size(self) -> tuple[int, int]:
        return self.inner.input_size

    @property
    def differentiable(self) -> bool:
        return False

    @property
    def trainable(self) -> bool:
        return False

    @property
    def architecture_id(self) -> str | None:
        return getattr(self.inner, "architecture_id", None)

    def _note_access(self, x: torch.Tensor, n: int) -> None:
        if torch.is_grad_enabled() and x.requires_grad:
            self.gradient_accesses += 1
        self.queries += n

    def detect_raw(self, x: torch.Tensor) -> RawDetections:
        self._note_access(x, 1)
        with torch.no_grad():
            return self.inner.detect_raw(x.detach())

    def detect_raw_batch(self, xs: torch.Tensor) -> list[RawDetections]:
        self._note_access(xs, int(xs.shape[0]))
        with torch.no_grad():
            return self.inner.detect_raw_batch(xs.detach())

    def detect(
        self,
        x: torch.Tensor,
        conf_thresh: float | None = None,
        iou_thresh: float | None = None,
    ) -> list[Detection]:
        inner_cfg = getattr(self.inner, "cfg", None)
        if conf_thresh is None:
            conf_thresh = getattr(inner_cfg, "conf_thresh", 0.25)
        if iou_thresh is None:
            iou_thresh = getattr(inner_cfg, "nms_iou", 0.45)
        return decode_detections(self.detect_raw(x), conf_thresh, iou_thresh)

    def fingerprint(self) -> str:
        try:
            return self.inner.fingerprint()
        except NotImplementedError:
            return "unknown"


@dataclass
class PseudoLabelSet:
    """Victim predictions adopted as ground truth for shadow training."""

    labels: dict[str, list[Detection]]
    conf_thresh: float
    victim_id: str
    queries_used: int
    exhausted: bool = False

    def boxes(self, image_id: str) -> list[BoundingBox]:
        return [d.box for d in self.labels[image_id]]

    def save(self, root: str | Path) -> None:
        """Persist as annotation files plus a provenance manifest."""
        root = Path(root)
        lbl_dir = root / "labels"
        lbl_dir.mkdir(parents=True, exist_ok=True)
        confidences = {}
        for image_id in sorted(self.labels):
            dets = self.labels[image_id]
            write_label_file(lbl_dir / f"{image_id}.txt", [d.box for d in dets])
            confidences[image_id] = [round(d.confidence, 9) for d in dets]
        provenance = {
            "format_version": 1,
            "victim_id": self.victim_id,
            "conf_thresh": self.conf_thresh,
            "queries_used": self.queries_used,
            "exhausted": self.exhausted,
            "num_images": len(self.labels),
            "confidences": confidences,
        }
        (root / "provenance.json").write_text(
            json.dumps(provenance, indent=2, sort_keys=True) + "\n"
        )

    @staticmethod
    def load(root: str | Path) -> "PseudoLabelSet":
        root = Path(root)
        provenance = json.loads((root / "provenance.json").read_text())
        labels: dict[str, list[Detection]] = {}
        for image_id, confs in provenance["confidences"].items():
            boxes = parse_label_file(root / "labels" / f"{image_id}.txt")
            if len(boxes) != len(confs):
                raise ValueError(
                    f"{image_id}: {len(boxes)} boxes but {len(confs)} recorded confidences"
                )
            labels[image_id] = [Detection(box=b, confidence=c) for b, c in zip(boxes, confs)]
        return PseudoLabelSet(
            labels=labels,
            conf_thresh=provenance["conf_thresh"],
            victim_id=provenance["victim_id"],
            queries_used=provenance["queries_used"],
            exhausted=provenance["exhausted"],
        )


def collect_pseudo_labels(
    victim: DetectorAdapter,
    images: list[tuple[str, np.ndarray | torch.Tensor]],
    conf_thresh: float = DEFAULT_PSEUDO_CONF,
    budget: QueryBudget | None = None,
) -> PseudoLabelSet:
    """Query the victim once per image and keep its detections as labels.

    Args:
        victim: Detector queried through its public interface only.
        images: (image_id, image) pairs; uint8 arrays or float tensors.
        conf_thresh: Detection threshold for label adoption.
        budget: Query cap; collection stops early, flagging exhaustion,
            when it runs out mid-way.  Required.

    Raises:
        BudgetExhaustedError: If the budget is already spent on entry.
    """
    if budget is None:
        raise ValueError("a query budget is required for pseudo-label collection")
    if budget.exhausted:
        raise BudgetExhaustedError(
            f"query budget already exhausted ({budget.used}/{budget.max_queries})"
        )
    labels: dict[str, list[Detection]] = {}
    exhausted = False
    for image_id, image in images:
        if budget.exhausted:
            exhausted = True
            break
        x = image if isinstance(image, torch.Tensor) else image_to_tensor(image)
        with torch.no_grad():
            dets = victim.detect(x, conf_thresh)
        budget.consume(1)
        labels[image_id] = dets
    try:
        victim_id = victim.fingerprint()
    except NotImplementedError:
        victim_id = "unknown"
    return PseudoLabelSet(
        labels=labels,
        conf_thresh=conf_thresh,
        victim_id=victim_id,
        queries_used=len(labels),
        exhausted=exhausted,
    )


@dataclass
class _MemoryDataset:
    """In-memory train/val scene store with the Dataset loading interface."""

    scenes: dict[str, list[Scene]]

    def splits(self) -> list[str]:
        return sorted(self.scenes)

    def load_split(self, split: str) -> list[Scene]:
        if split not in self.scenes:
            raise KeyError(f"split '{split}' not found; available: {self.splits()}")
        return self.scenes[split]


def pseudo_dataset(
    pseudo: PseudoLabelSet,
    images: list[tuple[str, np.ndarray]],
    val_fraction: float = _PSEUDO_VAL_FRACTION,
) -> _MemoryDataset:
    """Pair pseudo-labels with their images and split train/val.

    Images the victim saw nothing in are kept as background-only scenes.
    The validation tail is the last ceil(fraction) of the labeled images,
    so the split is deterministic for a fixed collection order.
    """
    labeled = [(iid, img) for iid, img in images if iid in pseudo.labels]
    if not labeled:
        raise ValueError("no pseudo-labeled images to build a dataset from")
    scenes = [(img, pseudo.boxes(iid)) for iid, img in labeled]
    n_val = max(1, int(round(len(scenes) * val_fraction))) if len(scenes) > 1 else 0
    if n_val == 0:
        return _MemoryDataset(scenes={"train": scenes})
    return _MemoryDataset(scenes={"train": scenes[:-n_val], "val": scenes[-n_val:]})


def transfer_eval(
    patch: torch.Tensor,
    victim: DetectorAdapter,
    dataset,
    spec: AttackSpec,
    seed: int = 0,
    cfg: EvalConfig | None = None,
    split: str = "test",
    label: str = "transfer patch",
    surrogate_fingerprint: str | None = None,
) -> Report:
    """Score a surrogate-trained patch against a different victim model.

    Produces the full report (clean and noise baselines, per-class CM,
    top-3 breakdown row).  An empty dataset yields an empty report.

    Args:
        surrogate_fingerprint: Optional fingerprint of the model the patch
            was trained on; rejected if it matches the victim.
    """
    if surrogate_fingerprint is not None:
        try:
            if surrogate_fingerprint == victim.fingerprint():
                raise ValueError(
                    "patch was trained on this victim; transfer evaluation "
                    "requires a different surrogate"
                )
        except NotImplementedError:
            pass
    available = dataset.splits() if hasattr(dataset, "splits") else []
    if split not in available:
        fallback = next((s for s in ("test", "val") if s in available), None)
        if fallback is None:
            return Report(rows=[], notes=[f"dataset has no '{split}' split to evaluate"])
        split = fallback
    scenes = dataset.load_split(split)
    if not scenes:
        return Report(rows=[], notes=[f"split '{split}' is empty"])
    ids = dataset.image_ids(split) if hasattr(dataset, "image_ids") else None
    return attack_report(
        victim, scenes, patch, spec, seed=seed, cfg=cfg, label=label, image_ids=ids
    )


@dataclass
class ShadowResult:
    """Everything the shadow pipeline produced."""

    shadow: DetectorAdapter
    patch: torch.Tensor
    report: Report
    pseudo: PseudoLabelSet
    history: TrainHistory
    victim_queries: int
    gradient_accesses: int


def shadow_pipeline(
    victim: DetectorAdapter,
    shadow_cfg: ToyDetectorConfig,
    dataset,
    attack_spec: AttackSpec,
    patch_cfg: TrainConfig,
    budget: QueryBudget,
    shadow_train_cfg: ToyTrainConfig | None = None,
    conf_thresh: float = DEFAULT_PSEUDO_CONF,
    seed: int = 0,
    eval_split: str = "test",
    eval_cfg: EvalConfig | None = None,
    h_ref: Histogram | None = None,
) -> ShadowResult:
    """Model-extraction attack: steal labels, train a shadow, attack through it.

    Stages: (1) query the victim on the dataset's train images within the
    budget and adopt its detections as ground truth; (2) train a shadow
    detector — its architecture must differ from the victim's — on the
    pseudo-labels; (3) optimize a patch white-box against the shadow,
    never touching victim gradients; (4) evaluate that patch on the victim
    with baselines.  A zero budget aborts before shadow training.

    Args:
        dataset: Supplies the unlabeled query pool (train split; labels
            ignored) and the labeled evaluation split.
        h_ref: Reference histogram when the attack uses the color loss;
            pseudo-label datasets carry no class statistics of their own.
    """
    victim_arch = getattr(victim, "architecture_id", None)
    if victim_arch is not None and victim_arch == shadow_cfg.architecture_id:
        raise ValueError(
            f"shadow architecture must differ from the victim's ({victim_arch})"
        )
    bb = victim if isinstance(victim, QueryCountingVictim) else QueryCountingVictim(victim)
    pool_scenes = dataset.load_split("train")
    pool_ids = (
        dataset.image_ids("train")
        if hasattr(dataset, "image_ids")
        else [f"img_{i:05d}" for i in range(len(pool_scenes))]
    )
    pool = [(iid, image) for iid, (image, _boxes) in zip(pool_ids, pool_scenes)]
    pseudo = collect_pseudo_labels(bb, pool, conf_thresh, budget)
    shadow_ds = pseudo_dataset(pseudo, pool)
    shadow, _meta = train_toy_detector(
        shadow_ds, shadow_cfg, shadow_train_cfg or ToyTrainConfig(seed=seed)
    )
    patch, history = train_patch(shadow, shadow_ds, attack_spec, patch_cfg, h_ref=h_ref)
    report = transfer_eval(
        patch, bb, dataset, attack_spec, seed=seed, cfg=eval_cfg,
        split=eval_split, label="shadow patch",
    )
    return ShadowResult(
        shadow=shadow,
        patch=patch,
        report=report,
        pseudo=pseudo,
        history=history,
        victim_queries=bb.queries,
        gradient_accesses=bb.gradient_accesses,
    )
