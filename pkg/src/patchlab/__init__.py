"""patchlab: adversarial patch attacks against object detectors.

Generates and evaluates three families of localized patches — hiding
(suppress a detection), creating (spawn a detection of a chosen class),
and altering (flip a detection's class) — with physical-robustness
transforms, composite losses including a color-histogram similarity term,
confusion-matrix and box metrics, and black-box transfer/shadow attack
pipelines.  A built-in trainable toy detector and synthetic dataset make
every pipeline runnable end to end on a CPU.
"""

from .core import (
    AdvMode,
    AttackSpec,
    AttackType,
    BoundingBox,
    Detection,
    InitMode,
    LossWeights,
    RawDetections,
    iou,
)
from .geometry import (
    AffineParams,
    CreatingPlacement,
    MaskSpec,
    PlacementInfeasibleError,
    rasterize_mask,
    sample_creating_placement,
    sample_object_placement,
)
from .render import PhysParams, PhysRanges, compose, transform_patch, warp_patch
from .losses import Histogram, PrintPalette, loss_hist, loss_nps, loss_tv
from .detector import (
    DetectorAdapter,
    ToyAdapter,
    ToyDetectorConfig,
    ToyTrainConfig,
    load_checkpoint,
    nms,
    save_checkpoint,
    train_toy_detector,
)
from .metrics import EvalCase, MapResult, Report, ReportRow, ciou, map_mar
from .data import Dataset, load_dataset, load_patch, save_patch, synth_dataset
from .evaluate import EvalConfig, attack_report, evaluate_attack
from .optimize import TrainConfig, TrainHistory, compute_convergence, init_patch, train_patch
from .colorsim import SimilarityRecord, correlate_success, extract_histogram, similarity
from .blackbox import (
    PseudoLabelSet,
    QueryBudget,
    QueryCountingVictim,
    collect_pseudo_labels,
    shadow_pipeline,
    transfer_eval,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    # core
    "AttackType", "AdvMode", "InitMode", "BoundingBox", "Detection",
    "RawDetections", "LossWeights", "AttackSpec", "iou",
    # geometry
    "AffineParams", "CreatingPlacement", "MaskSpec", "PlacementInfeasibleError",
    "sample_object_placement", "sample_creating_placement", "rasterize_mask",
    # render
    "PhysRanges", "PhysParams", "transform_patch", "warp_patch", "compose",
    # losses
    "PrintPalette", "Histogram", "loss_tv", "loss_nps", "loss_hist",
    # detector
    "DetectorAdapter", "ToyAdapter", "ToyDetectorConfig", "ToyTrainConfig",
    "train_toy_detector", "save_checkpoint", "load_checkpoint", "nms",
    # metrics
    "EvalCase", "MapResult", "Report", "ReportRow", "ciou", "map_mar",
    # data
    "Dataset", "synth_dataset", "load_dataset", "save_patch", "load_patch",
    # evaluate / optimize
    "EvalConfig", "evaluate_attack", "attack_report",
    "TrainConfig", "TrainHistory", "init_patch", "train_patch", "compute_convergence",
    # colorsim
    "SimilarityRecord", "extract_histogram", "similarity", "correlate_success",
    # blackbox
    "QueryBudget", "QueryCountingVictim", "PseudoLabelSet",
    "collect_pseudo_labels", "transfer_eval", "shadow_pipeline",
]
