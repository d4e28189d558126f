"""Detector-adapter contract, reference NMS, and a trainable toy detector.

Every attack in this package runs against the :class:`DetectorAdapter`
interface: ``detect_raw`` exposes all pre-NMS grid predictions (scores in
[0, 1], gradients intact), and ``detect`` is exactly score-thresholding
plus NMS on top of it.  The built-in toy detector is a single-scale
anchor-free grid head over a small conv backbone — one box per cell,
sigmoid box offsets and objectness, softmax classes — enough structure to
carry every attack objective while training in minutes on a CPU.
"""

from __future__ import annotations

import abc
import hashlib
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import BoundingBox, Detection, RawDetections, iou

__all__ = [
    "DetectorAdapter",
    "ToyDetectorConfig",
    "ToyTrainConfig",
    "ToyAdapter",
    "nms",
    "decode_detections",
    "train_toy_detector",
    "save_checkpoint",
    "load_checkpoint",
    "DEFAULT_CONF_THRESH",
    "DEFAULT_NMS_IOU",
]

DEFAULT_CONF_THRESH = 0.25
DEFAULT_NMS_IOU = 0.45


class DetectorAdapter(abc.ABC):
    """Interface every victim/surrogate detector implements."""

    @property
    @abc.abstractmethod
    def num_classes(self) -> int: ...

    @property
    @abc.abstractmethod
    def input_size(self) -> tuple[int, int]:
        """Expected (H, W) of input images."""

    @property
    @abc.abstractmethod
    def differentiable(self) -> bool:
        """Whether gradients flow from detect_raw outputs back to the input."""

    @property
    @abc.abstractmethod
    def trainable(self) -> bool: ...

    @abc.abstractmethod
    def detect_raw(self, x: torch.Tensor) -> RawDetections:
        """All pre-NMS predictions for one (3, H, W) image."""

    def detect_raw_batch(self, xs: torch.Tensor) -> list[RawDetections]:
        """Batched detect_raw; the default just loops."""
        return [self.detect_raw(x) for x in xs]

    def detect(
        self,
        x: torch.Tensor,
        conf_thresh: float = DEFAULT_CONF_THRESH,
        iou_thresh: float = DEFAULT_NMS_IOU,
    ) -> list[Detection]:
        """Thresholded, NMS-suppressed detections — exactly decode(detect_raw)."""
        return decode_detections(self.detect_raw(x), conf_thresh, iou_thresh)

    def fingerprint(self) -> str:
        """Stable identifier of architecture + weights, for provenance."""
        raise NotImplementedError


def nms(dets: list[Detection], iou_thresh: float = DEFAULT_NMS_IOU) -> list[Detection]:
    """Greedy per-class non-maximum suppression.

    Repeatedly keeps the highest-confidence box and discards same-class
    boxes overlapping it with IoU strictly above ``iou_thresh``.  Output is
    sorted by confidence descending; detection objects are reused, never
    mutated.
    """
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError(f"iou_thresh must be in (0, 1), got {iou_thresh}")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    kept: list[Detection] = []
    suppressed = [False] * len(dets)
    for oi, i in enumerate(order):
        if suppressed[oi]:
            continue
        kept.append(dets[i])
        for oj in range(oi + 1, len(order)):
            j = order[oj]
            if suppressed[oj] or dets[j].box.class_id != dets[i].box.class_id:
                continue
            if iou(dets[i].box, dets[j].box) > iou_thresh:
                suppressed[oj] = True
    return kept


def decode_detections(
    raw: RawDetections,
    conf_thresh: float = DEFAULT_CONF_THRESH,
    iou_thresh: float = DEFAULT_NMS_IOU,
) -> list[Detection]:
    """Score-threshold raw predictions and suppress duplicates.

    A prediction scores y_obj * max(y_cls) and is classified by argmax.
    """
    if not 0.0 < conf_thresh <= 1.0:
        raise ValueError(f"conf_thresh must be in (0, 1], got {conf_thresh}")
    obj = raw.obj.detach().cpu().numpy().astype(np.float64)
    cls = raw.cls.detach().cpu().numpy().astype(np.float64)
    scores = obj * cls.max(axis=1)
    labels = cls.argmax(axis=1)
    dets = [
        Detection(raw.box(i).with_class(int(labels[i])), float(scores[i]))
        for i in np.nonzero(scores >= conf_thresh)[0]
    ]
    return nms(dets, iou_thresh)


# ---------------------------------------------------------------------------
# toy detector


@dataclass(frozen=True)
class ToyDetectorConfig:
    """Architecture and inference settings for the toy grid detector.

    The backbone is one stride-2 conv block per entry of ``widths``; the
    grid is therefore image_size / 2**len(widths) cells per side, with
    5 + num_classes channels per cell.
    """

    num_classes: int = 8
    image_size: int = 256
    widths: tuple[int, ...] = (8, 16, 32, 48, 64, 80)
    conf_thresh: float = DEFAULT_CONF_THRESH
    nms_iou: float = DEFAULT_NMS_IOU

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if not self.widths:
            raise ValueError("backbone needs at least one conv block")
        if self.image_size % (2 ** len(self.widths)) != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by stride {2 ** len(self.widths)}"
            )
        if self.grid_size < 4:
            raise ValueError(f"grid size {self.grid_size} below minimum 4")
        if not 0.0 < self.conf_thresh < 1.0:
            raise ValueError(f"conf_thresh must be in (0, 1), got {self.conf_thresh}")

    @property
    def grid_size(self) -> int:
        return self.image_size // (2 ** len(self.widths))

    @property
    def architecture_id(self) -> str:
        widths = "-".join(str(w) for w in self.widths)
        return f"toy_g{self.grid_size}_w{widths}_c{self.num_classes}"


class _ToyNet(nn.Module):
    """Conv backbone plus 1x1 head emitting (5 + C) maps per grid cell."""

    def __init__(self, cfg: ToyDetectorConfig):
        super().__init__()
        layers: list[nn.Module] = []
        prev = 3
        for width in cfg.widths:
            layers += [
                nn.Conv2d(prev, width, 3, stride=2, padding=1),
                nn.BatchNorm2d(width),
                nn.ReLU(inplace=True),
            ]
            prev = width
        self.backbone = nn.Sequential(*layers)
        self.head = nn.Conv2d(prev, 5 + cfg.num_classes, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.backbone(x))


def _decode_grid(out: torch.Tensor, num_classes: int) -> list[RawDetections]:
    """Turn (B, 5+C, S, S) head maps into per-image raw detections.

    Box centers are cell-relative sigmoids, extents are plain sigmoids
    (normalized to the image), objectness is a sigmoid, classes a softmax.
    Predictions are flattened row-major over the grid.
    """
    batch, _, s, _ = out.shape
    device, dtype = out.device, out.dtype
    jj = torch.arange(s, dtype=dtype, device=device).view(1, 1, s)
    ii = torch.arange(s, dtype=dtype, device=device).view(1, s, 1)
    tx, ty, tw, th = out[:, 0], out[:, 1], out[:, 2], out[:, 3]
    cx = (jj + torch.sigmoid(tx)) / s
    cy = (ii + torch.sigmoid(ty)) / s
    w = torch.sigmoid(tw)
    h = torch.sigmoid(th)
    obj = torch.sigmoid(out[:, 4])
    cls = torch.softmax(out[:, 5:], dim=1)
    boxes = torch.stack((cx, cy, w, h), dim=-1).reshape(batch, s * s, 4)
    obj = obj.reshape(batch, s * s)
    cls = cls.permute(0, 2, 3, 1).reshape(batch, s * s, num_classes)
    return [RawDetections(boxes=boxes[b], obj=obj[b], cls=cls[b]) for b in range(batch)]


class ToyAdapter(DetectorAdapter):
    """Adapter wrapping a trained toy detector network."""

    def __init__(self, net: _ToyNet, cfg: ToyDetectorConfig):
        self.net = net.eval()
        self.cfg = cfg

    @property
    def num_classes(self) -> int:
        return self.cfg.num_classes

    @property
    def input_size(self) -> tuple[int, int]:
        return (self.cfg.image_size, self.cfg.image_size)

    @property
    def differentiable(self) -> bool:
        return True

    @property
    def trainable(self) -> bool:
        return True

    @property
    def architecture_id(self) -> str:
        return self.cfg.architecture_id

    def _check_input(self, x: torch.Tensor, batched: bool) -> None:
        expected = (3, self.cfg.image_size, self.cfg.image_size)
        shape = tuple(x.shape[1:]) if batched else tuple(x.shape)
        if shape != expected or x.ndim != (4 if batched else 3):
            raise ValueError(f"expected input of shape {expected}, got {tuple(x.shape)}")
        if not x.is_floating_point():
            raise ValueError(f"expected float input, got {x.dtype}")

    def detect_raw(self, x: torch.Tensor) -> RawDetections:
        self._check_input(x, batched=False)
        out = self.net(x.unsqueeze(0))
        return _decode_grid(out, self.cfg.num_classes)[0]

    def detect_raw_batch(self, xs: torch.Tensor) -> list[RawDetections]:
        self._check_input(xs, batched=True)
        out = self.net(xs)
        return _decode_grid(out, self.cfg.num_classes)

    def detect(
        self,
        x: torch.Tensor,
        conf_thresh: float | None = None,
        iou_thresh: float | None = None,
    ) -> list[Detection]:
        conf = self.cfg.conf_thresh if conf_thresh is None else conf_thresh
        nms_iou = self.cfg.nms_iou if iou_thresh is None else iou_thresh
        return decode_detections(self.detect_raw(x), conf, nms_iou)

    def fingerprint(self) -> str:
        digest = hashlib.sha256(self.cfg.architecture_id.encode())
        for key in sorted(self.net.state_dict()):
            tensor = self.net.state_dict()[key]
            digest.update(key.encode())
            digest.update(tensor.detach().cpu().numpy().tobytes())
        return digest.hexdigest()[:16]


# ---------------------------------------------------------------------------
# toy detector training


@dataclass(frozen=True)
class ToyTrainConfig:
    """Training hyperparameters and augmentation switches for the toy detector."""

    epochs: int = 24
    lr: float = 1e-3
    batch_size: int = 8
    lambda_box: float = 5.0
    lambda_noobj: float = 0.5
    label_smoothing: float = 0.1
    augment_flip: bool = True
    augment_brightness: bool = True
    augment_occlusion: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError(
                f"label_smoothing must lie in [0, 1), got {self.label_smoothing}"
            )


Scene = tuple[np.ndarray, list[BoundingBox]]  # (uint8 (3,H,W) image, gt boxes)


def _build_targets(
    boxes_per_image: list[list[BoundingBox]], s: int, num_classes: int
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Grid targets: (B,S,S) positive mask, (B,4,S,S) box targets, (B,S,S) classes."""
    batch = len(boxes_per_image)
    pos = torch.zeros(batch, s, s, dtype=torch.bool)
    tbox = torch.zeros(batch, 4, s, s)
    tcls = torch.zeros(batch, s, s, dtype=torch.long)
    for b, boxes in enumerate(boxes_per_image):
        for box in boxes:
            j = min(int(box.cx * s), s - 1)
            i = min(int(box.cy * s), s - 1)
            pos[b, i, j] = True
            tbox[b, 0, i, j] = box.cx * s - j
            tbox[b, 1, i, j] = box.cy * s - i
            tbox[b, 2, i, j] = box.w
            tbox[b, 3, i, j] = box.h
            tcls[b, i, j] = box.class_id or 0
    return pos, tbox, tcls


def _augment(
    img: np.ndarray, boxes: list[BoundingBox], cfg: ToyTrainConfig, rng: np.random.Generator
) -> tuple[np.ndarray, list[BoundingBox]]:
    """Flip / brightness / coarse-dropout augmentation on a uint8 image."""
    if cfg.augment_flip and rng.uniform() < 0.5:
        img = img[:, :, ::-1].copy()
        boxes = [BoundingBox(1.0 - b.cx, b.cy, b.w, b.h, b.class_id) for b in boxes]
    if cfg.augment_brightness:
        factor = rng.uniform(0.8, 1.2)
        img = np.clip(img.astype(np.float32) * factor, 0, 255).astype(np.uint8)
    if cfg.augment_occlusion and rng.uniform() < 0.5:
        h, w = img.shape[1:]
        for _ in range(int(rng.integers(1, 3))):
            side = int(rng.integers(16, 49))
            top = int(rng.integers(0, max(h - side, 1)))
            left = int(rng.integers(0, max(w - side, 1)))
            img = img.copy()
            img[:, top : top + side, left : left + side] = 128
    return img, boxes


def _training_loss(
    out: torch.Tensor,
    pos: torch.Tensor,
    tbox: torch.Tensor,
    tcls: torch.Tensor,
    cfg: ToyTrainConfig,
) -> torch.Tensor:
    obj_logit = out[:, 4]
    # Smoothed objectness targets keep the trained logits at moderate
    # magnitude instead of saturating the sigmoid; detection thresholds are
    # unaffected but the score surface stays differentiable in practice.
    smooth = cfg.label_smoothing
    obj_target = pos.to(out.dtype) * (1.0 - smooth) + smooth / 2.0
    bce = F.binary_cross_entropy_with_logits(obj_logit, obj_target, reduction="none")
    neg = ~pos
    loss = cfg.lambda_noobj * bce[neg].mean() if neg.any() else out.sum() * 0
    if pos.any():
        loss = loss + bce[pos].mean()
        pred_box = torch.sigmoid(out[:, 0:4])
        box_err = (pred_box - tbox) ** 2
        loss = loss + cfg.lambda_box * box_err.permute(0, 2, 3, 1)[pos].mean()
        cls_logits = out[:, 5:].permute(0, 2, 3, 1)[pos]
        loss = loss + F.cross_entropy(cls_logits, tcls[pos], label_smoothing=smooth)
    return loss


def train_toy_detector(
    dataset,
    cfg: ToyDetectorConfig = ToyDetectorConfig(),
    train_cfg: ToyTrainConfig = ToyTrainConfig(),
) -> tuple[ToyAdapter, dict]:
    """Train the toy detector on a dataset with train/val splits.

    Args:
        dataset: Object exposing ``load_split(name) -> list[Scene]`` with
            at least a "train" split; "val" is used for the final mAP@0.5
            check when present.
        cfg: Architecture/inference config.
        train_cfg: Optimization and augmentation settings.

    Returns:
        (adapter, metrics): metrics holds val_map50, train_seconds, epochs.

    Raises:
        ValueError: Empty training split.
        RuntimeError: Loss turned non-finite (divergence).
    """
    train_scenes: list[Scene] = dataset.load_split("train")
    if not train_scenes:
        raise ValueError("training split is empty")
    try:
        val_scenes: list[Scene] = dataset.load_split("val")
    except (KeyError, FileNotFoundError):
        val_scenes = []

    start = time.time()
    torch.manual_seed(train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    net = _ToyNet(cfg)
    net.train()
    opt = torch.optim.Adam(net.parameters(), lr=train_cfg.lr)
    s = cfg.grid_size

    n = len(train_scenes)
    for epoch in range(train_cfg.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, train_cfg.batch_size):
            batch_idx = order[lo : lo + train_cfg.batch_size]
            imgs, boxes_list = [], []
            for k in batch_idx:
                img, boxes = _augment(train_scenes[k][0], train_scenes[k][1], train_cfg, rng)
                imgs.append(torch.from_numpy(img.astype(np.float32) / 255.0))
                boxes_list.append(boxes)
            xs = torch.stack(imgs)
            pos, tbox, tcls = _build_targets(boxes_list, s, cfg.num_classes)
            out = net(xs)
            loss = _training_loss(out, pos, tbox, tcls, train_cfg)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"training diverged: non-finite loss at epoch {epoch + 1}, "
                    f"batch offset {lo}, lr {train_cfg.lr}, seed {train_cfg.seed}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()

    adapter = ToyAdapter(net, cfg)
    metrics: dict = {
        "train_seconds": time.time() - start,
        "epochs": train_cfg.epochs,
        "val_map50": None,
    }
    if val_scenes:
        from .metrics import map_mar

        gts, dets = [], []
        with torch.no_grad():
            for img, boxes in val_scenes:
                x = torch.from_numpy(img.astype(np.float32) / 255.0)
                gts.append(boxes)
                dets.append(adapter.detect(x))
        result = map_mar(gts, dets, iou_thresholds=(0.5,))
        metrics["val_map50"] = result.map
    return adapter, metrics


def save_checkpoint(adapter: ToyAdapter, path, meta: dict | None = None) -> None:
    """Persist a toy detector as a versioned binary container."""
    payload = {
        "format_version": 1,
        "config": asdict(adapter.cfg),
        "state_dict": adapter.net.state_dict(),
        "meta": meta or {},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[ToyAdapter, dict]:
    """Load a toy detector checkpoint saved by :func:`save_checkpoint`."""
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format_version") != 1:
        raise ValueError(f"unsupported checkpoint version in {path}")
    cfg_dict = dict(payload["config"])
    cfg_dict["widths"] = tuple(cfg_dict["widths"])
    cfg = ToyDetectorConfig(**cfg_dict)
    net = _ToyNet(cfg)
    net.load_state_dict(payload["state_dict"])
    return ToyAdapter(net, cfg), payload.get("meta", {})
