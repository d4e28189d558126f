"""Dataset generation, loading, and on-disk artifact formats.

The synthetic dataset renders colored geometric shapes on a textured gray
background.  Each class has a fixed color and shape identity so detectors
can learn strong color priors, mirroring packaged-product imagery.  Layout:

    root/manifest.json
    root/<split>/images/<stem>.png
    root/<split>/labels/<stem>.txt      one "class cx cy w h" line per object

Patches are stored as a raw ``.npy`` array plus a JSON sidecar carrying a
sha256 of the array file and arbitrary training metadata.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .core import BoundingBox

__all__ = [
    "CLASS_STYLES",
    "Dataset",
    "Scene",
    "synth_dataset",
    "load_dataset",
    "parse_label_file",
    "write_label_file",
    "load_image",
    "save_image",
    "image_to_tensor",
    "tensor_to_image",
    "save_patch",
    "load_patch",
]

Scene = tuple[np.ndarray, list[BoundingBox]]

MANIFEST_NAME = "manifest.json"
DEFAULT_SPLIT_COUNTS = {"train": 800, "val": 100, "test": 100}

# class identity: (name, RGB color 0-255, shape)
CLASS_STYLES: tuple[tuple[str, tuple[int, int, int], str], ...] = (
    ("crimson_box", (200, 40, 40), "square"),
    ("lime_can", (60, 180, 60), "circle"),
    ("azure_pack", (50, 90, 200), "square"),
    ("amber_bottle", (230, 160, 30), "triangle"),
    ("violet_jar", (140, 60, 180), "circle"),
    ("teal_carton", (30, 160, 160), "diamond"),
    ("rose_tube", (230, 110, 150), "triangle"),
    ("slate_tin", (90, 100, 110), "diamond"),
)

# Object side as a fraction of the image side.  Close-up framing: each
# object fills a large part of the canvas, so a patch sized relative to the
# object still spans at least one detector cell when rendered.
_MIN_SHAPE_FRAC = 0.375
_MAX_SHAPE_FRAC = 0.65
_PLACEMENT_TRIES = 40
_PLACEMENT_GAP_PX = 6


def _shape_mask(shape: str, w: float, h: float, size: int, cx: float, cy: float) -> np.ndarray:
    """Boolean (size, size) mask of a shape centered at pixel (cx, cy)."""
    ys, xs = np.mgrid[0:size, 0:size]
    dx = xs + 0.5 - cx
    dy = ys + 0.5 - cy
    if shape == "square":
        return (np.abs(dx) <= w / 2) & (np.abs(dy) <= h / 2)
    if shape == "circle":
        r = min(w, h) / 2
        return dx**2 + dy**2 <= r**2
    if shape == "triangle":
        # upward triangle spanning the full w x h bounding box
        inside_y = (dy >= -h / 2) & (dy <= h / 2)
        frac = (dy + h / 2) / h  # 0 at apex, 1 at base
        return inside_y & (np.abs(dx) <= frac * w / 2)
    if shape == "diamond":
        return np.abs(dx) / (w / 2) + np.abs(dy) / (h / 2) <= 1.0
    raise ValueError(f"unknown shape '{shape}'")


def _render_image(
    rng: np.random.Generator, size: int, num_classes: int
) -> tuple[np.ndarray, list[BoundingBox], list[dict]]:
    """Render one scene; returns (uint8 image (3,H,W), boxes, object stats)."""
    base = np.array([0.55, 0.53, 0.50])[:, None, None] * np.ones((3, size, size))
    coarse = rng.uniform(-0.05, 0.05, (size // 32, size // 32))
    base += np.kron(coarse, np.ones((32, 32)))[None]
    base += rng.uniform(-0.02, 0.02, (size, size))[None]

    n_objects = int(rng.integers(1, 5))
    placed: list[tuple[float, float, float, float]] = []
    boxes: list[BoundingBox] = []
    stats: list[dict] = []
    for _ in range(n_objects):
        cls_id = int(rng.integers(0, num_classes))
        _, color, shape = CLASS_STYLES[cls_id]
        # keep shapes placeable inside small images
        min_px = _MIN_SHAPE_FRAC * size
        max_px = min(_MAX_SHAPE_FRAC * size, size - 8)
        if shape == "circle":
            w = h = float(rng.uniform(min_px, max_px))
        else:
            w = float(rng.uniform(min_px, max_px))
            h = float(rng.uniform(min_px, max_px))
        spot = None
        for _try in range(_PLACEMENT_TRIES):
            cx = float(rng.uniform(w / 2 + 2, size - w / 2 - 2))
            cy = float(rng.uniform(h / 2 + 2, size - h / 2 - 2))
            x1, y1 = cx - w / 2 - _PLACEMENT_GAP_PX, cy - h / 2 - _PLACEMENT_GAP_PX
            x2, y2 = cx + w / 2 + _PLACEMENT_GAP_PX, cy + h / 2 + _PLACEMENT_GAP_PX
            clash = any(x1 < px2 and px1 < x2 and y1 < py2 and py1 < y2 for px1, py1, px2, py2 in placed)
            if not clash:
                spot = (cx, cy)
                break
        if spot is None:
            continue
        cx, cy = spot
        placed.append((cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2))
        gain = float(rng.uniform(0.9, 1.1))
        mask = _shape_mask(shape, w, h, size, cx, cy)
        col = np.clip(np.array(color, dtype=np.float64) / 255.0 * gain, 0.0, 1.0)
        for ch in range(3):
            base[ch][mask] = col[ch]
        boxes.append(
            BoundingBox(cx=cx / size, cy=cy / size, w=w / size, h=h / size, class_id=cls_id)
        )
        stats.append(
            {
                "class_id": cls_id,
                "mean_rgb": [float(c) for c in col],
                "pixel_count": int(mask.sum()),
                "area_px": float(w * h),
            }
        )
    base += rng.uniform(-0.02, 0.02, (3, size, size))
    img = np.clip(np.round(base * 255.0), 0, 255).astype(np.uint8)
    return img, boxes, stats


def synth_dataset(
    root: str | Path,
    counts: dict[str, int] | None = None,
    image_size: int = 256,
    num_classes: int = 8,
    seed: int = 0,
) -> "Dataset":
    """Generate a deterministic synthetic detection dataset under ``root``.

    Args:
        root: Output directory (created if missing).
        counts: Images per split, defaults to train=800/val=100/test=100.
        image_size: Square image side in pixels.
        num_classes: Number of object classes (at most len(CLASS_STYLES)).
        seed: Seed controlling every sampled quantity; the same seed
            reproduces byte-identical files.

    Returns:
        The loaded Dataset for the generated root.
    """
    if num_classes < 2 or num_classes > len(CLASS_STYLES):
        raise ValueError(f"num_classes must be in [2, {len(CLASS_STYLES)}], got {num_classes}")
    if image_size % 32 != 0 or image_size < 64:
        raise ValueError(f"image_size must be a multiple of 32 and >= 64, got {image_size}")
    counts = dict(DEFAULT_SPLIT_COUNTS) if counts is None else dict(counts)
    for split, n in counts.items():
        if n < 1:
            raise ValueError(f"split '{split}' needs at least 1 image, got {n}")
    root = Path(root)
    rng = np.random.default_rng(seed)
    class_sums = np.zeros((num_classes, 3))
    class_pixels = np.zeros(num_classes)
    class_instances = np.zeros(num_classes, dtype=int)
    references: dict[int, dict] = {}
    for split in sorted(counts):
        img_dir = root / split / "images"
        lbl_dir = root / split / "labels"
        img_dir.mkdir(parents=True, exist_ok=True)
        lbl_dir.mkdir(parents=True, exist_ok=True)
        for idx in range(counts[split]):
            stem = f"{split}_{idx:05d}"
            img, boxes, stats = _render_image(rng, image_size, num_classes)
            Image.fromarray(np.transpose(img, (1, 2, 0))).save(img_dir / f"{stem}.png")
            write_label_file(lbl_dir / f"{stem}.txt", boxes)
            for obj_i, (box, st) in enumerate(zip(boxes, stats)):
                c = st["class_id"]
                class_sums[c] += np.array(st["mean_rgb"]) * st["pixel_count"]
                class_pixels[c] += st["pixel_count"]
                class_instances[c] += 1
                ref = references.get(c)
                if ref is None or st["area_px"] > ref["area_px"]:
                    references[c] = {
                        "split": split,
                        "image": stem,
                        "object_index": obj_i,
                        "box": [box.cx, box.cy, box.w, box.h],
                        "area_px": st["area_px"],
                    }
    class_stats = {}
    for c in range(num_classes):
        if class_pixels[c] == 0:
            continue
        ref = {k: v for k, v in references[c].items() if k != "area_px"}
        class_stats[str(c)] = {
            "mean_rgb": [float(v) for v in class_sums[c] / class_pixels[c]],
            "instances": int(class_instances[c]),
            "reference": ref,
        }
    manifest = {
        "format_version": 1,
        "num_classes": num_classes,
        "image_size": image_size,
        "seed": seed,
        "counts": {k: int(v) for k, v in sorted(counts.items())},
        "class_styles": [
            {"name": n, "color": list(col), "shape": s}
            for n, col, s in CLASS_STYLES[:num_classes]
        ],
        "class_stats": class_stats,
    }
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return load_dataset(root)


def parse_label_file(path: str | Path) -> list[BoundingBox]:
    """Parse one label file; raises ValueError with file:line context."""
    path = Path(path)
    boxes: list[BoundingBox] = []
    for ln, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ValueError(f"{path}:{ln}: expected 5 fields 'class cx cy w h', got {len(parts)}")
        try:
            cls_id = int(parts[0])
            cx, cy, w, h = (float(p) for p in parts[1:])
        except ValueError as exc:
            raise ValueError(f"{path}:{ln}: {exc}") from exc
        if cls_id < 0:
            raise ValueError(f"{path}:{ln}: class id must be >= 0, got {cls_id}")
        try:
            boxes.append(BoundingBox(cx=cx, cy=cy, w=w, h=h, class_id=cls_id))
        except ValueError as exc:
            raise ValueError(f"{path}:{ln}: {exc}") from exc
    return boxes


def write_label_file(path: str | Path, boxes: list[BoundingBox]) -> None:
    """Write boxes as "class cx cy w h" lines with 6-decimal coordinates."""
    lines = [
        f"{box.class_id or 0} {box.cx:.6f} {box.cy:.6f} {box.w:.6f} {box.h:.6f}"
        for box in boxes
    ]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_image(path: str | Path) -> np.ndarray:
    """Load an image file as uint8 (3, H, W)."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return np.transpose(arr, (2, 0, 1))


def save_image(path: str | Path, image: np.ndarray | torch.Tensor) -> None:
    """Save a (3, H, W) uint8 array or [0,1] float tensor as PNG."""
    if isinstance(image, torch.Tensor):
        image = tensor_to_image(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected uint8 (3, H, W) image, got {image.dtype} {image.shape}")
    Image.fromarray(np.transpose(image, (1, 2, 0))).save(path)


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """uint8 (3, H, W) -> float32 tensor in [0, 1]."""
    if image.dtype != np.uint8:
        raise ValueError(f"expected uint8 image, got {image.dtype}")
    return torch.from_numpy(image.astype(np.float32) / 255.0)


def tensor_to_image(x: torch.Tensor) -> np.ndarray:
    """[0,1] float tensor (3, H, W) -> uint8 array, rounding half up."""
    arr = x.detach().cpu().clamp(0.0, 1.0).numpy()
    return np.floor(arr * 255.0 + 0.5).clip(0, 255).astype(np.uint8)


@dataclass
class Dataset:
    """A directory-backed detection dataset with optional manifest."""

    root: Path
    manifest: dict | None = None
    _splits: dict[str, list[tuple[Path, Path]]] = field(default_factory=dict, repr=False)
    _cache: dict[str, list[Scene]] = field(default_factory=dict, repr=False)

    @property
    def num_classes(self) -> int:
        if self.manifest is not None:
            return int(self.manifest["num_classes"])
        top = -1
        for split in self._splits:
            for _, boxes in self.load_split(split):
                for b in boxes:
                    top = max(top, b.class_id or 0)
        if top < 0:
            raise ValueError(f"dataset at {self.root} has no labeled objects")
        return top + 1

    @property
    def image_size(self) -> int:
        if self.manifest is not None:
            return int(self.manifest["image_size"])
        split = next(iter(self._splits))
        return int(self.load_split(split)[0][0].shape[-1])

    def splits(self) -> list[str]:
        return sorted(self._splits)

    def num_images(self, split: str) -> int:
        return len(self._entries(split))

    def _entries(self, split: str) -> list[tuple[Path, Path]]:
        if split not in self._splits:
            raise KeyError(f"split '{split}' not found; available: {self.splits()}")
        return self._splits[split]

    def load_split(self, split: str) -> list[Scene]:
        """Load every scene of a split as (uint8 image, boxes) pairs."""
        if split in self._cache:
            return self._cache[split]
        scenes: list[Scene] = []
        for img_path, lbl_path in self._entries(split):
            image = load_image(img_path)
            if lbl_path.exists():
                boxes = parse_label_file(lbl_path)
            else:
                warnings.warn(f"missing label file {lbl_path}; assuming no objects")
                boxes = []
            scenes.append((image, boxes))
        self._cache[split] = scenes
        return scenes

    def image_ids(self, split: str) -> list[str]:
        return [img.stem for img, _ in self._entries(split)]

    def class_mean_rgb(self, class_id: int) -> tuple[float, float, float]:
        """Mean object color of a class in [0,1], from the manifest."""
        stats = self._class_stats(class_id)
        r, g, b = stats["mean_rgb"]
        return float(r), float(g), float(b)

    def reference_crop(self, class_id: int) -> tuple[np.ndarray, BoundingBox]:
        """The designated reference image and box for a class."""
        stats = self._class_stats(class_id)
        ref = stats["reference"]
        img_path = self.root / ref["split"] / "images" / f"{ref['image']}.png"
        cx, cy, w, h = ref["box"]
        return load_image(img_path), BoundingBox(cx=cx, cy=cy, w=w, h=h, class_id=class_id)

    def _class_stats(self, class_id: int) -> dict:
        if self.manifest is None:
            raise ValueError(f"dataset at {self.root} has no manifest with class statistics")
        stats = self.manifest.get("class_stats", {}).get(str(class_id))
        if stats is None:
            raise KeyError(f"no class statistics for class {class_id}")
        return stats


def load_dataset(root: str | Path) -> Dataset:
    """Load a dataset directory; raises if no split directories exist."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    splits: dict[str, list[tuple[Path, Path]]] = {}
    for split_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        img_dir = split_dir / "images"
        if not img_dir.is_dir():
            continue
        entries = []
        for img_path in sorted(img_dir.iterdir()):
            if img_path.suffix.lower() not in (".png", ".jpg", ".jpeg", ".bmp"):
                continue
            entries.append((img_path, split_dir / "labels" / f"{img_path.stem}.txt"))
        if entries:
            splits[split_dir.name] = entries
    if not splits:
        raise ValueError(f"no split directories with images found under {root}")
    manifest_path = root / MANIFEST_NAME
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else None
    return Dataset(root=root, manifest=manifest, _splits=splits)


# ---------------------------------------------------------------------------
# patch files


def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(".json")


def save_patch(path: str | Path, patch: torch.Tensor, metadata: dict | None = None) -> Path:
    """Save a patch as ``<path>.npy`` plus a JSON sidecar with its sha256.

    Args:
        path: Target file; must end in ``.npy``.
        patch: Float tensor (3, s, s) with values in [0, 1].
        metadata: Arbitrary JSON-serializable training provenance.

    Returns:
        The sidecar path.
    """
    path = Path(path)
    if path.suffix != ".npy":
        raise ValueError(f"patch path must end in .npy, got {path.name}")
    arr = patch.detach().cpu().numpy().astype(np.float32)
    if arr.ndim != 3 or arr.shape[0] != 3 or arr.shape[1] != arr.shape[2]:
        raise ValueError(f"expected patch shaped (3, s, s), got {arr.shape}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("patch values must lie in [0, 1]")
    path.parent.mkdir(parents=True, exist_ok=True)
    np.save(path, arr)
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    sidecar = {
        "format_version": 1,
        "sha256": digest,
        "shape": list(arr.shape),
        "dtype": "float32",
        "metadata": metadata or {},
    }
    sidecar_path = _sidecar_path(path)
    sidecar_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return sidecar_path


def load_patch(path: str | Path) -> tuple[torch.Tensor, dict]:
    """Load a patch saved by save_patch, verifying the sidecar hash.

    Returns:
        (patch tensor float32 (3, s, s), metadata dict).
    """
    path = Path(path)
    sidecar_path = _sidecar_path(path)
    if not path.exists():
        raise FileNotFoundError(f"patch file {path} does not exist")
    if not sidecar_path.exists():
        raise FileNotFoundError(f"patch sidecar {sidecar_path} is missing")
    sidecar = json.loads(sidecar_path.read_text())
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    if digest != sidecar.get("sha256"):
        raise ValueError(
            f"patch file {path} does not match its sidecar hash "
            f"(expected {sidecar.get('sha256')}, got {digest})"
        )
    arr = np.load(path)
    if list(arr.shape) != sidecar.get("shape"):
        raise ValueError(f"patch shape {list(arr.shape)} differs from sidecar {sidecar.get('shape')}")
    return torch.from_numpy(arr.astype(np.float32)), sidecar.get("metadata", {})
