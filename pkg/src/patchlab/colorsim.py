"""Color-similarity analysis: does patch color predict attack success?

Extracts hard-binned RGB/HSV histograms, scores patch-vs-reference
similarity with five methods (Pearson correlation, intersection,
Bhattacharyya, chi-square, KL divergence — distances negated so larger
always means more similar), and correlates similarity against per-patch
attack success rates.  Records round-trip through CSV.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .losses import Histogram, hard_histogram, rgb_to_hsv_exact, scale_channels

__all__ = [
    "METHODS",
    "SPACES",
    "KLD_EPS",
    "SimilarityRecord",
    "CorrelationCell",
    "extract_histogram",
    "similarity",
    "correlate_success",
    "records_for_patches",
    "records_to_csv",
    "records_from_csv",
    "summary_table",
]

METHODS: tuple[str, ...] = ("corr", "inter", "bhattac", "chis", "kld")
SPACES: tuple[str, ...] = ("rgb", "hsv")
KLD_EPS = 1e-10
_CHI_EPS = 1e-10
_BHAT_FLOOR = 1e-300  # keeps ln() finite for fully disjoint histograms

_METHOD_LABELS = {
    "corr": "Corr",
    "inter": "Inter",
    "bhattac": "Bhattac",
    "chis": "Chi-S",
    "kld": "KLD",
}


@dataclass(frozen=True)
class SimilarityRecord:
    """One (patch, space, method) similarity paired with attack success."""

    patch_id: str
    space: str
    method: str
    similarity: float
    success: float

    def __post_init__(self) -> None:
        if self.space not in SPACES:
            raise ValueError(f"unknown color space {self.space!r}")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if not math.isfinite(self.similarity):
            raise ValueError(f"similarity must be finite, got {self.similarity}")


@dataclass(frozen=True)
class CorrelationCell:
    """Pearson r for one (space, method) cell, or an insufficiency marker."""

    space: str
    method: str
    r: float | None
    n: int
    note: str = ""


def _to_float_array(img) -> np.ndarray:
    if isinstance(img, torch.Tensor):
        arr = img.detach().cpu().numpy()
    else:
        arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) image, got {arr.shape}")
    if arr.shape[1] == 0 or arr.shape[2] == 0:
        raise ValueError("cannot histogram an empty image")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    return arr.astype(np.float64)


def extract_histogram(img, space: str = "hsv", bins: int = 256) -> Histogram:
    """Hard-binned per-channel normalized histogram of an image.

    Args:
        img: (3, H, W) image; uint8 array or float array/tensor in [0, 1].
        space: "rgb" or "hsv" (hexagonal-cone conversion).
        bins: Must be 256, the common binning of the analysis pipeline.
    """
    if bins != 256:
        raise ValueError(f"only 256-bin histograms are supported, got {bins}")
    if space not in SPACES:
        raise ValueError(f"unknown color space {space!r}")
    arr = _to_float_array(img)
    chans = rgb_to_hsv_exact(arr) if space == "hsv" else arr
    return Histogram(counts=hard_histogram(scale_channels(chans, space)), space=space)


def _pearson(x: np.ndarray, y: np.ndarray) -> float | None:
    """Pearson r in float64; None when either side has zero variance."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc = x - x.mean()
    yc = y - y.mean()
    sx = float(np.sqrt((xc * xc).sum()))
    sy = float(np.sqrt((yc * yc).sum()))
    if sx == 0.0 or sy == 0.0:
        return None
    return float((xc * yc).sum() / (sx * sy))


def similarity(h1: Histogram, h2: Histogram, method: str) -> float:
    """Sign-normalized histogram similarity: larger means more similar.

    Per channel: corr is the Pearson correlation of the bin vectors;
    inter is sum(min); bhattac is ln sum(sqrt(h1*h2)) (negated
    Bhattacharyya distance); chis is the negated chi-square distance; kld
    is the negated KL divergence with both arguments floored at 1e-10.
    The returned value is the mean over the three channels.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; valid: {METHODS}")
    a = np.asarray(h1.counts, dtype=np.float64)
    b = np.asarray(h2.counts, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"histogram shapes differ: {a.shape} vs {b.shape}")
    vals = []
    for ch in range(a.shape[0]):
        x, y = a[ch], b[ch]
        if method == "corr":
            r = _pearson(x, y)
            vals.append(0.0 if r is None else r)
        elif method == "inter":
            vals.append(float(np.minimum(x, y).sum()))
        elif method == "bhattac":
            bc = float(np.sqrt(x * y).sum())
            vals.append(math.log(max(bc, _BHAT_FLOOR)))
        elif method == "chis":
            vals.append(-float(((x - y) ** 2 / (x + y + _CHI_EPS)).sum()))
        else:  # kld
            xf = np.maximum(x, KLD_EPS)
            yf = np.maximum(y, KLD_EPS)
            vals.append(-float((xf * np.log(xf / yf)).sum()))
    return float(np.mean(vals))


def correlate_success(
    records: list[SimilarityRecord],
    filter_threshold: float | None = None,
) -> dict[tuple[str, str], CorrelationCell]:
    """Pearson r between similarity and success for each (space, method).

    Cells with fewer than 3 records after filtering, or with zero variance
    on either axis, are marked insufficient (r = None with a reason).
    """
    grouped: dict[tuple[str, str], list[SimilarityRecord]] = {}
    for rec in records:
        if filter_threshold is not None and rec.success < filter_threshold:
            continue
        grouped.setdefault((rec.space, rec.method), []).append(rec)
    cells: dict[tuple[str, str], CorrelationCell] = {}
    for key, group in sorted(grouped.items()):
        space, method = key
        n = len(group)
        if n < 3:
            cells[key] = CorrelationCell(space, method, None, n, "insufficient (<3 records)")
            continue
        r = _pearson(
            np.array([g.similarity for g in group]),
            np.array([g.success for g in group]),
        )
        if r is None:
            cells[key] = CorrelationCell(space, method, None, n, "insufficient (zero variance)")
        else:
            cells[key] = CorrelationCell(space, method, r, n)
    return cells


def records_for_patches(
    entries: list[tuple[str, torch.Tensor, float]],
    ref_rgb: Histogram,
    ref_hsv: Histogram,
) -> list[SimilarityRecord]:
    """Score every patch against a reference in both spaces, all methods.

    Args:
        entries: (patch_id, patch tensor (3, s, s), attack success R_S).
        ref_rgb: Reference histogram in RGB space.
        ref_hsv: Reference histogram in HSV space.
    """
    if ref_rgb.space != "rgb" or ref_hsv.space != "hsv":
        raise ValueError("reference histograms must be (rgb, hsv) in that order")
    refs = {"rgb": ref_rgb, "hsv": ref_hsv}
    records = []
    for patch_id, patch, success in entries:
        for space in SPACES:
            h = extract_histogram(patch, space)
            for method in METHODS:
                records.append(
                    SimilarityRecord(
                        patch_id=patch_id,
                        space=space,
                        method=method,
                        similarity=similarity(h, refs[space], method),
                        success=float(success),
                    )
                )
    return records


_CSV_FIELDS = ("patch_id", "space", "method", "S", "R_S")


def records_to_csv(records: list[SimilarityRecord], path: str | Path) -> None:
    """Write records as CSV with columns patch_id, space, method, S, R_S."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_CSV_FIELDS)
        writer.writeheader()
        for rec in records:
            writer.writerow(
                {
                    "patch_id": rec.patch_id,
                    "space": rec.space,
                    "method": rec.method,
                    "S": f"{rec.similarity:.9g}",
                    "R_S": f"{rec.success:.9g}",
                }
            )


def records_from_csv(path: str | Path) -> list[SimilarityRecord]:
    """Read records written by records_to_csv."""
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(_CSV_FIELDS) - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing CSV columns {sorted(missing)}")
        for row in reader:
            records.append(
                SimilarityRecord(
                    patch_id=row["patch_id"],
                    space=row["space"],
                    method=row["method"],
                    similarity=float(row["S"]),
                    success=float(row["R_S"]),
                )
            )
    return records


def summary_table(
    cells_by_filter: dict[str, dict[tuple[str, str], CorrelationCell]],
) -> str:
    """Aligned text table: one row per (filter, space), methods as columns.

    Args:
        cells_by_filter: e.g. {"all": correlate_success(recs),
            "R_S >= 0.1": correlate_success(recs, 0.1)}.
    """
    header = f"{'records':<14} {'space':<6}" + "".join(
        f" {_METHOD_LABELS[m]:>9}" for m in METHODS
    )
    out = [header, "-" * len(header)]
    for label, cells in cells_by_filter.items():
        for space in SPACES:
            parts = [f"{label:<14} {space:<6}"]
            for method in METHODS:
                cell = cells.get((space, method))
                if cell is None or cell.r is None:
                    parts.append(f" {'insuf':>9}")
                else:
                    parts.append(f" {cell.r:>9.3f}")
            out.append("".join(parts))
    return "\n".join(out)
