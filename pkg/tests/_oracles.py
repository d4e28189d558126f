"""Independent reference implementations used to cross-check metrics.

Everything here is written as plain Python loops straight from the metric
definitions and deliberately shares no code with the package.  The tests
compare the vectorised implementations in ``patchlab.metrics`` against
these slow-but-obvious versions.
"""

from __future__ import annotations

import math

import numpy as np

from patchlab.core import BoundingBox, Detection


def corners_of(box) -> tuple[float, float, float, float]:
    """Corner coordinates of a normalized box, clipped to the unit square."""
    x1 = max(0.0, box.cx - box.w / 2.0)
    y1 = max(0.0, box.cy - box.h / 2.0)
    x2 = min(1.0, box.cx + box.w / 2.0)
    y2 = min(1.0, box.cy + box.h / 2.0)
    return x1, y1, x2, y2


def iou_ref(a, b) -> float:
    """Intersection over union computed with explicit corner arithmetic."""
    ax1, ay1, ax2, ay2 = corners_of(a)
    bx1, by1, bx2, by2 = corners_of(b)
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def ciou_ref(a, b) -> float:
    """Complete-IoU via a direct transcription of its defining formula."""
    ax1, ay1, ax2, ay2 = corners_of(a)
    bx1, by1, bx2, by2 = corners_of(b)
    iou_val = iou_ref(a, b)

    acx, acy = (ax1 + ax2) / 2.0, (ay1 + ay2) / 2.0
    bcx, bcy = (bx1 + bx2) / 2.0, (by1 + by2) / 2.0
    rho2 = (acx - bcx) ** 2 + (acy - bcy) ** 2

    cw = max(ax2, bx2) - min(ax1, bx1)
    ch = max(ay2, by2) - min(ay1, by1)
    c2 = cw**2 + ch**2
    if c2 <= 0.0:
        return iou_val

    wa, ha = ax2 - ax1, ay2 - ay1
    wb, hb = bx2 - bx1, by2 - by1
    v = (4.0 / math.pi**2) * (math.atan(wa / ha) - math.atan(wb / hb)) ** 2
    alpha = 0.0 if v == 0.0 else v / ((1.0 - iou_val) + v)
    return iou_val - rho2 / c2 - alpha * v


def greedy_matches_ref(gt, detections, iou_thresh=0.5, class_aware=True):
    """One-to-one greedy matching by repeatedly taking the best detection.

    Detections are consumed in order of decreasing confidence (ties broken
    by original index) and each claims the unmatched ground-truth box with
    the highest overlap at or above the threshold.

    Returns:
        Dict mapping detection index to matched ground-truth index.
    """
    remaining = list(range(len(detections)))
    taken: set[int] = set()
    matches: dict[int, int] = {}
    while remaining:
        best_d = min(remaining, key=lambda i: (-detections[i].confidence, i))
        remaining.remove(best_d)
        det = detections[best_d]
        best_g, best_o = None, -1.0
        for gi, g in enumerate(gt):
            if gi in taken:
                continue
            if class_aware and g.class_id != det.box.class_id:
                continue
            overlap = iou_ref(g, det.box)
            if overlap >= iou_thresh and overlap > best_o:
                best_g, best_o = gi, overlap
        if best_g is not None:
            matches[best_d] = best_g
            taken.add(best_g)
    return matches


def cm_hiding_ref(case) -> float:
    matches = greedy_matches_ref(case.gt, case.detections)
    return 1.0 - len(matches) / len(case.gt)


def cm_creating_ref(case) -> float:
    target_gt = [g for g in case.gt if g.class_id == case.target_class]
    target_dets = [d for d in case.detections if d.box.class_id == case.target_class]
    matches = greedy_matches_ref(target_gt, target_dets, class_aware=False)
    false_pos = len(target_dets) - len(matches)
    return min(false_pos / max(len(case.gt), 1), 1.0)


def cm_altering_ref(case) -> float:
    matches = greedy_matches_ref(case.gt, case.detections)
    correctly = set(matches.values())
    flips = 0
    for gi, g in enumerate(case.gt):
        if gi in correctly:
            continue
        for det in case.detections:
            if det.box.class_id != case.target_class:
                continue
            if iou_ref(g, det.box) >= 0.5:
                flips += 1
                break
    return flips / len(case.gt)


def _ap_from_flags(flags, n_gt) -> tuple[float, float]:
    """101-point interpolated AP and final recall from ordered hit flags."""
    if n_gt == 0 or not flags:
        return 0.0, 0.0
    precisions, recalls = [], []
    tp = fp = 0
    for flag in flags:
        tp += flag
        fp += 1 - flag
        precisions.append(tp / (tp + fp))
        recalls.append(tp / n_gt)
    total = 0.0
    for point in np.linspace(0.0, 1.0, 101):
        candidates = [p for p, r in zip(precisions, recalls) if r >= point]
        total += max(candidates) if candidates else 0.0
    return total / 101.0, recalls[-1]


def map_mar_ref(gt_per_image, det_per_image, iou_thresholds=None, max_dets=100):
    """COCO-style mAP / mAR via per-class per-threshold explicit loops.

    Returns:
        Tuple ``(mean_ap, mean_ar, ap_at_first_threshold_by_class)``.
    """
    if iou_thresholds is None:
        iou_thresholds = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
    classes = sorted(
        {g.class_id for img in gt_per_image for g in img if g.class_id is not None}
    )
    capped = []
    for dets in det_per_image:
        if len(dets) > max_dets:
            order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
            dets = [dets[i] for i in order[:max_dets]]
        capped.append(dets)

    ap_cells: dict[int, list[float]] = {c: [] for c in classes}
    first_thresh_ap: dict[int, float] = {}
    recall_cells: list[float] = []
    for cls in classes:
        n_gt = sum(1 for img in gt_per_image for g in img if g.class_id == cls)
        flat = []
        for img_i, dets in enumerate(capped):
            for det in dets:
                if det.box.class_id == cls:
                    flat.append((det.confidence, img_i, det))
        flat.sort(key=lambda rec: (-rec[0], rec[1]))
        for t_i, thresh in enumerate(iou_thresholds):
            used = [set() for _ in gt_per_image]
            flags = []
            for _, img_i, det in flat:
                best_g, best_o = None, -1.0
                for gi, g in enumerate(gt_per_image[img_i]):
                    if g.class_id != cls or gi in used[img_i]:
                        continue
                    overlap = iou_ref(g, det.box)
                    if overlap >= thresh and overlap > best_o:
                        best_g, best_o = gi, overlap
                if best_g is not None:
                    used[img_i].add(best_g)
                    flags.append(1)
                else:
                    flags.append(0)
            ap, recall = _ap_from_flags(flags, n_gt)
            ap_cells[cls].append(ap)
            recall_cells.append(recall)
            if t_i == 0:
                first_thresh_ap[cls] = ap
    mean_ap = sum(sum(v) / len(v) for v in ap_cells.values()) / len(classes)
    mean_ar = sum(recall_cells) / len(recall_cells)
    return mean_ap, mean_ar, first_thresh_ap


def random_eval_scene(rng, num_classes: int = 3, max_boxes: int = 5):
    """A random annotated scene with plausible detector output.

    Ground truth gets up to ``max_boxes`` boxes; each is re-detected with
    probability 0.75 (jittered, sometimes with the wrong class), and a few
    spurious detections are added.

    Returns:
        (gt_boxes, detections) lists.
    """
    n_gt = int(rng.integers(1, max_boxes + 1))
    gt = []
    for _ in range(n_gt):
        w = float(rng.uniform(0.08, 0.3))
        h = float(rng.uniform(0.08, 0.3))
        cx = float(rng.uniform(w / 2, 1.0 - w / 2))
        cy = float(rng.uniform(h / 2, 1.0 - h / 2))
        gt.append(BoundingBox(cx, cy, w, h, class_id=int(rng.integers(0, num_classes))))
    detections = []
    for g in gt:
        if rng.uniform() >= 0.75:
            continue
        cx = float(np.clip(g.cx + rng.uniform(-0.05, 0.05), 0.0, 1.0))
        cy = float(np.clip(g.cy + rng.uniform(-0.05, 0.05), 0.0, 1.0))
        w = float(g.w * rng.uniform(0.7, 1.3))
        h = float(g.h * rng.uniform(0.7, 1.3))
        cls = g.class_id if rng.uniform() < 0.7 else int(rng.integers(0, num_classes))
        detections.append(
            Detection(BoundingBox(cx, cy, w, h, class_id=cls), float(rng.uniform(0.3, 1.0)))
        )
    for _ in range(int(rng.integers(0, 4))):
        w = float(rng.uniform(0.05, 0.25))
        h = float(rng.uniform(0.05, 0.25))
        cx = float(rng.uniform(w / 2, 1.0 - w / 2))
        cy = float(rng.uniform(h / 2, 1.0 - h / 2))
        detections.append(
            Detection(
                BoundingBox(cx, cy, w, h, class_id=int(rng.integers(0, num_classes))),
                float(rng.uniform(0.05, 1.0)),
            )
        )
    return gt, detections
