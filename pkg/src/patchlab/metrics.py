"""Attack-success and detection-quality metrics, plus report assembly.

Implements COCO-style mAP/mAR (IoU 0.50:0.05:0.95, 101-point interpolation,
up to 100 detections per image), one confusion-matrix success rate per
attack family, and one CIoU-based box-naturalness measure per family.
Matching everywhere is greedy by confidence at IoU >= 0.5, one-to-one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import AttackType, BoundingBox, Detection, iou

__all__ = [
    "EvalCase",
    "MapResult",
    "ReportRow",
    "Report",
    "ciou",
    "cm_hiding",
    "cm_creating",
    "creating_success",
    "cm_altering",
    "ciou_metric",
    "map_mar",
    "summarize_cases",
    "assemble_report",
    "COCO_IOU_THRESHOLDS",
    "MATCH_IOU",
]

MATCH_IOU = 0.5
MAX_DETS_PER_IMAGE = 100
COCO_IOU_THRESHOLDS: tuple[float, ...] = tuple(
    round(0.5 + 0.05 * i, 2) for i in range(10)
)


@dataclass(frozen=True)
class EvalCase:
    """One evaluated image: ground truth, post-attack detections, context."""

    image_id: str
    gt: list[BoundingBox]
    detections: list[Detection]
    attack_type: AttackType
    target_class: int | None = None
    rm: BoundingBox | None = None

    def __post_init__(self) -> None:
        if self.attack_type in (AttackType.HIDING, AttackType.ALTERING) and not self.gt:
            raise ValueError(f"{self.attack_type.value} case requires at least one gt object")
        if self.attack_type is AttackType.CREATING and self.rm is None:
            raise ValueError("creating case requires the placement region rm")
        if self.attack_type is not AttackType.HIDING and self.target_class is None:
            raise ValueError(f"{self.attack_type.value} case requires a target class")


def ciou(a: BoundingBox, b: BoundingBox) -> float:
    """Complete IoU: IoU minus center-distance and aspect-ratio penalties.

    ciou = IoU - rho^2/c^2 - alpha*v with rho the center distance, c the
    enclosing-box diagonal, v the squared arctan aspect difference scaled
    by 4/pi^2, and alpha = v / ((1 - IoU) + v).
    """
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    i = iou(a, b)
    acx, acy = (ax1 + ax2) / 2, (ay1 + ay2) / 2
    bcx, bcy = (bx1 + bx2) / 2, (by1 + by2) / 2
    rho2 = (acx - bcx) ** 2 + (acy - bcy) ** 2
    ex1, ey1 = min(ax1, bx1), min(ay1, by1)
    ex2, ey2 = max(ax2, bx2), max(ay2, by2)
    c2 = (ex2 - ex1) ** 2 + (ey2 - ey1) ** 2
    wa, ha = ax2 - ax1, ay2 - ay1
    wb, hb = bx2 - bx1, by2 - by1
    v = (4.0 / math.pi**2) * (math.atan(wa / ha) - math.atan(wb / hb)) ** 2
    alpha = v / ((1.0 - i) + v) if v > 0.0 else 0.0
    return i - rho2 / c2 - alpha * v


def _clamp01(x: float) -> float:
    return min(max(x, 0.0), 1.0)


def _greedy_match(
    gt: list[BoundingBox],
    dets: list[Detection],
    iou_thresh: float = MATCH_IOU,
    class_aware: bool = True,
) -> dict[int, int]:
    """Greedy one-to-one matching, highest-confidence detection first.

    Returns a map from detection index to matched gt index.  A detection
    matches the unmatched gt with the highest IoU >= iou_thresh (same class
    when ``class_aware``).
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    taken: set[int] = set()
    matches: dict[int, int] = {}
    for di in order:
        det = dets[di]
        best_gi, best_iou = -1, -1.0
        for gi, g in enumerate(gt):
            if gi in taken:
                continue
            if class_aware and g.class_id != det.box.class_id:
                continue
            overlap = iou(g, det.box)
            if overlap >= iou_thresh and overlap > best_iou:
                best_gi, best_iou = gi, overlap
        if best_gi >= 0:
            matches[di] = best_gi
            taken.add(best_gi)
    return matches


def cm_hiding(case: EvalCase) -> float:
    """Disappearance rate: 1 - (correctly re-detected objects / N_O)."""
    if case.attack_type is not AttackType.HIDING:
        raise ValueError(f"expected hiding case, got {case.attack_type.value}")
    matches = _greedy_match(case.gt, case.detections)
    return 1.0 - len(matches) / len(case.gt)


def _creating_fp(case: EvalCase) -> list[Detection]:
    """Target-class detections not explained by any target-class gt box."""
    t = case.target_class
    target_dets = [d for d in case.detections if d.box.class_id == t]
    target_gts = [g for g in case.gt if g.class_id == t]
    matches = _greedy_match(target_gts, target_dets, class_aware=False)
    return [d for di, d in enumerate(target_dets) if di not in matches]


def cm_creating(case: EvalCase) -> float:
    """Created-detection rate: min(FP_t / N_O, 1)."""
    if case.attack_type is not AttackType.CREATING:
        raise ValueError(f"expected creating case, got {case.attack_type.value}")
    n_o = max(len(case.gt), 1)
    return min(len(_creating_fp(case)) / n_o, 1.0)


def creating_success(case: EvalCase) -> bool:
    """Whether some created target-class detection centers inside rm."""
    if case.rm is None:
        raise ValueError("creating success needs the placement region rm")
    return any(case.rm.contains(d.box.cx, d.box.cy) for d in _creating_fp(case))


def _altering_outcomes(case: EvalCase) -> list[tuple[bool, Detection | None]]:
    """Per gt object: (flipped to target, the target-class detection used)."""
    t = case.target_class
    matches = _greedy_match(case.gt, case.detections)
    correctly_detected = set(matches.values())
    outcomes: list[tuple[bool, Detection | None]] = []
    for gi, g in enumerate(case.gt):
        if gi in correctly_detected:
            outcomes.append((False, None))
            continue
        overlapping = [
            d
            for d in case.detections
            if d.box.class_id == t and iou(g, d.box) >= MATCH_IOU
        ]
        if overlapping:
            best = max(overlapping, key=lambda d: d.confidence)
            outcomes.append((True, best))
        else:
            outcomes.append((False, None))
    return outcomes


def cm_altering(case: EvalCase) -> float:
    """Class-flip rate: objects with no correct-class match but a target-class
    detection at IoU >= 0.5, over N_O."""
    if case.attack_type is not AttackType.ALTERING:
        raise ValueError(f"expected altering case, got {case.attack_type.value}")
    outcomes = _altering_outcomes(case)
    return sum(1 for ok, _ in outcomes if ok) / len(case.gt)


def ciou_metric(case: EvalCase) -> float:
    """Box-naturalness score in [0, 1], per attack family.

    Hiding: mean over gt of 1 - clamp01(ciou(gt, matched box)), a vanished
    object contributing 1.  Creating: best clamp01(ciou(rm, created box)),
    0 if nothing was created.  Altering: mean clamp01(ciou(gt, target box))
    over successfully flipped objects, 0 if none.
    """
    if case.attack_type is AttackType.HIDING:
        matches = _greedy_match(case.gt, case.detections)
        by_gt = {gi: di for di, gi in matches.items()}
        total = 0.0
        for gi, g in enumerate(case.gt):
            if gi in by_gt:
                total += 1.0 - _clamp01(ciou(g, case.detections[by_gt[gi]].box))
            else:
                total += 1.0
        return total / len(case.gt)
    if case.attack_type is AttackType.CREATING:
        created = _creating_fp(case)
        if not created or case.rm is None:
            return 0.0
        return max(_clamp01(ciou(case.rm, d.box)) for d in created)
    outcomes = _altering_outcomes(case)
    scored = [(g, d) for (ok, d), g in zip(outcomes, case.gt) if ok and d is not None]
    if not scored:
        return 0.0
    return sum(_clamp01(ciou(g, d.box)) for g, d in scored) / len(scored)


# ---------------------------------------------------------------------------
# mAP / mAR


@dataclass(frozen=True)
class MapResult:
    """COCO-style detection quality over a test set."""

    map: float
    mar: float
    map50: float
    per_class_ap: dict[int, float]


def _average_precision(tp: np.ndarray, n_gt: int) -> tuple[float, float]:
    """101-point interpolated AP and final recall from ordered TP flags."""
    if n_gt == 0:
        return 0.0, 0.0
    if tp.size == 0:
        return 0.0, 0.0
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1 - tp)
    recall = cum_tp / n_gt
    precision = cum_tp / (cum_tp + cum_fp)
    # precision envelope from the right
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    points = np.linspace(0.0, 1.0, 101)
    idx = np.searchsorted(recall, points, side="left")
    interp = np.where(idx < recall.size, envelope[np.minimum(idx, recall.size - 1)], 0.0)
    return float(interp.mean()), float(recall[-1])


def map_mar(
    gts: list[list[BoundingBox]],
    dets: list[list[Detection]],
    iou_thresholds: tuple[float, ...] = COCO_IOU_THRESHOLDS,
    max_dets: int = MAX_DETS_PER_IMAGE,
) -> MapResult:
    """COCO-style mean average precision and recall over a set of images.

    AP per (class, IoU threshold) uses greedy confidence-ordered matching
    and 101-point precision interpolation; AR is the mean over the same
    cells of the final recall with at most ``max_dets`` detections per
    image.  Classes without ground truth are excluded from the averages.
    """
    if len(gts) != len(dets):
        raise ValueError(f"got {len(gts)} gt lists but {len(dets)} detection lists")
    classes = sorted({g.class_id for image in gts for g in image if g.class_id is not None})
    if not classes:
        raise ValueError("no ground-truth objects in the evaluation set")
    capped = [
        sorted(image, key=lambda d: -d.confidence)[:max_dets] if len(image) > max_dets else image
        for image in dets
    ]
    ap_sum: dict[int, float] = {c: 0.0 for c in classes}
    ap50: dict[int, float] = {}
    recall_cells: list[float] = []
    for cls_id in classes:
        cls_gts = [[g for g in image if g.class_id == cls_id] for image in gts]
        n_gt = sum(len(image) for image in cls_gts)
        flat: list[tuple[float, int, Detection]] = []
        for img_i, image in enumerate(capped):
            for d in image:
                if d.box.class_id == cls_id:
                    flat.append((d.confidence, img_i, d))
        flat.sort(key=lambda rec: (-rec[0], rec[1]))
        for thresh in iou_thresholds:
            matched: list[set[int]] = [set() for _ in gts]
            tp = np.zeros(len(flat))
            for k, (_, img_i, det) in enumerate(flat):
                best_gi, best_iou = -1, -1.0
                for gi, g in enumerate(cls_gts[img_i]):
                    if gi in matched[img_i]:
                        continue
                    overlap = iou(g, det.box)
                    if overlap >= thresh and overlap > best_iou:
                        best_gi, best_iou = gi, overlap
                if best_gi >= 0:
                    matched[img_i].add(best_gi)
                    tp[k] = 1.0
            ap, final_recall = _average_precision(tp, n_gt)
            ap_sum[cls_id] += ap
            recall_cells.append(final_recall)
            if thresh == 0.5:
                ap50[cls_id] = ap
    n_t = len(iou_thresholds)
    per_class = {c: ap_sum[c] / n_t for c in classes}
    overall_map = float(np.mean(list(per_class.values())))
    overall_map50 = float(np.mean(list(ap50.values()))) if ap50 else 0.0
    overall_mar = float(np.mean(recall_cells))
    return MapResult(map=overall_map, mar=overall_mar, map50=overall_map50, per_class_ap=per_class)


# ---------------------------------------------------------------------------
# report assembly


_CM_FNS = {
    AttackType.HIDING: cm_hiding,
    AttackType.CREATING: cm_creating,
    AttackType.ALTERING: cm_altering,
}


@dataclass
class ReportRow:
    """One table line: a (attack, patch-variant) evaluation summary."""

    label: str
    attack: str
    map: float | None
    mar: float | None
    cm: float | None
    ciou: float | None
    per_class_cm: dict[int, float] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


@dataclass
class Report:
    """Rows plus gap notes; renders as an aligned table and CSV records."""

    rows: list[ReportRow] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def to_text(self) -> str:
        header = f"{'attack':<10} {'variant':<24} {'mAP':>7} {'mAR':>7} {'CM':>7} {'CIoU':>7}"
        lines = [header, "-" * len(header)]
        for row in self.rows:
            cells = [
                f"{v:7.3f}" if v is not None else f"{'-':>7}"
                for v in (row.map, row.mar, row.cm, row.ciou)
            ]
            lines.append(f"{row.attack:<10} {row.label:<24} " + " ".join(cells))
        for note in self.notes:
            lines.append(f"note: {note}")
        return "\n".join(lines)

    def to_csv_rows(self) -> list[dict]:
        out = []
        for row in self.rows:
            out.append(
                {
                    "attack": row.attack,
                    "variant": row.label,
                    "map": "" if row.map is None else f"{row.map:.6f}",
                    "mar": "" if row.mar is None else f"{row.mar:.6f}",
                    "cm": "" if row.cm is None else f"{row.cm:.6f}",
                    "ciou": "" if row.ciou is None else f"{row.ciou:.6f}",
                }
            )
        return out

    def per_class_csv_rows(self) -> list[dict]:
        out = []
        for row in self.rows:
            for cls_id, value in sorted(row.per_class_cm.items()):
                out.append(
                    {
                        "attack": row.attack,
                        "variant": row.label,
                        "class_id": cls_id,
                        "cm": f"{value:.6f}",
                    }
                )
        return out


def _per_class_cm(cases: list[EvalCase]) -> dict[int, float]:
    """CM broken down by object class (hiding/altering) or target class."""
    attack = cases[0].attack_type
    if attack is AttackType.CREATING:
        values = [cm_creating(c) for c in cases]
        target = cases[0].target_class
        return {int(target): float(np.mean(values))} if target is not None else {}
    per_class_total: dict[int, list[float]] = {}
    for case in cases:
        if attack is AttackType.HIDING:
            matches = _greedy_match(case.gt, case.detections)
            hit = set(matches.values())
            for gi, g in enumerate(case.gt):
                per_class_total.setdefault(int(g.class_id or 0), []).append(
                    0.0 if gi in hit else 1.0
                )
        else:
            outcomes = _altering_outcomes(case)
            for (ok, _), g in zip(outcomes, case.gt):
                per_class_total.setdefault(int(g.class_id or 0), []).append(1.0 if ok else 0.0)
    return {c: float(np.mean(v)) for c, v in sorted(per_class_total.items())}


def summarize_cases(cases: list[EvalCase], label: str) -> ReportRow:
    """Aggregate per-image cases into one report row."""
    if not cases:
        raise ValueError("cannot summarize an empty case list")
    attack = cases[0].attack_type
    cm_fn = _CM_FNS[attack]
    cm = float(np.mean([cm_fn(c) for c in cases]))
    ciou_val = float(np.mean([ciou_metric(c) for c in cases]))
    result = map_mar([c.gt for c in cases], [c.detections for c in cases])
    extra: dict = {}
    if attack is AttackType.CREATING:
        extra["success_rate"] = float(np.mean([creating_success(c) for c in cases]))
    return ReportRow(
        label=label,
        attack=attack.value,
        map=result.map,
        mar=result.mar,
        cm=cm,
        ciou=ciou_val,
        per_class_cm=_per_class_cm(cases),
        extra=extra,
    )


def assemble_report(rows: list[ReportRow], baselines: list[ReportRow]) -> Report:
    """Combine baseline and attack rows into a final report.

    Baselines come first.  A "(top 3)" companion row — CM averaged over the
    three strongest per-class entries — is added for attack rows with at
    least three per-class values.  Missing baselines are flagged as notes
    rather than errors.
    """
    report = Report()
    if not rows and not baselines:
        return report
    attacks = {r.attack for r in rows}
    baseline_attacks = {r.attack for r in baselines}
    for attack in sorted(attacks - baseline_attacks):
        report.notes.append(f"no baseline rows for attack '{attack}'")
    report.rows.extend(baselines)
    for row in rows:
        report.rows.append(row)
        if len(row.per_class_cm) >= 3:
            top3 = sorted(row.per_class_cm.values(), reverse=True)[:3]
            report.rows.append(
                ReportRow(
                    label=f"{row.label} (top 3)",
                    attack=row.attack,
                    map=None,
                    mar=None,
                    cm=float(np.mean(top3)),
                    ciou=None,
                    extra={"derived_from": row.label},
                )
            )
    return report
