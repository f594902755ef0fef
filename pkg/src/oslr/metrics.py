"""From probability maps to scored boxes, and the detection/segmentation metrics.

Boxes use inclusive pixel coordinates throughout, so a single pixel at
``(row=4, col=9)`` is the box ``(9, 4, 9, 4)`` with area 1.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

_FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


@dataclass
class DetectionBox:
    x_min: int
    y_min: int
    x_max: int
    y_max: int
    score: float | None = None
    class_id: int = 0
    image_id: int = 0

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"degenerate box {self.coords()}")

    def coords(self) -> tuple[int, int, int, int]:
        return self.x_min, self.y_min, self.x_max, self.y_max

    @property
    def width(self) -> int:
        return self.x_max - self.x_min + 1

    @property
    def height(self) -> int:
        return self.y_max - self.y_min + 1

    @property
    def area(self) -> int:
        return self.width * self.height


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Strict ``prob > threshold``; a pixel at exactly 0.5 stays background."""
    return np.asarray(prob) > threshold


def connected_components(mask: np.ndarray) -> list[np.ndarray]:
    """4-connected foreground components as ``(k, 2)`` arrays of ``(row, col)``.

    Ordered by each component's first pixel in row-major scan order; pixels
    within a component are also in scan order.
    """
    labels, n = ndimage.label(np.asarray(mask, dtype=bool), structure=_FOUR_CONNECTED)
    if n == 0:
        return []
    rows, cols = np.nonzero(labels)  # row-major order
    lab = labels[rows, cols]
    order = np.argsort(lab, kind="stable")
    bounds = np.searchsorted(lab[order], np.arange(1, n + 2))
    comps = [np.stack([rows[order[a:b]], cols[order[a:b]]], axis=1) for a, b in zip(bounds[:-1], bounds[1:])]
    comps.sort(key=lambda c: (c[0, 0], c[0, 1]))
    return comps


def bbox_from_mask(component: np.ndarray) -> DetectionBox:
    """Extremal pixels of a component: left/top/right/bottom, inclusive."""
    comp = np.asarray(component)
    if comp.size == 0:
        raise ValueError("empty component has no bounding box")
    rows, cols = comp[:, 0], comp[:, 1]
    return DetectionBox(int(cols.min()), int(rows.min()), int(cols.max()), int(rows.max()))


def global_box(mask: np.ndarray) -> DetectionBox | None:
    """Single box over every foreground pixel, or ``None`` for an empty mask."""
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        return None
    return DetectionBox(int(cols.min()), int(rows.min()), int(cols.max()), int(rows.max()))


def iou(a: DetectionBox, b: DetectionBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min) + 1
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min) + 1
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def pix_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"pix_iou: shapes {pred.shape} and {gt.shape} differ")
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def score_detection(prob: np.ndarray, component: np.ndarray) -> float:
    """Mean probability over the component's pixels."""
    comp = np.asarray(component)
    if comp.size == 0:
        raise ValueError("cannot score an empty component")
    return float(np.asarray(prob)[comp[:, 0], comp[:, 1]].mean())


def detect(
    prob: np.ndarray,
    threshold: float = 0.5,
    class_id: int = 0,
    image_id: int = 0,
    use_global_box: bool = False,
    binary: np.ndarray | None = None,
) -> list[DetectionBox]:
    """Scored boxes for one probability map.

    One box per 4-connected component by default; ``use_global_box`` instead
    returns a single box spanning all foreground pixels. ``binary`` overrides
    the thresholded mask (used for k-shot unions).
    """
    mask = binarize(prob, threshold) if binary is None else np.asarray(binary, dtype=bool)
    comps = connected_components(mask)
    if not comps:
        return []
    if use_global_box:
        comps = [np.concatenate(comps)]
    out = []
    for comp in comps:
        box = bbox_from_mask(comp)
        box.score, box.class_id, box.image_id = score_detection(prob, comp), class_id, image_id
        out.append(box)
    return out


def match_detections(
    detections: Sequence[DetectionBox], ground_truths: Sequence[DetectionBox], iou_thr: float = 0.5
) -> tuple[list[DetectionBox], list[bool]]:
    """Greedy matching in descending score order (stable on ties).

    Each detection takes the still-unmatched ground truth of the same image
    with the highest IoU, if that IoU strictly exceeds ``iou_thr``.
    """
    for d in detections:
        if d.score is None:
            raise ValueError("every detection needs a score")
    ranked = sorted(detections, key=lambda d: -d.score)
    taken = [False] * len(ground_truths)
    flags = []
    for d in ranked:
        best, best_j = iou_thr, -1
        for j, g in enumerate(ground_truths):
            if taken[j] or g.image_id != d.image_id:
                continue
            v = iou(d, g)
            if v > best:
                best, best_j = v, j
        if best_j >= 0:
            taken[best_j] = True
        flags.append(best_j >= 0)
    return ranked, flags


def average_precision(
    detections: Sequence[DetectionBox], ground_truths: Sequence[DetectionBox], iou_thr: float = 0.5
) -> float | None:
    """All-point interpolated area under the precision/recall curve.

    Returns 0.0 when there are detections but no ground truth, and ``None``
    when there is neither (such a class does not enter the mean).
    """
    _, flags = match_detections(detections, ground_truths, iou_thr)
    if not ground_truths:
        return 0.0 if detections else None
    if not flags:
        return 0.0
    tp = np.cumsum(flags)
    recall = tp / len(ground_truths)
    precision = tp / np.arange(1, len(flags) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def kshot_union(masks: Sequence[np.ndarray]) -> np.ndarray:
    """Pixelwise OR of k binary masks."""
    if len(masks) == 0:
        raise ValueError("kshot_union needs at least one mask")
    out = np.asarray(masks[0], dtype=bool).copy()
    for m in masks[1:]:
        m = np.asarray(m, dtype=bool)
        if m.shape != out.shape:
            raise ValueError(f"kshot_union: shapes {out.shape} and {m.shape} differ")
        out |= m
    return out


# ---------------------------------------------------------------------------
# aggregate report


@dataclass
class ClassStats:
    ap: float | None
    pix_iou: float
    n_gt: int
    n_det: int


@dataclass
class EvalReport:
    per_class: dict[int, ClassStats] = field(default_factory=dict)
    mAP: float = 0.0
    mPixIoU: float = 0.0
    mIoU: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0
    pixel_recall: float = 0.0
    n_images: int = 0

    def to_text(self) -> str:
        lines = [
            f"images      {self.n_images}",
            f"mAP@0.5     {self.mAP:.6f}",
            f"mPixIoU     {self.mPixIoU:.6f}",
            f"mIoU        {self.mIoU:.6f}",
            f"pixelRecall {self.pixel_recall:.6f}",
            f"TP/FP/FN    {self.tp}/{self.fp}/{self.fn}",
            "",
            "class_id        ap   pix_iou  n_gt  n_det",
        ]
        for cid, s in sorted(self.per_class.items()):
            ap = "     n/a" if s.ap is None else f"{s.ap:8.4f}"
            lines.append(f"{cid:8d}  {ap}  {s.pix_iou:8.4f}  {s.n_gt:4d}  {s.n_det:5d}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class_id", "ap", "pix_iou", "n_gt", "n_det"])
        for cid, s in sorted(self.per_class.items()):
            w.writerow([cid, "" if s.ap is None else f"{s.ap:.6f}", f"{s.pix_iou:.6f}", s.n_gt, s.n_det])
        return buf.getvalue()


def evaluate(
    probs: Sequence[np.ndarray],
    gt_masks: Sequence[np.ndarray],
    class_ids: Sequence[int],
    known_classes: Sequence[int] | None = None,
    threshold: float = 0.5,
    iou_thr: float = 0.5,
    use_global_box: bool = False,
    binaries: Sequence[np.ndarray] | None = None,
) -> EvalReport:
    """Score one probability map per (query, target) pair against its mask.

    Ground truth per image is the box around the whole mask (one logo
    instance per scene). ``binaries``, when given, replaces thresholding
    (k-shot unions); scores still come from ``probs``.
    """
    if not (len(probs) == len(gt_masks) == len(class_ids)):
        raise ValueError("probs, gt_masks and class_ids must have equal length")
    known = set(known_classes) if known_classes is not None else set(class_ids)
    dets: dict[int, list[DetectionBox]] = {}
    gts: dict[int, list[DetectionBox]] = {}
    pix: dict[int, list[float]] = {}
    best_ious, all_pix = [], []
    hit = total = 0
    for i, (prob, gt, cid) in enumerate(zip(probs, gt_masks, class_ids)):
        cid = int(cid)
        if cid not in known:
            raise ValueError(f"class {cid} is not in the class table")
        gt = np.asarray(gt) > 0
        binary = binarize(prob, threshold) if binaries is None else np.asarray(binaries[i], dtype=bool)
        boxes = detect(prob, threshold, cid, i, use_global_box, binary=binary)
        dets.setdefault(cid, []).extend(boxes)
        g = global_box(gt)
        if g is not None:
            g.class_id, g.image_id = cid, i
            gts.setdefault(cid, []).append(g)
            best_ious.append(max((iou(b, g) for b in boxes), default=0.0))
        p = pix_iou(binary, gt)
        pix.setdefault(cid, []).append(p)
        all_pix.append(p)
        hit += int(np.count_nonzero(binary & gt))
        total += int(np.count_nonzero(gt))

    report = EvalReport(n_images=len(probs))
    aps = []
    for cid in sorted(set(dets) | set(gts) | set(pix)):
        d, g = dets.get(cid, []), gts.get(cid, [])
        ap = average_precision(d, g, iou_thr)
        _, flags = match_detections(d, g, iou_thr)
        report.tp += sum(flags)
        report.fp += len(flags) - sum(flags)
        report.fn += len(g) - sum(flags)
        report.per_class[cid] = ClassStats(ap, float(np.mean(pix.get(cid, [0.0]))), len(g), len(d))
        if ap is not None:
            aps.append(ap)
    report.mAP = float(np.mean(aps)) if aps else 0.0
    report.mPixIoU = float(np.mean(all_pix)) if all_pix else 0.0
    report.mIoU = float(np.mean(best_ious)) if best_ious else 0.0
    report.pixel_recall = hit / total if total else 0.0
    return report
