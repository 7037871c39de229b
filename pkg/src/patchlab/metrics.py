"""Attack and detection metrics: attack success rate, COCO-style mAP/mAR,
precision/recall/F1."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def iou_xyxy(a, b) -> float:
    """IoU of two (x1, y1, x2, y2) boxes."""
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    ix1, iy1 = max(ax1, bx1), max(ay1, by1)
    ix2, iy2 = min(ax2, bx2), min(ay2, by2)
    iw, ih = max(0.0, ix2 - ix1), max(0.0, iy2 - iy1)
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0 else 0.0


@dataclass
class AttackEvalResult:
    total_objects: int
    detected_objects: int
    asr: float
    per_class: dict = field(default_factory=dict)  # class_id -> {"total", "detected", "asr"}

    def to_dict(self):
        return {"total_objects": self.total_objects,
                "detected_objects": self.detected_objects,
                "asr": self.asr,
                "per_class": {str(k): v for k, v in self.per_class.items()}}


@dataclass
class DetectionEvalResult:
    map50: float
    map50_95: float
    mar50_95: float
    precision: float
    recall: float
    f1: float

    def to_dict(self):
        return {"map50": self.map50, "map50_95": self.map50_95,
                "mar50_95": self.mar50_95, "precision": self.precision,
                "recall": self.recall, "f1": self.f1}


def _greedy_match(gt_boxes, gt_classes, det_boxes, det_classes, det_scores,
                  iou_threshold):
    """One-to-one greedy matching by descending confidence within one image.

    Returns the set of matched ground-truth indices.
    """
    order = sorted(range(len(det_boxes)), key=lambda i: -det_scores[i])
    matched = set()
    for di in order:
        best_iou, best_gi = iou_threshold, None
        for gi in range(len(gt_boxes)):
            if gi in matched or gt_classes[gi] != det_classes[di]:
                continue
            iou = iou_xyxy(det_boxes[di], gt_boxes[gi])
            if iou >= best_iou:
                best_iou, best_gi = iou, gi
        if best_gi is not None:
            matched.add(best_gi)
    return matched


def compute_asr(ground_truth, detections, iou_threshold: float = 0.5,
                rate_interpretation: bool = False) -> AttackEvalResult:
    """Attack success rate: the fraction of ground-truth objects left
    undetected, 1 - detected/N.

    ground_truth / detections: {image_id: list of entries}. Ground-truth
    entries carry "box" (x1, y1, x2, y2) and "class_id"; detection entries
    additionally carry "confidence". A ground-truth object counts as detected
    when a same-class prediction matches it at IoU >= iou_threshold under
    one-to-one greedy matching by descending confidence.

    rate_interpretation treats the detected term as a per-image rate averaged
    over images instead of a global count ratio (alternate reading; the count
    reading is the default).
    """
    total = sum(len(v) for v in ground_truth.values())
    if total == 0:
        raise ValueError("ground truth must contain at least one object")

    detected = 0
    per_class = {}
    per_image_rates = []
    for image_id, gts in ground_truth.items():
        if not gts:
            continue
        dets = detections.get(image_id, [])
        matched = _greedy_match(
            [g["box"] for g in gts], [g["class_id"] for g in gts],
            [d["box"] for d in dets], [d["class_id"] for d in dets],
            [d["confidence"] for d in dets], iou_threshold)
        detected += len(matched)
        per_image_rates.append(len(matched) / len(gts))
        for gi, g in enumerate(gts):
            c = g["class_id"]
            entry = per_class.setdefault(c, {"total": 0, "detected": 0})
            entry["total"] += 1
            entry["detected"] += int(gi in matched)

    for entry in per_class.values():
        entry["asr"] = 1.0 - entry["detected"] / entry["total"]

    if rate_interpretation:
        asr = 1.0 - float(np.mean(per_image_rates))
    else:
        asr = 1.0 - detected / total
    return AttackEvalResult(total_objects=total, detected_objects=detected,
                            asr=asr, per_class=per_class)


def _average_precision(recalls, precisions) -> float:
    """COCO 101-point interpolated AP from sorted PR samples."""
    if len(recalls) == 0:
        return 0.0
    recalls = np.asarray(recalls)
    precisions = np.asarray(precisions)
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        mask = recalls >= r - 1e-12
        ap += precisions[mask].max() if mask.any() else 0.0
    return ap / 101.0


def _pr_for_class(ground_truth, detections, class_id, iou_threshold):
    """Cumulative precision/recall arrays plus max recall for one class."""
    n_gt = sum(1 for gts in ground_truth.values() for g in gts
               if g["class_id"] == class_id)
    all_dets = []
    for image_id, dets in detections.items():
        for d in dets:
            if d["class_id"] == class_id:
                all_dets.append((d["confidence"], image_id, d["box"]))
    all_dets.sort(key=lambda x: -x[0])

    matched = {iid: set() for iid in ground_truth}
    tps = []
    for conf, iid, box in all_dets:
        gts = [(gi, g) for gi, g in enumerate(ground_truth.get(iid, []))
               if g["class_id"] == class_id]
        best_iou, best_gi = iou_threshold, None
        for gi, g in gts:
            if gi in matched[iid]:
                continue
            iou = iou_xyxy(box, g["box"])
            if iou >= best_iou:
                best_iou, best_gi = iou, gi
        if best_gi is not None:
            matched[iid].add(best_gi)
            tps.append(1)
        else:
            tps.append(0)

    tps = np.asarray(tps, dtype=float)
    if n_gt == 0:
        return None
    cum_tp = np.cumsum(tps)
    cum_fp = np.cumsum(1 - tps)
    recalls = cum_tp / n_gt
    precisions = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)
    max_recall = recalls[-1] if len(recalls) else 0.0
    return recalls, precisions, max_recall


def compute_detection_metrics(ground_truth, detections,
                              iou_thresholds=None,
                              known_class_ids=None) -> DetectionEvalResult:
    """COCO-style detection metrics.

    map50_95 averages 101-point AP over classes and IoU thresholds
    0.50:0.05:0.95; mar50_95 averages the maximum recall analogously.
    Precision/recall/F1 are computed at IoU 0.5 over all detections.

    Detections of classes with no ground-truth instances are plain false
    positives (they lower precision but are excluded from AP averaging, where
    their AP would be undefined). When known_class_ids is given, detection
    classes outside it are rejected as malformed input.
    """
    if not any(ground_truth.values()):
        raise ValueError("ground truth must be non-empty")
    if iou_thresholds is None:
        iou_thresholds = [0.5 + 0.05 * i for i in range(10)]

    class_ids = sorted({g["class_id"] for gts in ground_truth.values() for g in gts})
    det_classes = {d["class_id"] for dets in detections.values() for d in dets}
    if known_class_ids is not None and not det_classes <= set(known_class_ids):
        raise ValueError(
            f"detections contain unknown class ids {det_classes - set(known_class_ids)}")

    aps = {}  # (class, thr) -> ap
    recs = {}
    for thr in iou_thresholds:
        for c in class_ids:
            pr = _pr_for_class(ground_truth, detections, c, thr)
            if pr is None:
                continue
            recalls, precisions, max_recall = pr
            aps[(c, thr)] = _average_precision(recalls, precisions)
            recs[(c, thr)] = max_recall

    def mean_over(thrs, table):
        vals = [table[(c, t)] for c in class_ids for t in thrs if (c, t) in table]
        return float(np.mean(vals)) if vals else 0.0

    map50 = mean_over([iou_thresholds[0]], aps)
    map50_95 = mean_over(iou_thresholds, aps)
    mar50_95 = mean_over(iou_thresholds, recs)

    # point precision/recall at IoU 0.5 over the full detection set
    n_gt = sum(len(v) for v in ground_truth.values())
    n_det = sum(len(v) for v in detections.values())
    tp = 0
    for iid, gts in ground_truth.items():
        dets = detections.get(iid, [])
        matched = _greedy_match(
            [g["box"] for g in gts], [g["class_id"] for g in gts],
            [d["box"] for d in dets], [d["class_id"] for d in dets],
            [d["confidence"] for d in dets], iou_thresholds[0])
        tp += len(matched)
    precision = tp / n_det if n_det > 0 else 0.0
    recall = tp / n_gt if n_gt > 0 else 0.0
    f1 = (2 * precision * recall / (precision + recall)
          if precision > 0 and recall > 0 else 0.0)
    return DetectionEvalResult(map50=map50, map50_95=map50_95, mar50_95=mar50_95,
                               precision=precision, recall=recall, f1=f1)
