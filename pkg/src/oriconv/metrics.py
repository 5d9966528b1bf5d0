"""Detection evaluation: average precision, false-positive taxonomy, mean
orientation error and throughput.

AP is the exact area under the all-point interpolated precision-recall curve
(precision envelope), integrated piecewise at the recall increments -- the
continuous integral, not a sampled approximation. False positives split into
localization errors (0.1 < IoU < 0.5 with some object), background confusions
(IoU < 0.1 with every object) and "other" (e.g. duplicates of an already
matched object).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .detect import Detection, HBox, OBox, iou_hbb, iou_obb
from .errors import ShapeError


@dataclass
class EvalResult:
    per_class_ap: dict
    map50: float
    loc_error_mean: tuple  # (dx mean, dy mean)
    loc_error_std: tuple
    loc_error_rate: float
    bg_confusion_rate: float
    mean_angular_error: float
    images_per_second: float

    def to_json(self) -> str:
        d = asdict(self)
        d["per_class_ap"] = {str(k): v for k, v in self.per_class_ap.items()}
        return json.dumps(d, indent=2, sort_keys=True)


def _det_iou(det: Detection, gt, oriented: bool) -> float:
    if oriented:
        return iou_obb(det.obox, gt[1]) if det.obox is not None else 0.0
    g = gt[0] if isinstance(gt, tuple) else gt
    return iou_hbb(det.hbox, g)


def _match_detections(detections, ground_truth, iou_threshold, oriented):
    """Greedy match by descending score; each ground truth used at most once.

    Returns (flags, best_iou, matched_idx) aligned with the sorted detection
    order, plus that order.
    """
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    used = [False] * len(ground_truth)
    flags = []
    best_ious = []
    matched = []
    for i in order:
        det = detections[i]
        best, best_g = 0.0, -1
        for g, gt in enumerate(ground_truth):
            v = _det_iou(det, gt, oriented)
            if v > best:
                best, best_g = v, g
        if best >= iou_threshold and best_g >= 0 and not used[best_g]:
            used[best_g] = True
            flags.append(True)
            matched.append(best_g)
        else:
            flags.append(False)
            matched.append(best_g)
        best_ious.append(best)
    return order, flags, best_ious, matched


def pr_curve(detections, ground_truth, iou_threshold=0.5, oriented=False):
    """(recall, precision) arrays at each detection rank, score-sorted."""
    n_gt = len(ground_truth)
    _, flags, _, _ = _match_detections(detections, ground_truth, iou_threshold, oriented)
    tp = np.cumsum(np.array(flags, dtype=np.float64))
    ranks = np.arange(1, len(flags) + 1, dtype=np.float64)
    recall = tp / max(n_gt, 1)
    precision = tp / ranks
    return recall, precision


def average_precision(detections, ground_truth, iou_threshold=0.5, oriented=False) -> float:
    """Area under the interpolated precision-recall curve.

    Zero ground truth with zero detections is the caller's signal to skip the
    class; with detections present the AP is 0.
    """
    if len(ground_truth) == 0:
        return 0.0
    if len(detections) == 0:
        return 0.0
    recall, precision = pr_curve(detections, ground_truth, iou_threshold, oriented)
    # precision envelope: running max from the high-recall end
    env = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_r = 0.0
    for r, p in zip(recall, env):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return float(ap)


def mean_average_precision(per_image_detections, per_image_gt, classes, iou_threshold=0.5, oriented=False):
    """Classwise AP over a whole image set; classes with neither ground truth
    nor detections are skipped. Returns (per_class dict, mAP)."""
    per_class = {}
    for cls in classes:
        dets = []
        gts = []
        for img_id, (im_dets, im_gts) in enumerate(zip(per_image_detections, per_image_gt)):
            for d in im_dets:
                if d.class_id == cls:
                    dets.append((img_id, d))
            for g in im_gts:
                if g[0] == cls:
                    gts.append((img_id, g[1]))
        if not gts and not dets:
            continue
        if not gts:
            per_class[cls] = 0.0
            continue
        ap = _average_precision_multi_image(dets, gts, iou_threshold, oriented)
        per_class[cls] = ap
    if not per_class:
        return per_class, 0.0
    return per_class, float(np.mean(list(per_class.values())))


def _average_precision_multi_image(dets, gts, iou_threshold, oriented):
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][1].score, i))
    gt_by_image = {}
    for g_idx, (img_id, g) in enumerate(gts):
        gt_by_image.setdefault(img_id, []).append((g_idx, g))
    used = [False] * len(gts)
    flags = []
    for i in order:
        img_id, det = dets[i]
        best, best_g = 0.0, -1
        for g_idx, g in gt_by_image.get(img_id, []):
            v = _det_iou(det, g, oriented)
            if v > best:
                best, best_g = v, g_idx
        if best >= iou_threshold and best_g >= 0 and not used[best_g]:
            used[best_g] = True
            flags.append(True)
        else:
            flags.append(False)
    tp = np.cumsum(np.array(flags, dtype=np.float64))
    ranks = np.arange(1, len(flags) + 1, dtype=np.float64)
    recall = tp / len(gts)
    precision = tp / ranks
    env = np.maximum.accumulate(precision[::-1])[::-1]
    ap, prev_r = 0.0, 0.0
    for r, p in zip(recall, env):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return float(ap)


LOC_LOW_IOU = 0.1
LOC_HIGH_IOU = 0.5


def error_taxonomy(detections, ground_truth, iou_threshold=0.5, oriented=False):
    """Classify every false positive and collect corner-gap statistics.

    A false positive with 0.1 < IoU < 0.5 against some object is a
    localization error; with IoU < 0.1 against every object a background
    confusion; anything else (duplicate of a matched object at IoU >= 0.5)
    lands in "other". The localization gap is the detection-to-object corner
    offset, per axis, normalized by the object's diagonal.
    Returns (loc_stats, counts) where counts partition the false positives.
    """
    order, flags, best_ious, matched = _match_detections(
        detections, ground_truth, iou_threshold, oriented
    )
    counts = {"localization": 0, "background": 0, "other": 0}
    gaps_x = []
    gaps_y = []
    for pos, i in enumerate(order):
        if flags[pos]:
            continue
        iou = best_ious[pos]
        if iou < LOC_LOW_IOU:
            counts["background"] += 1
        elif iou < LOC_HIGH_IOU:
            counts["localization"] += 1
            g = ground_truth[matched[pos]]
            gbox = g[0] if isinstance(g, tuple) else g
            diag = math.hypot(gbox.width, gbox.height)
            d = detections[i].hbox
            gaps_x.append(
                np.array([d.xmin - gbox.xmin, d.xmax - gbox.xmax]) / diag
            )
            gaps_y.append(
                np.array([d.ymin - gbox.ymin, d.ymax - gbox.ymax]) / diag
            )
        else:
            counts["other"] += 1
    if gaps_x:
        gx = np.concatenate(gaps_x)
        gy = np.concatenate(gaps_y)
        loc_stats = {
            "mean_x": float(gx.mean()),
            "mean_y": float(gy.mean()),
            "std_x": float(gx.std()),
            "std_y": float(gy.std()),
            "gaps_x": gx.tolist(),
            "gaps_y": gy.tolist(),
        }
    else:
        loc_stats = {
            "mean_x": 0.0, "mean_y": 0.0, "std_x": 0.0, "std_y": 0.0,
            "gaps_x": [], "gaps_y": [],
        }
    return loc_stats, counts


def angular_difference(a: float, b: float) -> float:
    """Smallest absolute difference between two angles in degrees."""
    d = abs(a - b) % 360.0
    return min(d, 360.0 - d)


def mean_orientation_error(pred_angles, true_angles):
    """Mean wrapped angular error in degrees plus the error-band shares used
    for failure analysis (share below 14 degrees, share above 160 degrees).

    Returns (mean_error, histogram) where histogram has keys
    'below_14', 'above_160' and 'errors'.
    """
    pred = np.asarray(pred_angles, dtype=np.float64)
    true = np.asarray(true_angles, dtype=np.float64)
    if pred.shape != true.shape:
        raise ShapeError(f"angle arrays differ: {pred.shape} vs {true.shape}")
    d = np.abs(pred - true) % 360.0
    err = np.minimum(d, 360.0 - d)
    hist = {
        "below_14": float(np.mean(err < 14.0)) if err.size else 0.0,
        "above_160": float(np.mean(err > 160.0)) if err.size else 0.0,
        "errors": err,
    }
    return float(err.mean()) if err.size else 0.0, hist


def throughput(model_fn, images, warmup: int = 1) -> float:
    """Wall-clock images/second of `model_fn` over `images`, after discarding
    `warmup` untimed iterations."""
    if warmup < 1:
        raise ShapeError("warmup must be >= 1")
    if len(images) == 0:
        raise ShapeError("cannot measure throughput of zero images")
    for i in range(min(warmup, len(images))):
        model_fn(images[i])
    t0 = time.perf_counter()
    for img in images:
        model_fn(img)
    dt = time.perf_counter() - t0
    if dt <= 0:
        raise ShapeError("timer resolution too coarse for this measurement")
    return len(images) / dt
