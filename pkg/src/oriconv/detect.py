"""Boxes, anchors, a minimal region-proposal head, IoU, matching, NMS and the
composite detection loss.

Axis-aligned boxes are corner-coded {xmin, ymin, xmax, ymax}; oriented boxes
are {xc, yc, w, h, theta} with theta in degrees, canonicalized into [0, 90) by
swapping width/height. Box coordinates live in the continuous pixel-edge
frame (pixel centers at integer + 0.5). Box angles follow the package
convention: counterclockwise as displayed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, conv2d, conv2d_backward


@dataclass
class HBox:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise ShapeError(
                f"degenerate box [{self.xmin},{self.ymin},{self.xmax},{self.ymax}]"
            )

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin

    @property
    def center(self):
        return (0.5 * (self.xmin + self.xmax), 0.5 * (self.ymin + self.ymax))

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_array(self) -> np.ndarray:
        return np.array([self.xmin, self.ymin, self.xmax, self.ymax], dtype=np.float64)


@dataclass
class OBox:
    xc: float
    yc: float
    w: float
    h: float
    theta: float  # degrees in [0, 90)

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ShapeError(f"oriented box needs positive size, got {self.w}x{self.h}")
        t = self.theta % 180.0
        if t >= 90.0:
            t -= 90.0
            self.w, self.h = self.h, self.w
        self.theta = t

    @property
    def area(self) -> float:
        return self.w * self.h

    def corners(self) -> np.ndarray:
        """4x2 corner array (x, y) in consistent winding order."""
        t = math.radians(self.theta)
        # width axis rotated counterclockwise-as-displayed; y grows downward
        ux, uy = math.cos(t), -math.sin(t)
        vx, vy = math.sin(t), math.cos(t)
        hw, hh = 0.5 * self.w, 0.5 * self.h
        pts = []
        for su, sv in ((1, 1), (-1, 1), (-1, -1), (1, -1)):
            pts.append(
                (
                    self.xc + su * hw * ux + sv * hh * vx,
                    self.yc + su * hw * uy + sv * hh * vy,
                )
            )
        return np.array(pts, dtype=np.float64)

    def hull(self) -> HBox:
        """Tight axis-aligned hull."""
        c = self.corners()
        return HBox(c[:, 0].min(), c[:, 1].min(), c[:, 0].max(), c[:, 1].max())

    def as_array(self) -> np.ndarray:
        return np.array([self.xc, self.yc, self.w, self.h, self.theta], dtype=np.float64)


@dataclass
class Detection:
    class_id: int
    score: float
    hbox: HBox = None
    obox: OBox = None

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ShapeError(f"non-finite detection score {self.score}")
        if self.hbox is None and self.obox is not None:
            self.hbox = self.obox.hull()


def iou_hbb(a: HBox, b: HBox) -> float:
    ix = min(a.xmax, b.xmax) - max(a.xmin, b.xmin)
    iy = min(a.ymax, b.ymax) - max(a.ymin, b.ymin)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def _polygon_area(pts: np.ndarray) -> float:
    if len(pts) < 3:
        return 0.0
    x = pts[:, 0]
    y = pts[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _ensure_ccw(pts: np.ndarray) -> np.ndarray:
    x = pts[:, 0]
    y = pts[:, 1]
    signed = 0.5 * (np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))
    return pts if signed >= 0 else pts[::-1]


def _clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of `subject` by convex `clip` (CCW)."""
    output = list(subject)
    n = len(clip)
    for i in range(n):
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        input_pts = output
        output = []
        if not input_pts:
            break
        prev = input_pts[-1]
        prev_side = ex * (prev[1] - ay) - ey * (prev[0] - ax)
        for cur in input_pts:
            cur_side = ex * (cur[1] - ay) - ey * (cur[0] - ax)
            if (cur_side >= 0) != (prev_side >= 0):
                # edge prev->cur crosses the clip line at parameter t
                dx, dy = cur[0] - prev[0], cur[1] - prev[1]
                denom = ex * dy - ey * dx
                if denom != 0:
                    t = -prev_side / denom
                    output.append((prev[0] + t * dx, prev[1] + t * dy))
            if cur_side >= 0:
                output.append(cur)
            prev, prev_side = cur, cur_side
    return np.array(output, dtype=np.float64) if output else np.zeros((0, 2))


def iou_obb(a: OBox, b: OBox) -> float:
    """Oriented IoU via convex polygon clipping; equals iou_hbb at theta=0."""
    ca = _ensure_ccw(a.corners())
    cb = _ensure_ccw(b.corners())
    inter = _polygon_area(_clip_polygon(ca, cb))
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


# ---------------------------------------------------------------------------
# anchors and target assignment


@dataclass
class AnchorSet:
    """Dense anchors tiling one feature level."""

    boxes: np.ndarray  # [N, 4] xmin/ymin/xmax/ymax
    stride: int
    feature_hw: tuple

    @classmethod
    def build(cls, feature_hw, stride, scales, ratios):
        h, w = feature_hw
        ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        cx = (xs + 0.5) * stride
        cy = (ys + 0.5) * stride
        boxes = []
        for s in scales:
            for r in ratios:
                bw = s * math.sqrt(r)
                bh = s / math.sqrt(r)
                boxes.append(
                    np.stack(
                        (cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2), axis=-1
                    )
                )
        # row-major over (y, x, anchor-kind)
        arr = np.stack(boxes, axis=2).reshape(-1, 4)
        return cls(arr, stride, (h, w))

    @property
    def per_cell(self) -> int:
        return self.boxes.shape[0] // (self.feature_hw[0] * self.feature_hw[1])


def _iou_matrix(anchors: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Vectorized axis-aligned IoU between [N,4] anchors and [G,4] boxes."""
    if len(gt) == 0:
        return np.zeros((anchors.shape[0], 0))
    ix = np.minimum(anchors[:, None, 2], gt[None, :, 2]) - np.maximum(
        anchors[:, None, 0], gt[None, :, 0]
    )
    iy = np.minimum(anchors[:, None, 3], gt[None, :, 3]) - np.maximum(
        anchors[:, None, 1], gt[None, :, 1]
    )
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    area_a = (anchors[:, 2] - anchors[:, 0]) * (anchors[:, 3] - anchors[:, 1])
    area_g = (gt[:, 2] - gt[:, 0]) * (gt[:, 3] - gt[:, 1])
    return inter / (area_a[:, None] + area_g[None, :] - inter)


def encode_hbb(anchor: np.ndarray, gt: HBox) -> np.ndarray:
    """Standard 4-offset log-space encoding of a box against an anchor."""
    wa = anchor[2] - anchor[0]
    ha = anchor[3] - anchor[1]
    xa = 0.5 * (anchor[0] + anchor[2])
    ya = 0.5 * (anchor[1] + anchor[3])
    xc, yc = gt.center
    return np.array(
        [
            (xc - xa) / wa,
            (yc - ya) / ha,
            math.log(gt.width / wa),
            math.log(gt.height / ha),
        ]
    )


def decode_hbb(anchor: np.ndarray, t: np.ndarray) -> HBox:
    wa = anchor[2] - anchor[0]
    ha = anchor[3] - anchor[1]
    xa = 0.5 * (anchor[0] + anchor[2])
    ya = 0.5 * (anchor[1] + anchor[3])
    xc = t[0] * wa + xa
    yc = t[1] * ha + ya
    w = math.exp(min(t[2], 8.0)) * wa
    h = math.exp(min(t[3], 8.0)) * ha
    return HBox(xc - w / 2, yc - h / 2, xc + w / 2, yc + h / 2)


def encode_obb(anchor: np.ndarray, gt: OBox) -> np.ndarray:
    """HBB offsets of the oriented center/size plus theta/90 as fifth offset
    (anchors are axis-aligned, reference angle 0)."""
    wa = anchor[2] - anchor[0]
    ha = anchor[3] - anchor[1]
    xa = 0.5 * (anchor[0] + anchor[2])
    ya = 0.5 * (anchor[1] + anchor[3])
    return np.array(
        [
            (gt.xc - xa) / wa,
            (gt.yc - ya) / ha,
            math.log(gt.w / wa),
            math.log(gt.h / ha),
            gt.theta / 90.0,
        ]
    )


def decode_obb(anchor: np.ndarray, o: np.ndarray) -> OBox:
    wa = anchor[2] - anchor[0]
    ha = anchor[3] - anchor[1]
    xa = 0.5 * (anchor[0] + anchor[2])
    ya = 0.5 * (anchor[1] + anchor[3])
    return OBox(
        o[0] * wa + xa,
        o[1] * ha + ya,
        math.exp(min(o[2], 8.0)) * wa,
        math.exp(min(o[3], 8.0)) * ha,
        o[4] * 90.0,
    )


@dataclass
class MatchResult:
    labels: np.ndarray  # rpn: 1 pos / 0 neg / -1 ignore; head: class id, 0 = bg, -1 ignore
    hbb_targets: np.ndarray  # [N, 4]
    obb_targets: np.ndarray  # [N, 5]
    matched_gt: np.ndarray  # [N] index into gt list, -1 if none


RPN_POS_IOU = 0.7
RPN_NEG_IOU = 0.3
HEAD_POS_IOU = 0.5


def match_anchors(anchors: AnchorSet, gt_boxes, gt_classes=None, stage="rpn") -> MatchResult:
    """Assign labels and regression targets to anchors.

    RPN stage: IoU >= 0.7 positive, <= 0.3 negative, in between ignored; the
    best anchor of each ground-truth box is forced positive so no object goes
    unsupervised (the usual two-stage-detector convention). Head stage:
    IoU >= 0.5 takes the matched class, everything else is background.
    gt_boxes entries may be HBox or (HBox, OBox) pairs.
    """
    n = anchors.boxes.shape[0]
    labels = np.full(n, -1 if stage == "rpn" else 0, dtype=np.int64)
    hbb_t = np.zeros((n, 4))
    obb_t = np.zeros((n, 5))
    matched = np.full(n, -1, dtype=np.int64)

    hb = []
    ob = []
    for g in gt_boxes:
        if isinstance(g, tuple):
            hb.append(g[0])
            ob.append(g[1])
        else:
            hb.append(g)
            ob.append(None)
    if not hb:
        if stage == "rpn":
            labels[:] = 0
        return MatchResult(labels, hbb_t, obb_t, matched)

    gt_arr = np.stack([b.as_array() for b in hb])
    iou = _iou_matrix(anchors.boxes, gt_arr)
    best_gt = np.argmax(iou, axis=1)
    best_iou = iou[np.arange(n), best_gt]

    if stage == "rpn":
        labels[best_iou <= RPN_NEG_IOU] = 0
        labels[best_iou >= RPN_POS_IOU] = 1
        # force the best anchor per ground truth positive
        for g in range(len(hb)):
            a = int(np.argmax(iou[:, g]))
            if iou[a, g] > 0:
                labels[a] = 1
                best_gt[a] = g
        pos = labels == 1
    else:
        pos = best_iou >= HEAD_POS_IOU
        classes = (
            np.asarray(gt_classes, dtype=np.int64)
            if gt_classes is not None
            else np.ones(len(hb), dtype=np.int64)
        )
        labels[pos] = classes[best_gt[pos]]

    for a in np.flatnonzero(pos):
        g = best_gt[a]
        matched[a] = g
        hbb_t[a] = encode_hbb(anchors.boxes[a], hb[g])
        if ob[g] is not None:
            obb_t[a] = encode_obb(anchors.boxes[a], ob[g])
        else:
            obb_t[a, :4] = hbb_t[a]
    return MatchResult(labels, hbb_t, obb_t, matched)


# ---------------------------------------------------------------------------
# losses


def smooth_l1(x: np.ndarray) -> np.ndarray:
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def smooth_l1_grad(x: np.ndarray) -> np.ndarray:
    return np.clip(x, -1.0, 1.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def binary_ce_with_logits(logits: np.ndarray, targets: np.ndarray):
    """Per-element stable BCE and its gradient w.r.t. the logits."""
    loss = np.maximum(logits, 0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))
    grad = sigmoid(logits) - targets
    return loss, grad


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_ce(logits: np.ndarray, labels: np.ndarray):
    """Rowwise cross-entropy with integer labels; returns (loss[N], grad[N,K]).
    Computed as logsumexp(z) - z[label], which is non-negative by construction."""
    n = logits.shape[0]
    zmax = logits.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(logits - zmax).sum(axis=1))
    loss = lse - logits[np.arange(n), labels]
    grad = softmax(logits)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad


def composite_loss(predictions: dict, targets: dict, lambdas=(1.0, 1.0, 1.0, 1.0, 1.0)):
    """Two-stage detection loss: proposal term plus head term.

    total = l1/N_cls * sum BCE(p, p*)        over sampled proposal anchors
          + l2/N_reg * sum p* smoothL1(t-t*) over positive proposal anchors
          + l3/N*_cls * sum CE(c, c*)        over sampled head anchors
          + l4/N*_reg * sum [c*>=1] smoothL1(h-h*)
          + l5/N*_reg * sum [c*>=1] smoothL1(o-o*)

    predictions: rpn_logits [N], rpn_offsets [N,4], cls_logits [M,K+1],
    hbb_offsets [M,4], obb_offsets [M,5]. targets mirror the offset keys and
    add rpn_labels [N] (1/0/-1 ignore) and cls_labels [M] (0 = background,
    -1 ignore). Regression terms are 0 (not NaN) when there are no positives.
    Returns (total, components, grads).
    """
    l1, l2, l3, l4, l5 = lambdas
    comps = {}
    grads = {}

    rl = targets["rpn_labels"]
    sampled = rl >= 0
    n_cls = max(int(sampled.sum()), 1)
    loss_b, grad_b = binary_ce_with_logits(
        predictions["rpn_logits"], (rl == 1).astype(np.float64)
    )
    comps["rpn_cls"] = float(loss_b[sampled].sum()) / n_cls
    gb = np.where(sampled, grad_b, 0.0) / n_cls
    grads["rpn_logits"] = l1 * gb

    pos = rl == 1
    n_reg = max(int(pos.sum()), 1)
    diff = predictions["rpn_offsets"] - targets["rpn_offsets"]
    comps["rpn_reg"] = float(smooth_l1(diff[pos]).sum()) / n_reg
    gr = np.where(pos[:, None], smooth_l1_grad(diff), 0.0) / n_reg
    grads["rpn_offsets"] = l2 * gr

    cl = targets["cls_labels"]
    csampled = cl >= 0
    m_cls = max(int(csampled.sum()), 1)
    loss_c, grad_c = softmax_ce(predictions["cls_logits"], np.maximum(cl, 0))
    comps["head_cls"] = float(loss_c[csampled].sum()) / m_cls
    gc = np.where(csampled[:, None], grad_c, 0.0) / m_cls
    grads["cls_logits"] = l3 * gc

    cpos = cl >= 1
    m_reg = max(int(cpos.sum()), 1)
    dh = predictions["hbb_offsets"] - targets["hbb_offsets"]
    comps["head_hbb"] = float(smooth_l1(dh[cpos]).sum()) / m_reg
    grads["hbb_offsets"] = l4 * np.where(cpos[:, None], smooth_l1_grad(dh), 0.0) / m_reg

    do = predictions["obb_offsets"] - targets["obb_offsets"]
    comps["head_obb"] = float(smooth_l1(do[cpos]).sum()) / m_reg
    grads["obb_offsets"] = l5 * np.where(cpos[:, None], smooth_l1_grad(do), 0.0) / m_reg

    total = (
        l1 * comps["rpn_cls"]
        + l2 * comps["rpn_reg"]
        + l3 * comps["head_cls"]
        + l4 * comps["head_hbb"]
        + l5 * comps["head_obb"]
    )
    return total, comps, grads


# ---------------------------------------------------------------------------
# NMS and region proposals


def nms(detections, iou_threshold: float, oriented: bool = False):
    """Greedy NMS by descending score, deterministic on ties (insertion
    order); suppression uses oriented or axis-aligned IoU."""
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    keep = []
    for i in order:
        d = detections[i]
        ok = True
        for j in keep:
            k = detections[j]
            if oriented and d.obox is not None and k.obox is not None:
                v = iou_obb(d.obox, k.obox)
            else:
                v = iou_hbb(d.hbox, k.hbox)
            if v > iou_threshold:
                ok = False
                break
        if ok:
            keep.append(i)
    return [detections[i] for i in keep]


def assign_pyramid_level(w: float, h: float, n_levels: int, k0: int = 1, s0: float = 16.0) -> int:
    """Scale-to-level rule: k = clamp(floor(k0 + log2(sqrt(w*h)/s0)))."""
    k = math.floor(k0 + math.log2(max(math.sqrt(w * h), 1e-9) / s0))
    return int(min(max(k, 0), n_levels - 1))


@dataclass
class Roi:
    box: HBox
    score: float
    level: int


@dataclass
class RpnHead:
    """3x3 conv head emitting per-anchor objectness and 4 box offsets."""

    weights: Tensor  # [3, 3, Cin, A*5]
    bias: Tensor  # [A*5]

    @property
    def anchors_per_cell(self) -> int:
        return self.weights.shape[3] // 5


def rpn_head_apply(features: Tensor, head: RpnHead) -> Tensor:
    out = conv2d(features, head.weights, stride=1, padding=1)
    return out + head.bias[None, None, :]


def propose_rois(
    logits: np.ndarray,
    offsets: np.ndarray,
    anchors: AnchorSet,
    n_levels: int,
    top_k: int = 16,
    nms_iou: float = 0.7,
    k0: int = 1,
    s0: float = 16.0,
):
    """Turn per-anchor scores and offsets into regions of interest: decode the
    best-scoring candidates, NMS at `nms_iou`, keep top_k, and assign each a
    pyramid level from its decoded size. Deterministic: descending score,
    anchor index on ties."""
    order = sorted(range(len(logits)), key=lambda i: (-logits[i], i))
    cand = []
    for i in order[: max(4 * top_k, 64)]:
        try:
            box = decode_hbb(anchors.boxes[i], offsets[i])
        except ShapeError:
            continue
        cand.append(Detection(0, float(sigmoid(np.array([logits[i]]))[0]), hbox=box))
    kept = nms(cand, nms_iou)[:top_k]
    return [
        Roi(d.hbox, d.score, assign_pyramid_level(d.hbox.width, d.hbox.height, n_levels, k0, s0))
        for d in kept
    ]


def rpn_forward(
    features: Tensor,
    head: RpnHead,
    anchors: AnchorSet,
    n_levels: int,
    top_k: int = 16,
    nms_iou: float = 0.7,
    k0: int = 1,
    s0: float = 16.0,
):
    """Score anchors, decode offsets, and propose regions of interest.

    Returns (logits [N], offsets [N,4], rois); see `propose_rois` for the
    selection rules.
    """
    raw = rpn_head_apply(features, head)
    h, w, _ = raw.shape
    a = head.anchors_per_cell
    raw = raw.reshape(h * w * a, 5)
    logits = raw[:, 0]
    offsets = raw[:, 1:5]
    rois = propose_rois(logits, offsets, anchors, n_levels, top_k, nms_iou, k0, s0)
    return logits, offsets, rois
