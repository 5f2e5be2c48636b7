"""Box arithmetic: IoU/GIoU (with analytic gradients), ltrb coding, NMS.

Boxes are (x1, y1, x2, y2) in continuous image pixel coordinates with
x1 < x2 and y1 < y2. Everything here is a pure function.
"""

from dataclasses import dataclass

import numpy as np


class DegenerateBoxError(ValueError):
    """A box with non-positive width or height was produced or supplied."""


class NotInsideError(ValueError):
    """A grid location center lies outside the box it should encode."""


def validate_box(box):
    """Return box as a float64 array of shape (4,), checking invariants."""
    b = np.asarray(box, dtype=np.float64)
    if b.shape != (4,):
        raise ValueError(f"box must have 4 coordinates, got shape {b.shape}")
    if not np.all(np.isfinite(b)):
        raise DegenerateBoxError(f"non-finite box {b}")
    if b[0] >= b[2] or b[1] >= b[3]:
        raise DegenerateBoxError(f"degenerate box {b}")
    return b


@dataclass(frozen=True)
class GridLocation:
    """A cell of the prediction grid at one pyramid level.

    The center sits at ((j + 0.5) * stride, (i + 0.5) * stride).
    """

    level: int
    i: int
    j: int
    stride: float

    @property
    def cx(self):
        return (self.j + 0.5) * self.stride

    @property
    def cy(self):
        return (self.i + 0.5) * self.stride


def box_area(box):
    return (box[2] - box[0]) * (box[3] - box[1])


def iou(a, b):
    """Intersection over union of two valid boxes, in [0, 1]."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = box_area(a) + box_area(b) - inter
    return inter / union


def giou(a, b):
    """Generalized IoU: iou minus enclosing-box slack, in (-1, 1]."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    inter = iw * ih if (iw > 0.0 and ih > 0.0) else 0.0
    union = box_area(a) + box_area(b) - inter
    cw = max(a[2], b[2]) - min(a[0], b[0])
    ch = max(a[3], b[3]) - min(a[1], b[1])
    c_area = cw * ch
    return inter / union - (c_area - union) / c_area


def iou_matrix(boxes_a, boxes_b):
    """Pairwise IoU between two (N, 4) / (M, 4) arrays of boxes."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union


def decode_ltrb(loc, d):
    """Turn (l, t, r, b) side distances at a grid location into a box."""
    l, t, r, b = d
    if l + r <= 0.0 or t + b <= 0.0:
        raise DegenerateBoxError(f"ltrb {d} decodes to a degenerate box")
    return np.array([loc.cx - l, loc.cy - t, loc.cx + r, loc.cy + b])


def encode_ltrb(loc, box):
    """Side distances from a location center to the box edges.

    The center must lie strictly inside the box so all distances are
    positive and decode is an exact inverse.
    """
    box = validate_box(box)
    if not center_inside(loc, box):
        raise NotInsideError(f"center ({loc.cx}, {loc.cy}) not inside {box}")
    return np.array([loc.cx - box[0], loc.cy - box[1],
                     box[2] - loc.cx, box[3] - loc.cy])


def center_inside(loc, box):
    """Strict containment test; a center exactly on an edge is outside."""
    return box[0] < loc.cx < box[2] and box[1] < loc.cy < box[3]


def _giou_grad_box(a, b):
    """d(giou(a, b)) / d(a) for fixed b, as a 4-vector."""
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    overlap = iw > 0.0 and ih > 0.0
    inter = iw * ih if overlap else 0.0
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    union = area_a + area_b - inter
    cw = max(ax2, bx2) - min(ax1, bx1)
    ch = max(ay2, by2) - min(ay1, by1)
    c_area = cw * ch

    # dI/da: intersection edges move only where a's edge is the binding one
    di = np.zeros(4)
    if overlap:
        if ax1 > bx1:
            di[0] = -ih
        if ay1 > by1:
            di[1] = -iw
        if ax2 < bx2:
            di[2] = ih
        if ay2 < by2:
            di[3] = iw
    da = np.array([-(ay2 - ay1), -(ax2 - ax1), (ay2 - ay1), (ax2 - ax1)])
    du = da - di
    # dC/da: enclosing edges move only where a's edge is the outer one
    dc = np.zeros(4)
    if ax1 < bx1:
        dc[0] = -ch
    if ay1 < by1:
        dc[1] = -cw
    if ax2 > bx2:
        dc[2] = ch
    if ay2 > by2:
        dc[3] = cw

    d_iou = (di * union - inter * du) / (union * union)
    d_slack = (dc - du) / c_area - (c_area - union) * dc / (c_area * c_area)
    return d_iou - d_slack


def giou_loss_and_grad(pred_ltrb, target, loc):
    """GIoU regression loss (1 - giou) and its exact gradient w.r.t. ltrb."""
    target = validate_box(target)
    pred_box = decode_ltrb(loc, pred_ltrb)
    loss = 1.0 - giou(pred_box, target)
    g_box = -_giou_grad_box(pred_box, target)
    # box = (cx - l, cy - t, cx + r, cy + b)
    grad = np.array([-g_box[0], -g_box[1], g_box[2], g_box[3]])
    return loss, grad


def nms(dets, iou_threshold):
    """Class-wise greedy non-maximum suppression.

    dets is a sequence of (box, class_id, score). Returns the kept
    detections in descending score order; ties break toward the earlier
    input index so the result is independent of input permutation.
    """
    order = sorted(range(len(dets)), key=lambda k: (-dets[k][2], k))
    kept = []
    for k in order:
        box, cls, score = dets[k]
        suppressed = False
        for box_k, cls_k, _ in kept:
            if cls_k == cls and iou(box, box_k) > iou_threshold:
                suppressed = True
                break
        if not suppressed:
            kept.append((np.asarray(box, dtype=np.float64), cls, score))
    return kept
