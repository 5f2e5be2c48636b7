"""Joint-confidence scoring and the classification / quality losses.

The detector head predicts per-location class logits and one quality
logit. Their sigmoid product is the joint confidence used both for
scoring detections and as the quantity the classification loss is
computed on, so gradient flows to both branches.

Soft classification targets put a single value in (0, 1] on one class
channel: the box IoU against ground truth on labeled data, the teacher's
best joint score on unlabeled data, or nothing (all zeros) on negatives.
"""

import enum
from dataclasses import dataclass, field

import numpy as np

from .geometry import iou

PROB_EPS = 1e-6  # probability clamp before logarithms


class TargetSource(enum.Enum):
    LABELED_IOU = "labeled_iou"
    UNLABELED_TEACHER = "unlabeled_teacher"
    NEGATIVE = "negative"


@dataclass
class ClassTarget:
    """Soft classification target: at most one nonzero channel."""

    values: np.ndarray
    source: TargetSource

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        nonzero = np.flatnonzero(self.values)
        if nonzero.size > 1:
            raise ValueError("class target may have at most one nonzero channel")


def joint_confidence(cls_scores, iou_score):
    """Elementwise product of class probabilities and the quality score."""
    return np.asarray(cls_scores, dtype=np.float64) * iou_score


def labeled_target(pred_box, gt_box, gt_class, num_classes):
    """IoU-based soft label: IoU(pred, gt) on the ground-truth channel."""
    values = np.zeros(num_classes)
    values[gt_class] = iou(pred_box, gt_box)
    return ClassTarget(values, TargetSource.LABELED_IOU)


def unlabeled_target(teacher_joint):
    """Teacher's best joint score on its argmax channel (ties to lowest index)."""
    teacher_joint = np.asarray(teacher_joint, dtype=np.float64)
    values = np.zeros_like(teacher_joint)
    c = int(np.argmax(teacher_joint))
    values[c] = teacher_joint[c]
    return ClassTarget(values, TargetSource.UNLABELED_TEACHER)


def _clip(p):
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def _bce(p, t):
    pc = _clip(p)
    return -(t * np.log(pc) + (1.0 - t) * np.log1p(-pc))


def focal_loss_batch(cls_logits, quality_logits, targets, gamma, joint=True):
    """Quality-focal classification loss over a batch of locations.

    Per class: |S - p|^gamma * BCE(p, S), where p is the joint confidence
    sigmoid(cls) * sigmoid(quality) when ``joint`` is set, or sigmoid(cls)
    alone otherwise (plain-head mode; then no gradient reaches the
    quality logit).

    Returns (per-location loss sums, grad wrt cls logits, grad wrt
    quality logits).
    """
    cls_logits = np.asarray(cls_logits, dtype=np.float64)
    quality_logits = np.asarray(quality_logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    p = 1.0 / (1.0 + np.exp(-cls_logits))
    q = 1.0 / (1.0 + np.exp(-quality_logits))
    s = p * q[..., None] if joint else p

    sc = _clip(s)
    bce = -(targets * np.log(sc) + (1.0 - targets) * np.log1p(-sc))
    diff = s - targets
    if gamma == 0.0:
        mod = np.ones_like(diff)
        dmod = np.zeros_like(diff)
    else:
        absd = np.abs(diff)
        mod = absd ** gamma
        dmod = gamma * absd ** (gamma - 1.0) * np.sign(diff)
    inside = (s > PROB_EPS) & (s < 1.0 - PROB_EPS)
    dbce = np.where(inside, (sc - targets) / (sc * (1.0 - sc)), 0.0)
    dl_ds = dmod * bce + mod * dbce

    if joint:
        grad_cls = dl_ds * q[..., None] * p * (1.0 - p)
        grad_quality = np.sum(dl_ds * p, axis=-1) * q * (1.0 - q)
    else:
        grad_cls = dl_ds * p * (1.0 - p)
        grad_quality = np.zeros_like(quality_logits)
    return np.sum(mod * bce, axis=-1), grad_cls, grad_quality


def united_focal_loss(cls_logits, iou_logit, target, gamma):
    """Focal-style classification loss on the joint confidence, one location.

    Gradient flows through the product to both the class logits and the
    quality logit.
    """
    values = target.values if isinstance(target, ClassTarget) else np.asarray(target)
    loss, grad_cls, grad_q = focal_loss_batch(
        np.asarray(cls_logits, dtype=np.float64)[None, :],
        np.array([iou_logit], dtype=np.float64),
        values[None, :],
        gamma,
        joint=True,
    )
    return float(loss[0]), grad_cls[0], float(grad_q[0])


def bce_logit_batch(logits, targets):
    """Binary cross entropy against probabilities sigmoid(logits).

    Returns (per-sample losses, grad wrt logits). The logit gradient is
    exactly sigmoid(logit) - target.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    p = 1.0 / (1.0 + np.exp(-logits))
    return _bce(p, targets), p - targets


def iou_branch_loss(pred_iou, target_iou):
    """BCE between the predicted quality probability and an IoU target.

    Returns (loss, gradient with respect to the quality logit).
    """
    loss = float(_bce(np.float64(pred_iou), np.float64(target_iou)))
    return loss, float(pred_iou - target_iou)
