"""Ambiguity diagnostics: selection quality, assignment error counts,
and confidence-interval composition.

These reports need oracle ground truth, so they only run on datasets
that expose it (synthetic scenes always do).
"""

from dataclasses import dataclass, field

import numpy as np

from .assignment import Verdict, assign_boxes
from .geometry import iou
from .metrics import detect


class DegenerateStatisticsError(ValueError):
    """Correlation is undefined (constant or too-short input)."""


def pearson_cc(x, y):
    """Pearson correlation coefficient of two equal-length samples."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("inputs must be equal-length 1-d arrays")
    if x.size < 2:
        raise DegenerateStatisticsError("need at least two points")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt((xc * xc).sum() * (yc * yc).sum())
    if denom == 0.0:
        raise DegenerateStatisticsError("constant input has no correlation")
    return float((xc * yc).sum() / denom)


@dataclass
class SelectionReport:
    mean_iou: float
    topk_iou: float
    pcc: float | None  # None when scores or qualities are degenerate
    num_detections: int

    def to_dict(self):
        return {
            "mean_iou": self.mean_iou,
            "topk_iou": self.topk_iou,
            "pcc": self.pcc,
            "num_detections": self.num_detections,
        }


def selection_report(params, dataset, k=5, score_thr=0.05, nms_thr=0.6):
    """Localization quality of score-selected detections.

    A detection's quality is its best IoU against any same-class ground
    truth box (0 when there is none). ``topk_iou`` averages, over images,
    the mean quality of each image's k highest-scoring detections.
    """
    all_scores, all_quals, per_image_topk = [], [], []
    for sample in dataset.samples:
        dets = detect(params, sample.image, score_thr, nms_thr)
        quals = []
        for box, c, score in dets:
            same = [iou(box, g) for g, gc in zip(sample.boxes, sample.classes)
                    if gc == c]
            q = max(same) if same else 0.0
            all_scores.append(score)
            all_quals.append(q)
            quals.append(q)
        if quals:
            # dets come out of NMS already sorted by descending score
            per_image_topk.append(float(np.mean(quals[:k])))
    if not all_scores:
        raise ValueError("detector produced no detections; nothing to report")
    try:
        pcc = pearson_cc(all_scores, all_quals)
    except DegenerateStatisticsError:
        pcc = None
    return SelectionReport(
        mean_iou=float(np.mean(all_quals)),
        topk_iou=float(np.mean(per_image_topk)),
        pcc=pcc,
        num_detections=len(all_scores),
    )


@dataclass
class AmbiguityCounts:
    true_positives: int = 0
    false_positives: int = 0
    false_negatives: int = 0
    oracle_positives: int = 0

    def __iadd__(self, other):
        self.true_positives += other.true_positives
        self.false_positives += other.false_positives
        self.false_negatives += other.false_negatives
        self.oracle_positives += other.oracle_positives
        return self

    def to_dict(self):
        return {
            "true_positives": self.true_positives,
            "false_positives": self.false_positives,
            "false_negatives": self.false_negatives,
            "oracle_positives": self.oracle_positives,
        }


def ambiguity_counts(assignment, gt_boxes, gt_classes, centers):
    """Compare one image's assignment against the oracle assignment.

    The oracle is the supervised center-inside + smallest-area rule on
    true ground truth. A location counts as assigned-positive when it
    carries any nonzero foreground classification target (mined
    candidates included).
    """
    oracle = assign_boxes(gt_boxes, gt_classes, centers, soft=False)
    oracle_pos = oracle.verdict == Verdict.POSITIVE
    assigned_pos = assignment.assigned_positive()
    class_match = assignment.cls_channel == oracle.cls_channel

    tp = int(np.sum(assigned_pos & oracle_pos & class_match))
    fp = int(np.sum(assigned_pos & ~(oracle_pos & class_match)))
    fn = int(np.sum(oracle_pos & ~assigned_pos))
    return AmbiguityCounts(tp, fp, fn, int(oracle_pos.sum()))


def assignment_ambiguity_report(assignments, samples, centers):
    """Pool ambiguity counts over a dataset (one assignment per sample)."""
    total = AmbiguityCounts()
    for assignment, sample in zip(assignments, samples):
        total += ambiguity_counts(assignment, sample.boxes, sample.classes, centers)
    return total


@dataclass
class ConfidenceHistogram:
    bin_edges: np.ndarray
    positive_counts: np.ndarray
    negative_counts: np.ndarray

    @property
    def proportions(self):
        """Per-bin (positive, negative) fractions; zeros for empty bins."""
        total = self.positive_counts + self.negative_counts
        safe = np.where(total > 0, total, 1)
        return np.stack([self.positive_counts / safe,
                         self.negative_counts / safe], axis=1)

    def to_dict(self):
        return {
            "bin_edges": self.bin_edges.tolist(),
            "positive_counts": self.positive_counts.tolist(),
            "negative_counts": self.negative_counts.tolist(),
            "proportions": self.proportions.tolist(),
        }


def confidence_histogram(joint_max_per_image, oracle_pos_per_image, bins=10):
    """Bin locations by their best joint confidence; split by oracle verdict."""
    edges = np.linspace(0.0, 1.0, bins + 1)
    pos_counts = np.zeros(bins, dtype=np.int64)
    neg_counts = np.zeros(bins, dtype=np.int64)
    for joint_max, oracle_pos in zip(joint_max_per_image, oracle_pos_per_image):
        joint_max = np.asarray(joint_max, dtype=np.float64)
        oracle_pos = np.asarray(oracle_pos, dtype=bool)
        idx = np.clip(np.digitize(joint_max, edges) - 1, 0, bins - 1)
        for b in range(bins):
            in_bin = idx == b
            pos_counts[b] += int(np.sum(in_bin & oracle_pos))
            neg_counts[b] += int(np.sum(in_bin & ~oracle_pos))
    return ConfidenceHistogram(edges, pos_counts, neg_counts)


def threshold_sweep(teacher, dataset, sigmas, nms_thr=0.6):
    """Box-baseline ambiguity counts at each pseudo-box filter threshold."""
    from .model import forward
    from .pipeline import pseudo_boxes_from_dense

    results = {}
    dense_maps = [forward(teacher, s.image) for s in dataset.samples]
    centers = dense_maps[0].centers
    for sigma in sigmas:
        total = AmbiguityCounts()
        for dense, sample in zip(dense_maps, dataset.samples):
            boxes = pseudo_boxes_from_dense(dense, sigma, nms_thr)
            assignment = assign_boxes(
                np.stack([b[0] for b in boxes]) if boxes else np.zeros((0, 4)),
                np.array([b[1] for b in boxes], dtype=np.int64),
                centers,
                soft=False,
            )
            total += ambiguity_counts(assignment, sample.boxes, sample.classes, centers)
        results[float(sigma)] = total
    return results
