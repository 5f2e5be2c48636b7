"""Detection evaluation: greedy matching and interpolated average precision."""

from dataclasses import dataclass

import numpy as np

from .geometry import iou, nms

RECALL_POINTS = np.linspace(0.0, 1.0, 101)


def detect(params, image, score_thr=0.05, nms_thr=0.6):
    """Decode one image into scored detections: list of (box, class, score).

    Scores are the joint confidence (class probability times quality).
    """
    from .model import forward

    dense = forward(params, image)
    joint = dense.joint
    boxes = dense.boxes
    dets = []
    loc_idx, cls_idx = np.nonzero(joint >= score_thr)
    for i, c in zip(loc_idx, cls_idx):
        dets.append((boxes[i], int(c), float(joint[i, c])))
    return nms(dets, nms_thr)


def _ap_from_flags(tp_flags, n_gt):
    if n_gt == 0:
        return None
    if len(tp_flags) == 0:
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(~np.asarray(tp_flags, dtype=bool))
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # 101-point interpolation: best precision at recall >= r
    ap = 0.0
    for r in RECALL_POINTS:
        mask = recall >= r
        ap += precision[mask].max() if mask.any() else 0.0
    return ap / len(RECALL_POINTS)


def average_precision(detections, ground_truths, iou_thr):
    """Per-class AP and their mean over classes that have ground truth.

    detections: iterable of (image_id, box, class_id, score).
    ground_truths: iterable of (image_id, boxes (K, 4), classes (K,)).
    A detection is a true positive when it matches a not-yet-matched
    ground-truth box of its class with IoU >= iou_thr (highest IoU wins).
    """
    gt_by_image = {}
    classes = set()
    for image_id, boxes, cls in ground_truths:
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        cls = np.asarray(cls, dtype=np.int64)
        gt_by_image[image_id] = (boxes, cls, np.zeros(len(cls), dtype=bool))
        classes.update(cls.tolist())
    for det in detections:
        classes.add(int(det[2]))

    per_class = {}
    for c in sorted(classes):
        n_gt = sum(int((cls == c).sum()) for _, cls, _ in gt_by_image.values())
        for _, _, matched in gt_by_image.values():
            matched[:] = False
        dets_c = [d for d in detections if int(d[2]) == c]
        order = sorted(range(len(dets_c)), key=lambda k: (-dets_c[k][3], k))
        tp_flags = []
        for k in order:
            image_id, box, _, _ = dets_c[k]
            entry = gt_by_image.get(image_id)
            best_iou, best_g = 0.0, -1
            if entry is not None:
                boxes, cls, matched = entry
                for g in np.flatnonzero(cls == c):
                    if matched[g]:
                        continue
                    v = iou(box, boxes[g])
                    if v > best_iou:
                        best_iou, best_g = v, g
            if best_g >= 0 and best_iou >= iou_thr:
                entry[2][best_g] = True
                tp_flags.append(True)
            else:
                tp_flags.append(False)
        per_class[c] = _ap_from_flags(tp_flags, n_gt)

    valid = [v for v in per_class.values() if v is not None]
    mean_ap = float(np.mean(valid)) if valid else 0.0
    return per_class, mean_ap


@dataclass
class EvalReport:
    ap50: float
    ap50_95: float
    per_class_ap50: dict

    def to_dict(self):
        return {
            "ap50": self.ap50,
            "ap50_95": self.ap50_95,
            "per_class_ap50": {str(k): v for k, v in self.per_class_ap50.items()},
        }


def evaluate(params, dataset, score_thr=0.05, nms_thr=0.6):
    """Decode + NMS every image, then sweep AP over IoU 0.5:0.95:0.05."""
    detections, ground_truths = [], []
    for image_id, sample in enumerate(dataset.samples):
        for box, c, score in detect(params, sample.image, score_thr, nms_thr):
            detections.append((image_id, box, c, score))
        ground_truths.append((image_id, sample.boxes, sample.classes))

    per_class_50, ap50 = average_precision(detections, ground_truths, 0.5)
    aps = [ap50]
    for thr in np.arange(0.55, 0.951, 0.05):
        _, ap = average_precision(detections, ground_truths, float(thr))
        aps.append(ap)
    return EvalReport(
        ap50=ap50,
        ap50_95=float(np.mean(aps)),
        per_class_ap50=per_class_50,
    )
