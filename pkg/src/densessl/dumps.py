"""JSON-lines dumps of dense teacher predictions and ground truth.

These let the assignment simulator run on serialized predictions without
any model in the loop. One line per image in both formats.
"""

import json

import numpy as np

from .errors import DumpFormatError
from .model import BASE_STRIDE, DenseMap, grid_centers


def predictions_to_jsonl(dense_maps):
    lines = []
    for image_id, dense in enumerate(dense_maps):
        lines.append(json.dumps({
            "image_id": image_id,
            "level_shapes": [list(s) for s in dense.level_shapes],
            "cls_logits": dense.cls_logits.tolist(),
            "quality_logit": dense.quality_logit.tolist(),
            "ltrb": dense.ltrb.tolist(),
        }))
    return "\n".join(lines) + "\n"


def jsonl_to_predictions(text):
    dense_maps = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            shapes = [tuple(s) for s in rec["level_shapes"]]
            centers, strides = [], []
            for lvl, (h, w) in enumerate(shapes):
                stride = BASE_STRIDE * (2 ** lvl)
                centers.append(grid_centers(h, w, stride))
                strides.append(np.full(h * w, float(stride)))
            dense_maps.append(DenseMap(
                centers=np.concatenate(centers),
                strides=np.concatenate(strides),
                cls_logits=np.asarray(rec["cls_logits"], dtype=np.float64),
                quality_logit=np.asarray(rec["quality_logit"], dtype=np.float64),
                ltrb=np.asarray(rec["ltrb"], dtype=np.float64),
                level_shapes=shapes,
            ))
            n = dense_maps[-1].centers.shape[0]
            if dense_maps[-1].cls_logits.shape[0] != n or \
                    dense_maps[-1].quality_logit.shape[0] != n or \
                    dense_maps[-1].ltrb.shape != (n, 4):
                raise ValueError("array sizes inconsistent with level_shapes")
        except (KeyError, ValueError, TypeError) as exc:
            raise DumpFormatError(f"prediction dump line {lineno}: {exc}") from None
    return dense_maps


def ground_truth_to_jsonl(samples):
    lines = []
    for image_id, sample in enumerate(samples):
        lines.append(json.dumps({
            "image_id": image_id,
            "boxes": np.asarray(sample.boxes).tolist(),
            "classes": np.asarray(sample.classes).tolist(),
        }))
    return "\n".join(lines) + "\n"


def jsonl_to_ground_truth(text):
    """Returns a list of (boxes, classes) ordered by image id."""
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            records.append((
                rec["image_id"],
                np.asarray(rec["boxes"], dtype=np.float64).reshape(-1, 4),
                np.asarray(rec["classes"], dtype=np.int64),
            ))
        except (KeyError, ValueError, TypeError) as exc:
            raise DumpFormatError(f"ground-truth dump line {lineno}: {exc}") from None
    records.sort(key=lambda r: r[0])
    return [(b, c) for _, b, c in records]
