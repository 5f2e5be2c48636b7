"""Synthetic shape scenes, labeled/unlabeled splits, and augmentation.

Scenes are 64x64 RGB images with 1-4 colored shapes (disk, square,
triangle) on a noisy background. Ground truth boxes are the tight pixel
bounds of each rendered shape, so every detection metric has an exact
oracle. Everything is deterministic from integer seeds.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DumpFormatError
from .geometry import iou

CLASS_NAMES = ("disk", "square", "triangle")

_PALETTE = np.array([
    [0.85, 0.25, 0.25],  # disk
    [0.25, 0.80, 0.30],  # square
    [0.25, 0.35, 0.90],  # triangle
])


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    num_classes: int = 3
    min_objects: int = 1
    max_objects: int = 4
    min_size: float = 8.0
    max_size: float = 32.0
    noise_amp: float = 0.2
    max_pair_iou: float = 0.5  # rendered boxes stay below this pairwise

    def __post_init__(self):
        if self.num_classes != len(CLASS_NAMES):
            raise ConfigError("scene generator supports exactly 3 classes")
        if not (0 < self.min_objects <= self.max_objects):
            raise ConfigError("bad object count range")
        if not (0 < self.min_size <= self.max_size <= min(self.height, self.width)):
            raise ConfigError("bad object size range")


@dataclass
class Sample:
    """One scene. GT on unlabeled samples is for diagnostics only."""

    image: np.ndarray  # (H, W, 3) in [0, 1]
    boxes: np.ndarray  # (K, 4)
    classes: np.ndarray  # (K,) int
    split: str = "labeled"  # "labeled" | "unlabeled"
    seed: int = 0


def _shape_mask(cls, cx, cy, size, px, py):
    if cls == 0:  # disk
        r = size / 2.0
        return (px - cx) ** 2 + (py - cy) ** 2 <= r * r
    if cls == 1:  # square
        h = size / 2.0
        return (np.abs(px - cx) <= h) & (np.abs(py - cy) <= h)
    # upward triangle: apex at top, base at bottom, via half-plane tests
    h = size / 2.0
    ax, ay = cx, cy - h
    bx, by = cx - h, cy + h
    dx, dy = cx + h, cy + h
    def side(x1, y1, x2, y2):
        return (px - x1) * (y2 - y1) - (py - y1) * (x2 - x1)
    s1, s2, s3 = side(ax, ay, dx, dy), side(dx, dy, bx, by), side(bx, by, ax, ay)
    return (s1 <= 0) & (s2 <= 0) & (s3 <= 0)  # a -> d -> b is clockwise


def generate_scene(seed, spec=SceneSpec(), split="labeled"):
    """Render one scene deterministically from its seed."""
    rng = np.random.default_rng(seed)
    h, w = spec.height, spec.width
    image = 0.15 + spec.noise_amp * rng.random((h, w, 3))
    py, px = np.mgrid[0:h, 0:w] + 0.5  # pixel centers

    n_objects = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    boxes, classes = [], []
    for _ in range(n_objects):
        for _attempt in range(60):
            cls = int(rng.integers(spec.num_classes))
            size = float(rng.uniform(spec.min_size, spec.max_size))
            margin = size / 2.0 + 1.0
            cx = float(rng.uniform(margin, w - margin))
            cy = float(rng.uniform(margin, h - margin))
            mask = _shape_mask(cls, cx, cy, size, px, py)
            if not mask.any():
                continue
            ys, xs = np.nonzero(mask)
            box = np.array([xs.min(), ys.min(), xs.max() + 1.0, ys.max() + 1.0])
            if all(iou(box, b) < spec.max_pair_iou for b in boxes):
                color = _PALETTE[cls] * rng.uniform(0.7, 1.3, size=3)
                image[mask] = np.clip(color, 0.0, 1.0)
                boxes.append(box)
                classes.append(cls)
                break
    image = np.clip(image, 0.0, 1.0)
    return Sample(
        image=image,
        boxes=np.array(boxes, dtype=np.float64).reshape(-1, 4),
        classes=np.array(classes, dtype=np.int64),
        split=split,
        seed=seed,
    )


def flip_boxes(boxes, width):
    """Mirror boxes horizontally: x1' = W - x2, x2' = W - x1."""
    out = np.asarray(boxes, dtype=np.float64).copy().reshape(-1, 4)
    out[:, [0, 2]] = width - out[:, [2, 0]]
    return out


def weak_augment(sample, seed):
    """Random horizontal flip (p = 0.5). Returns (image, boxes, flipped)."""
    rng = np.random.default_rng(seed)
    flipped = bool(rng.random() < 0.5)
    if not flipped:
        return sample.image, sample.boxes, False
    return (
        sample.image[:, ::-1].copy(),
        flip_boxes(sample.boxes, sample.image.shape[1]),
        True,
    )


def strong_augment(weak_image, seed, jitter=True, cutout=True):
    """Photometric jitter plus one cutout rectangle, on top of the weak view.

    Geometry is shared with the weak view, so the teacher-student dense
    correspondence stays the identity.
    """
    rng = np.random.default_rng(seed)
    img = weak_image.copy()
    if jitter:
        # mild: strong enough to demand invariance, weak enough to keep
        # color semantics intact
        scale = rng.uniform(0.85, 1.15, size=3)
        shift = rng.uniform(-0.05, 0.05, size=3)
        img = np.clip(img * scale + shift, 0.0, 1.0)
    if cutout:
        h, w = img.shape[:2]
        side = int(rng.uniform(8, 24))
        y0 = int(rng.integers(0, max(h - side, 0) + 1))
        x0 = int(rng.integers(0, max(w - side, 0) + 1))
        img[y0:y0 + side, x0:x0 + side] = 0.5
    return img


def align_teacher_to_student(dense, mirrored=False):
    """Map a teacher dense map onto the student's grid.

    With shared weak/strong geometry this is the identity. If the views
    differ by a horizontal flip, grid columns are mirrored per level and
    the left/right side distances swap.
    """
    if not mirrored:
        return dense
    out_cls, out_q, out_ltrb = [], [], []
    offset = 0
    for (fh, fw) in dense.level_shapes:
        n = fh * fw
        idx = np.arange(n).reshape(fh, fw)[:, ::-1].ravel()
        out_cls.append(dense.cls_logits[offset:offset + n][idx])
        out_q.append(dense.quality_logit[offset:offset + n][idx])
        ltrb = dense.ltrb[offset:offset + n][idx]
        out_ltrb.append(ltrb[:, [2, 1, 0, 3]])  # swap l and r
        offset += n
    from .model import DenseMap
    return DenseMap(
        centers=dense.centers.copy(),
        strides=dense.strides.copy(),
        cls_logits=np.concatenate(out_cls),
        quality_logit=np.concatenate(out_q),
        ltrb=np.concatenate(out_ltrb),
        level_shapes=list(dense.level_shapes),
    )


def make_splits(n_scenes, labeled_fraction, seed):
    """Disjoint, exhaustive, deterministic labeled/unlabeled id split."""
    if not (0.0 <= labeled_fraction <= 1.0):
        raise ConfigError("labeled_fraction must be in [0, 1]")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_scenes)
    n_labeled = round(n_scenes * labeled_fraction)
    return np.sort(perm[:n_labeled]).tolist(), np.sort(perm[n_labeled:]).tolist()


@dataclass
class Dataset:
    samples: list
    spec: SceneSpec = field(default_factory=SceneSpec)

    @property
    def labeled(self):
        return [s for s in self.samples if s.split == "labeled"]

    @property
    def unlabeled(self):
        return [s for s in self.samples if s.split == "unlabeled"]


def generate_dataset(n_scenes, labeled_fraction, seed, spec=SceneSpec()):
    """Scenes seeded as seed * 1_000_003 + id; split drawn from the same seed."""
    labeled_ids, _ = make_splits(n_scenes, labeled_fraction, seed)
    labeled_set = set(labeled_ids)
    samples = []
    for i in range(n_scenes):
        split = "labeled" if i in labeled_set else "unlabeled"
        samples.append(generate_scene(seed * 1_000_003 + i, spec, split=split))
    return Dataset(samples, spec)


def save_dataset(dataset, out_dir):
    """Raw .npy rasters plus a JSON-lines annotation index."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "annotations.jsonl", "w") as fh:
        for i, s in enumerate(dataset.samples):
            np.save(out / f"scene_{i:05d}.npy", s.image)
            fh.write(json.dumps({
                "id": i,
                "seed": s.seed,
                "split": s.split,
                "boxes": np.asarray(s.boxes).tolist(),
                "classes": np.asarray(s.classes).tolist(),
            }) + "\n")


def load_dataset(in_dir):
    root = Path(in_dir)
    index = root / "annotations.jsonl"
    if not index.exists():
        raise DumpFormatError(f"no annotations.jsonl in {in_dir}")
    samples = []
    with open(index) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                image = np.load(root / f"scene_{rec['id']:05d}.npy")
                samples.append(Sample(
                    image=image,
                    boxes=np.asarray(rec["boxes"], dtype=np.float64).reshape(-1, 4),
                    classes=np.asarray(rec["classes"], dtype=np.int64),
                    split=rec["split"],
                    seed=rec["seed"],
                ))
            except (KeyError, ValueError, OSError) as exc:
                raise DumpFormatError(
                    f"{index} line {lineno}: {exc}"
                ) from None
    return Dataset(samples)
