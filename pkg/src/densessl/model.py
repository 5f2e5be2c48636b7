"""Tiny anchor-free dense detector with hand-derived backward pass.

Trunk: three (2x2 mean pool -> 3x3 conv -> ReLU) stages, channels
3 -> 16 -> 16 -> 16, total stride 8. Pooling carries all the striding so
the grid geometry is exactly mirror-symmetric under horizontal flips
(no stride phase offset); value-level flip equivariance additionally
needs left-right symmetric kernels.
Head: shared 1x1 projections producing class logits, one quality logit,
and four ltrb side distances (stride * exp(raw), always positive). An
optional second pyramid level at stride 16 is the pooled stride-8
feature map under the same head.

Predictions are exposed flat: one row per grid location across all
levels, with per-location centers and strides alongside. That keeps
assignment, losses, and diagnostics free of any grid bookkeeping.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import CheckpointError, ConfigError, NumericError

CHECKPOINT_VERSION = 1
TRUNK_CHANNELS = (3, 16, 16, 16)
BASE_STRIDE = 8


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 3
    num_levels: int = 1  # 1 = stride 8 only, 2 = add a stride-16 level

    def __post_init__(self):
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.num_levels not in (1, 2):
            raise ConfigError("num_levels must be 1 or 2")


@dataclass
class ModelParams:
    """All detector weights. Teacher and student each hold one copy."""

    config: ModelConfig
    conv_w: list  # three (3, 3, cin, cout) kernels
    conv_b: list  # three (cout,) biases
    cls_w: np.ndarray  # (16, C)
    cls_b: np.ndarray  # (C,)
    quality_w: np.ndarray  # (16,)
    quality_b: float
    ltrb_w: np.ndarray  # (16, 4)
    ltrb_b: np.ndarray  # (4,)

    def items(self):
        """Deterministically ordered (name, array) pairs over all weights."""
        for k, (w, b) in enumerate(zip(self.conv_w, self.conv_b)):
            yield f"conv{k}_w", w
            yield f"conv{k}_b", b
        yield "cls_w", self.cls_w
        yield "cls_b", self.cls_b
        yield "quality_w", self.quality_w
        yield "quality_b", self.quality_b
        yield "ltrb_w", self.ltrb_w
        yield "ltrb_b", self.ltrb_b

    def set(self, name, value):
        if name.startswith("conv"):
            k = int(name[4])
            if name.endswith("_w"):
                self.conv_w[k] = value
            else:
                self.conv_b[k] = value
        else:
            setattr(self, name, value)

    def get(self, name):
        return dict(self.items())[name]

    def copy(self):
        return ModelParams(
            config=self.config,
            conv_w=[w.copy() for w in self.conv_w],
            conv_b=[b.copy() for b in self.conv_b],
            cls_w=self.cls_w.copy(),
            cls_b=self.cls_b.copy(),
            quality_w=self.quality_w.copy(),
            quality_b=np.float64(self.quality_b),
            ltrb_w=self.ltrb_w.copy(),
            ltrb_b=self.ltrb_b.copy(),
        )

    def zeros_like(self):
        out = self.copy()
        for name, arr in out.items():
            out.set(name, np.zeros_like(np.asarray(arr, dtype=np.float64)))
        return out

    def allclose(self, other, rtol=0.0, atol=0.0):
        return all(
            np.allclose(a, b, rtol=rtol, atol=atol)
            for (_, a), (_, b) in zip(self.items(), other.items())
        )


def init_params(seed, num_classes, num_levels=1):
    """He-style random init; class bias set to the rare-foreground prior."""
    rng = np.random.default_rng(seed)
    config = ModelConfig(num_classes=num_classes, num_levels=num_levels)
    conv_w, conv_b = [], []
    for cin, cout in zip(TRUNK_CHANNELS[:-1], TRUNK_CHANNELS[1:]):
        std = np.sqrt(2.0 / (9 * cin))
        conv_w.append(rng.normal(0.0, std, size=(3, 3, cin, cout)))
        conv_b.append(np.zeros(cout))
    feat = TRUNK_CHANNELS[-1]
    head_std = np.sqrt(1.0 / feat)
    prior = 0.01  # initial foreground probability
    return ModelParams(
        config=config,
        conv_w=conv_w,
        conv_b=conv_b,
        cls_w=rng.normal(0.0, head_std, size=(feat, num_classes)),
        cls_b=np.full(num_classes, -np.log((1.0 - prior) / prior)),
        quality_w=rng.normal(0.0, head_std, size=feat),
        quality_b=np.float64(0.0),
        ltrb_w=rng.normal(0.0, 0.01, size=(feat, 4)),
        ltrb_b=np.zeros(4),
    )


@dataclass
class DenseMap:
    """Flat per-location predictions across all pyramid levels."""

    centers: np.ndarray  # (N, 2) pixel centers
    strides: np.ndarray  # (N,)
    cls_logits: np.ndarray  # (N, C)
    quality_logit: np.ndarray  # (N,)
    ltrb: np.ndarray  # (N, 4), positive side distances
    level_shapes: list = field(default_factory=list)  # [(h, w)] per level

    @property
    def num_locations(self):
        return self.centers.shape[0]

    @property
    def cls_prob(self):
        return 1.0 / (1.0 + np.exp(-self.cls_logits))

    @property
    def quality_prob(self):
        return 1.0 / (1.0 + np.exp(-self.quality_logit))

    @property
    def joint(self):
        return self.cls_prob * self.quality_prob[:, None]

    @property
    def boxes(self):
        """Decoded box at every location, (N, 4)."""
        l, t, r, b = self.ltrb.T
        cx, cy = self.centers.T
        return np.stack([cx - l, cy - t, cx + r, cy + b], axis=1)


def grid_centers(h, w, stride):
    """Pixel centers of an h x w grid at the given stride, row-major."""
    ys = (np.arange(h) + 0.5) * stride
    xs = (np.arange(w) + 0.5) * stride
    cy, cx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([cx.ravel(), cy.ravel()], axis=1)


@dataclass
class ForwardCache:
    pooled: list  # conv inputs per trunk stage
    pre_relu: list  # conv outputs before ReLU
    feats: list  # per-level feature maps fed to the head
    dense: "DenseMap"


def forward(params, image, want_cache=False):
    """Run the detector on one image. H and W must be divisible by 8."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != TRUNK_CHANNELS[0]:
        raise ConfigError(f"expected (H, W, 3) image, got {image.shape}")
    h, w = image.shape[:2]
    factor = BASE_STRIDE * (2 if params.config.num_levels == 2 else 1)
    if h % factor or w % factor:
        raise ConfigError(f"image size {h}x{w} not divisible by {factor}")

    pooled, pre_relu = [], []
    z = image
    for cw, cb in zip(params.conv_w, params.conv_b):
        z = kernels.avgpool2_forward(z)
        pooled.append(z)
        z = kernels.conv3x3_forward(z, cw, cb)
        pre_relu.append(z)
        z = np.maximum(z, 0.0)

    feats = [z]
    if params.config.num_levels == 2:
        feats.append(kernels.avgpool2_forward(z))

    centers, strides, cls_l, q_l, ltrb, shapes = [], [], [], [], [], []
    for lvl, feat in enumerate(feats):
        fh, fw, _ = feat.shape
        stride = BASE_STRIDE * (2 ** lvl)
        flat = feat.reshape(fh * fw, -1)
        centers.append(grid_centers(fh, fw, stride))
        strides.append(np.full(fh * fw, float(stride)))
        cls_l.append(flat @ params.cls_w + params.cls_b)
        q_l.append(flat @ params.quality_w + params.quality_b)
        ltrb.append(stride * np.exp(flat @ params.ltrb_w + params.ltrb_b))
        shapes.append((fh, fw))

    dense = DenseMap(
        centers=np.concatenate(centers),
        strides=np.concatenate(strides),
        cls_logits=np.concatenate(cls_l),
        quality_logit=np.concatenate(q_l),
        ltrb=np.concatenate(ltrb),
        level_shapes=shapes,
    )
    if want_cache:
        return dense, ForwardCache(pooled, pre_relu, feats, dense)
    return dense


def backward(params, cache, grad_cls, grad_quality, grad_ltrb):
    """Exact reverse-mode gradients of a scalar loss w.r.t. all parameters.

    The incoming gradients are w.r.t. the forward outputs: class logits
    (N, C), quality logit (N,), and the positive ltrb distances (N, 4).
    """
    grads = params.zeros_like()
    dense = cache.dense

    # ltrb = stride * exp(raw)  =>  d/draw = ltrb itself
    grad_raw = np.asarray(grad_ltrb, dtype=np.float64) * dense.ltrb
    grad_cls = np.asarray(grad_cls, dtype=np.float64)
    grad_quality = np.asarray(grad_quality, dtype=np.float64)

    gfeat_levels = []
    offset = 0
    for lvl, feat in enumerate(cache.feats):
        fh, fw, fc = feat.shape
        n = fh * fw
        sl = slice(offset, offset + n)
        offset += n
        flat = feat.reshape(n, fc)
        gc, gq, gl = grad_cls[sl], grad_quality[sl], grad_raw[sl]
        grads.cls_w += flat.T @ gc
        grads.cls_b += gc.sum(axis=0)
        grads.quality_w += flat.T @ gq
        grads.quality_b += gq.sum()
        grads.ltrb_w += flat.T @ gl
        grads.ltrb_b += gl.sum(axis=0)
        gflat = gc @ params.cls_w.T + np.outer(gq, params.quality_w) + gl @ params.ltrb_w.T
        gfeat_levels.append(gflat.reshape(fh, fw, fc))

    gz = gfeat_levels[0]
    if params.config.num_levels == 2:
        gz = gz + kernels.avgpool2_backward(gfeat_levels[1], cache.feats[0].shape)

    for k in reversed(range(len(params.conv_w))):
        gz = gz * (cache.pre_relu[k] > 0.0)
        gz, gw, gb = kernels.conv3x3_backward(cache.pooled[k], params.conv_w[k], gz)
        grads.conv_w[k] += gw
        grads.conv_b[k] += gb
        up_shape = (cache.pooled[k].shape[0] * 2, cache.pooled[k].shape[1] * 2,
                    cache.pooled[k].shape[2])
        gz = kernels.avgpool2_backward(gz, up_shape)
    return grads


@dataclass
class OptState:
    """SGD with heavy-ball momentum and coupled weight decay."""

    lr: float
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: ModelParams = None

    def init_for(self, params):
        self.velocity = params.zeros_like()


def sgd_step(params, grads, opt):
    """v <- mu v + g + wd theta; theta <- theta - lr v. Mutates in place."""
    if opt.velocity is None:
        opt.init_for(params)
    for (name, theta), (_, g), (_, v) in zip(
        params.items(), grads.items(), opt.velocity.items()
    ):
        g = np.asarray(g, dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name}")
        v_new = opt.momentum * v + g + opt.weight_decay * np.asarray(theta)
        opt.velocity.set(name, v_new)
        params.set(name, np.asarray(theta) - opt.lr * v_new)
    return params


def ema_update(teacher, student, momentum):
    """theta_t <- m theta_t + (1 - m) theta_s, per parameter. Mutates teacher."""
    for (name, t), (_, s) in zip(teacher.items(), student.items()):
        teacher.set(name, momentum * np.asarray(t) + (1.0 - momentum) * np.asarray(s))
    return teacher


def save_checkpoint(path, params):
    """Versioned binary dump of all parameter arrays; bit-exact round-trip."""
    payload = {
        "version": np.array(CHECKPOINT_VERSION),
        "num_classes": np.array(params.config.num_classes),
        "num_levels": np.array(params.config.num_levels),
    }
    for name, arr in params.items():
        payload["param_" + name] = np.asarray(arr, dtype=np.float64)
    np.savez(path, **payload)


def load_checkpoint(path):
    try:
        data = np.load(path)
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    with data:
        if "version" not in data:
            raise CheckpointError(f"{path} is not a detector checkpoint")
        version = int(data["version"])
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path} has version {version}, expected {CHECKPOINT_VERSION}"
            )
        params = init_params(
            0, int(data["num_classes"]), num_levels=int(data["num_levels"])
        )
        for name, _ in params.items():
            key = "param_" + name
            if key not in data:
                raise CheckpointError(f"{path} missing array {key}")
            value = data[key]
            params.set(name, value if value.ndim else np.float64(value))
    return params
