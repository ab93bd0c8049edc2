"""Desk-scale training pipeline.

A synthetic shapes dataset, a small convolutional feature extractor with
hand-written backprop, a bias-free linear classifier, and SGD with
momentum, weight decay and a poly learning-rate schedule.  Three training
modes share the backbone: plain per-cell classification ("baseline"),
probability refinement over a local window ("joint"), and the
feature-space CRF layer ("ecrf").
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import grid
from .densecrf import GaussianKernelParams, kernel_matrix, softmax
from .ecrf import EcrfParams, ecrf_backward, ecrf_forward, kernel_inputs
from .errors import DataFormatError, NumericError, ParameterError
from .superpixel import SuperpixelMap


# ---------------------------------------------------------------------------
# synthetic dataset
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    num_images: int = 16
    size: int = 64
    num_classes: int = 6  # background + shape classes
    shapes_min: int = 3
    shapes_max: int = 6
    texture_noise: float = 0.08
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ParameterError("need at least background + one shape class")
        if self.size < 32:
            raise ParameterError("image size must be >= 32")


def _class_palette(n_classes: int) -> np.ndarray:
    """Distinct, moderately separated base colors; class 0 is background."""
    hues = np.linspace(0.0, 1.0, n_classes, endpoint=False)
    palette = np.empty((n_classes, 3))
    for c, h in enumerate(hues):
        palette[c] = _hsv_to_rgb(h, 0.55, 0.45 + 0.4 * ((c % 2)))
    palette[0] = (0.25, 0.25, 0.25)
    return palette


def _hsv_to_rgb(h: float, s: float, v: float) -> tuple[float, float, float]:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def _raster_shape(rng: np.random.Generator, size: int) -> np.ndarray:
    """Boolean mask of one random rectangle, ellipse or triangle."""
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    kind = rng.integers(3)
    lo, hi = size * 0.25, size * 0.6
    cy, cx = rng.uniform(size * 0.1, size * 0.9, size=2)
    if kind == 0:  # rectangle
        h = rng.uniform(lo, hi)
        w = rng.uniform(lo, hi)
        return (np.abs(yy - cy) <= h / 2) & (np.abs(xx - cx) <= w / 2)
    if kind == 1:  # ellipse
        ry = rng.uniform(lo / 2, hi / 2)
        rx = rng.uniform(lo / 2, hi / 2)
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    # triangle via half-plane tests
    pts = np.stack([rng.uniform(-hi / 2, hi / 2, size=3) + cy, rng.uniform(-hi / 2, hi / 2, size=3) + cx], axis=1)
    mask = np.ones((size, size), dtype=bool)
    for a in range(3):
        p0, p1 = pts[a], pts[(a + 1) % 3]
        p2 = pts[(a + 2) % 3]
        cross = (p1[0] - p0[0]) * (xx - p0[1]) - (p1[1] - p0[1]) * (yy - p0[0])
        ref = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p1[1] - p0[1]) * (p2[0] - p0[0])
        if ref == 0:
            return np.zeros((size, size), dtype=bool)
        mask &= (cross * np.sign(ref)) >= 0
    return mask


def gen_synthetic_dataset(cfg: SynthConfig) -> list[tuple[np.ndarray, np.ndarray]]:
    """Textured background plus overlapping colored shapes with exact
    rasterized labels.  Deterministic per seed; every class is guaranteed
    to appear somewhere in the dataset (bounded retries otherwise)."""
    palette = _class_palette(cfg.num_classes)
    for attempt in range(32):
        rng = np.random.default_rng((cfg.seed, attempt))
        data = []
        for idx in range(cfg.num_images):
            labels = np.zeros((cfg.size, cfg.size), dtype=np.int64)
            n_shapes = int(rng.integers(cfg.shapes_min, cfg.shapes_max + 1))
            for s in range(n_shapes):
                if s == 0:  # cycle the first shape's class for coverage
                    cls = 1 + (idx % (cfg.num_classes - 1))
                else:
                    cls = int(rng.integers(1, cfg.num_classes))
                mask = _raster_shape(rng, cfg.size)
                labels[mask] = cls
            image = palette[labels]
            image = image + rng.normal(0.0, cfg.texture_noise, size=image.shape)
            data.append((np.clip(image, 0.0, 1.0), labels))
        hist = np.bincount(np.concatenate([lab.ravel() for _, lab in data]), minlength=cfg.num_classes)
        # every class present with non-trivial mass, background not dominant
        if (hist >= max(1, hist.sum() // (100 * cfg.num_classes))).all() and hist[0] <= 0.7 * hist.sum():
            return data
    raise DataFormatError("could not cover every class within bounded retries")


# ---------------------------------------------------------------------------
# convolutional feature extractor
# ---------------------------------------------------------------------------

@dataclass
class ConvLayer:
    weight: np.ndarray  # (k, k, c_in, c_out)
    bias: np.ndarray  # (c_out,)
    stride: int


@dataclass
class NetConfig:
    layers: list[tuple[int, int, int]] = field(default_factory=lambda: [(16, 3, 2), (32, 3, 2), (32, 3, 1)])
    num_classes: int = 6

    @property
    def feature_stride(self) -> int:
        s = 1
        for _, _, stride in self.layers:
            s *= stride
        return s

    @property
    def feature_channels(self) -> int:
        return self.layers[-1][0]


@dataclass
class ToyNet:
    conv: list[ConvLayer]
    classifier: np.ndarray  # (C, n) one column per class, no bias
    config: NetConfig

    @staticmethod
    def initialize(cfg: NetConfig, rng: np.random.Generator) -> "ToyNet":
        conv = []
        c_in = 3
        for c_out, k, stride in cfg.layers:
            fan_in = k * k * c_in
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(k, k, c_in, c_out))
            conv.append(ConvLayer(weight=w, bias=np.zeros(c_out), stride=stride))
            c_in = c_out
        classifier = rng.normal(0.0, np.sqrt(1.0 / c_in), size=(c_in, cfg.num_classes))
        return ToyNet(conv=conv, classifier=classifier, config=cfg)

    def param_list(self) -> list[tuple[str, np.ndarray, bool]]:
        params = []
        for i, layer in enumerate(self.conv):
            params.append((f"conv{i}.weight", layer.weight, True))
            params.append((f"conv{i}.bias", layer.bias, False))
        params.append(("classifier.weight", self.classifier, True))
        return params


def conv_forward(x: np.ndarray, layer: ConvLayer) -> tuple[np.ndarray, tuple]:
    """Same-padded strided convolution, channels-last."""
    k = layer.weight.shape[0]
    pad = k // 2
    s = layer.stride
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    h_out = (x.shape[0] + s - 1) // s
    w_out = (x.shape[1] + s - 1) // s
    out = np.tile(layer.bias, (h_out, w_out, 1)).astype(np.float64)
    for dy in range(k):
        for dx in range(k):
            patch = xp[dy : dy + s * h_out : s, dx : dx + s * w_out : s]
            out += patch @ layer.weight[dy, dx]
    return out, (x.shape, xp, h_out, w_out)


def conv_backward(dout: np.ndarray, layer: ConvLayer, cache: tuple) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x_shape, xp, h_out, w_out = cache
    k = layer.weight.shape[0]
    pad = k // 2
    s = layer.stride
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(layer.weight)
    for dy in range(k):
        for dx in range(k):
            patch = xp[dy : dy + s * h_out : s, dx : dx + s * w_out : s]
            dw[dy, dx] = np.tensordot(patch, dout, axes=([0, 1], [0, 1]))
            dxp[dy : dy + s * h_out : s, dx : dx + s * w_out : s] += dout @ layer.weight[dy, dx].T
    db = dout.sum(axis=(0, 1))
    dx = dxp[pad : pad + x_shape[0], pad : pad + x_shape[1]]
    return dx, dw, db


def features_forward(net: ToyNet, image: np.ndarray) -> tuple[np.ndarray, list]:
    """Backbone forward: conv + ReLU stack.  Returns features and caches."""
    x = np.asarray(image, dtype=np.float64)
    caches = []
    for layer in net.conv:
        pre, cache = conv_forward(x, layer)
        x = np.maximum(pre, 0.0)
        caches.append((cache, pre))
    return x, caches


def features_backward(net: ToyNet, dfeat: np.ndarray, caches: list) -> dict[str, np.ndarray]:
    grads = {}
    dx = dfeat
    for i in reversed(range(len(net.conv))):
        cache, pre = caches[i]
        dx = dx * (pre > 0)
        dx, dw, db = conv_backward(dx, net.conv[i], cache)
        grads[f"conv{i}.weight"] = dw
        grads[f"conv{i}.bias"] = db
    return grads


# ---------------------------------------------------------------------------
# loss and the three modes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    mode: str = "baseline"  # baseline | joint | ecrf
    lr0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    total_iters: int = 300
    poly_power: float = 0.9
    batch: int = 4
    seed: int = 0
    joint_window: int = 2
    joint_steps: int = 1

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ParameterError("lr0 must be positive")
        if self.poly_power <= 0:
            raise ParameterError("poly_power must be positive")
        if self.mode not in ("baseline", "joint", "ecrf"):
            raise ParameterError(f"unknown mode {self.mode!r}")


def poly_lr(iteration: int, cfg: TrainConfig) -> float:
    """lr0 * (1 - iter/total)^power."""
    if iteration > cfg.total_iters:
        raise ParameterError("iteration beyond schedule end")
    return cfg.lr0 * (1.0 - iteration / cfg.total_iters) ** cfg.poly_power


def cell_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over cells; returns loss and dloss/dlogits."""
    h, w, n = logits.shape
    probs = softmax(logits)
    flat_labels = labels.ravel()
    idx = np.arange(h * w)
    p_true = probs.reshape(-1, n)[idx, flat_labels]
    loss = float(-np.log(np.clip(p_true, 1e-300, None)).mean())
    dlogits = probs.reshape(-1, n).copy()
    dlogits[idx, flat_labels] -= 1.0
    return loss, (dlogits / (h * w)).reshape(h, w, n)


def _joint_weight_matrix(image: np.ndarray, h: int, w: int, cfg: TrainConfig) -> np.ndarray:
    # weights sized so the total neighbor mass stays O(1) and the unary
    # probability is not washed out; the colors are lightly denoised so the
    # appearance term follows regions instead of pixel noise
    from .superpixel import _box_blur

    img = np.asarray(image, dtype=np.float64)
    for _ in range(3):
        img = _box_blur(img)
    params = GaussianKernelParams(w1=0.3, w2=0.05, theta_alpha=2.0, theta_beta=0.15, theta_gamma=1.5)
    return kernel_matrix(h, w, img, params, window_radius=cfg.joint_window)


def forward(
    net: ToyNet,
    image: np.ndarray,
    mode: str,
    sp: SuperpixelMap | None = None,
    ecrf_params: EcrfParams | None = None,
    joint_weights: np.ndarray | None = None,
    ecrf_inputs: np.ndarray | None = None,
    train_cfg: TrainConfig | None = None,
) -> dict:
    """Full forward pass; returns a dict of intermediates for backward."""
    feats, conv_caches = features_forward(net, image)
    h, w, _ = feats.shape
    out = {"features": feats, "conv_caches": conv_caches, "mode": mode}

    if mode == "ecrf":
        if ecrf_params is None:
            raise ParameterError("ecrf mode requires EcrfParams")
        refined, act = ecrf_forward(feats, image, sp, ecrf_params, inputs=ecrf_inputs)
        logits = refined @ net.classifier
        out.update(refined=refined, activation=act, logits=logits)
        out["probs"] = softmax(logits)
    elif mode == "joint":
        logits = feats @ net.classifier
        probs = softmax(logits)
        cfg = train_cfg or TrainConfig(mode="joint")
        if joint_weights is None:
            joint_weights = _joint_weight_matrix(image, h, w, cfg)
        flat = probs.reshape(-1, probs.shape[2])
        z = 1.0 + joint_weights.sum(axis=1)
        refined_probs = ((joint_weights @ flat + flat) / z[:, None]).reshape(probs.shape)
        out.update(logits=logits, raw_probs=probs, joint_weights=joint_weights, joint_z=z, probs=refined_probs)
    elif mode == "baseline":
        logits = feats @ net.classifier
        out.update(logits=logits, probs=softmax(logits))
    else:
        raise ParameterError(f"unknown mode {mode!r}")
    return out


def mode_loss_backward(net: ToyNet, fwd: dict, labels: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    """Loss plus gradients for every parameter, given a forward dict."""
    mode = fwd["mode"]
    feats = fwd["features"]
    h, w, c = feats.shape
    grads: dict[str, np.ndarray] = {}

    if mode == "joint":
        probs = fwd["probs"]
        n = probs.shape[2]
        idx = np.arange(h * w)
        flat_labels = labels.ravel()
        p_true = probs.reshape(-1, n)[idx, flat_labels]
        loss = float(-np.log(np.clip(p_true, 1e-300, None)).mean())
        dref = np.zeros((h * w, n))
        dref[idx, flat_labels] = -1.0 / np.clip(p_true, 1e-300, None) / (h * w)
        # back through the linear refinement, then the softmax
        k = fwd["joint_weights"]
        z = fwd["joint_z"]
        draw_probs = (k.T @ (dref / z[:, None])) + dref / z[:, None]
        p = fwd["raw_probs"].reshape(-1, n)
        dlogits = p * (draw_probs - (draw_probs * p).sum(axis=1, keepdims=True))
        dlogits = dlogits.reshape(h, w, n)
    else:
        loss, dlogits = cell_cross_entropy(fwd["logits"], labels)

    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss in mode {mode}")

    pre_classifier = fwd["refined"] if mode == "ecrf" else feats
    grads["classifier.weight"] = np.tensordot(pre_classifier, dlogits, axes=([0, 1], [0, 1]))
    dpre = dlogits @ net.classifier.T

    if mode == "ecrf":
        dfeat, ecrf_grads = ecrf_backward(fwd["activation"], dpre)
        grads["ecrf.embed_w"] = ecrf_grads["embed_w"]
        grads["ecrf.embed_b"] = ecrf_grads["embed_b"]
        grads["ecrf.compat_w"] = ecrf_grads["compat_w"]
        grads["ecrf.compat_b"] = ecrf_grads["compat_b"]
    else:
        dfeat = dpre

    grads.update(features_backward(net, dfeat, fwd["conv_caches"]))
    return loss, grads


# ---------------------------------------------------------------------------
# optimizer and training loop
# ---------------------------------------------------------------------------

class SgdMomentum:
    """SGD with momentum; weight decay is skipped for decay-exempt params."""

    def __init__(self, params: list[tuple[str, np.ndarray, bool]], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.velocity = {name: np.zeros_like(p) for name, p, _ in params}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        for name, p, decay in self.params:
            g = grads.get(name)
            if g is None:
                continue
            g = np.asarray(g, dtype=np.float64).reshape(p.shape)
            if decay:
                g = g + self.cfg.weight_decay * p
            v = self.velocity[name]
            v *= self.cfg.momentum
            v += g
            p -= lr * v


@dataclass
class TrainResult:
    net: ToyNet
    ecrf_params: EcrfParams | None
    losses: list[float]
    lrs: list[float]


def train(
    cfg: TrainConfig,
    data: list[tuple[np.ndarray, np.ndarray]],
    net: ToyNet,
    sp_maps: list[SuperpixelMap] | None = None,
    ecrf_params: EcrfParams | None = None,
    log=None,
) -> TrainResult:
    """Run the training loop; deterministic given cfg.seed."""
    stride = net.config.feature_stride
    if cfg.mode == "ecrf":
        if ecrf_params is None:
            raise ParameterError("ecrf mode requires EcrfParams")
        if ecrf_params.use_superpixel and (sp_maps is None or len(sp_maps) != len(data)):
            raise DataFormatError("ecrf mode needs one precomputed superpixel map per image")

    label_cache = [grid.downsample_labels(lab, stride) for _, lab in data]
    # kernel inputs / joint weights depend only on the images: precompute once
    h_feat = data[0][0].shape[0] // stride
    w_feat = data[0][0].shape[1] // stride
    ecrf_inputs = None
    joint_cache = None
    if cfg.mode == "ecrf" and ecrf_params.use_pairwise:
        ecrf_inputs = [
            kernel_inputs(img, h_feat, w_feat, ecrf_params.pos_dim, ecrf_params.input_smoothing)
            for img, _ in data
        ]
    if cfg.mode == "joint":
        joint_cache = [_joint_weight_matrix(img, h_feat, w_feat, cfg) for img, _ in data]

    params = net.param_list()
    if cfg.mode == "ecrf":
        params = params + ecrf_params.param_list()
    opt = SgdMomentum(params, cfg)
    rng = np.random.default_rng(cfg.seed)

    losses, lrs = [], []
    for it in range(cfg.total_iters):
        lr = poly_lr(it, cfg)
        batch_idx = rng.integers(0, len(data), size=cfg.batch)
        total_loss = 0.0
        acc: dict[str, np.ndarray] = {}
        for bi in batch_idx:
            img, _ = data[bi]
            fwd = forward(
                net,
                img,
                cfg.mode,
                sp=sp_maps[bi] if sp_maps is not None else None,
                ecrf_params=ecrf_params,
                joint_weights=joint_cache[bi] if joint_cache is not None else None,
                ecrf_inputs=ecrf_inputs[bi] if ecrf_inputs is not None else None,
                train_cfg=cfg,
            )
            loss, grads = mode_loss_backward(net, fwd, label_cache[bi])
            total_loss += loss
            for name, g in grads.items():
                if name in acc:
                    acc[name] += g
                else:
                    acc[name] = g.copy()
        for name in acc:
            acc[name] /= cfg.batch
        opt.step(acc, lr)
        losses.append(total_loss / cfg.batch)
        lrs.append(lr)
        if log is not None and (it % 50 == 0 or it == cfg.total_iters - 1):
            log(f"iter {it:5d}  lr {lr:.5f}  loss {losses[-1]:.4f}")
    return TrainResult(net=net, ecrf_params=ecrf_params, losses=losses, lrs=lrs)


def predict(
    net: ToyNet,
    image: np.ndarray,
    mode: str,
    sp: SuperpixelMap | None = None,
    ecrf_params: EcrfParams | None = None,
    train_cfg: TrainConfig | None = None,
) -> np.ndarray:
    """Full-resolution label prediction (nearest upsampling of cells)."""
    fwd = forward(net, image, mode, sp=sp, ecrf_params=ecrf_params, train_cfg=train_cfg)
    cells = fwd["probs"].argmax(axis=2)
    stride = net.config.feature_stride
    return np.repeat(np.repeat(cells, stride, axis=0), stride, axis=1)[: image.shape[0], : image.shape[1]]
