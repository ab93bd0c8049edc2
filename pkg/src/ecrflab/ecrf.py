"""Feature-space CRF layer: learned-kernel message passing plus
superpixel mean pooling, with a hand-written analytic backward pass.

Forward, per cell i over feature map F (N = H*W cells, C channels):

    token_i = A @ [color_i, pos_i] + b            (learned embedding)
    k(i,j)  = max(token_i . token_j, 0)           (similarity kernel)
    mu(i,j) = sigmoid(u . [F_i, F_j] + c)         (feature compatibility)
    psi(i,j)= mu(i,j) * k(i,j)                    (j != i)
    Fs_i    = mean of F over the superpixel block containing i
    Z_i     = 1 + sum_j psi(i,j) + [superpixel on]
    out_i   = (F_i + sum_j psi(i,j) F_j + Fs_i) / Z_i

Disabled terms drop out of both the numerator and Z_i, so the identity
configuration reproduces the input bit-exactly.  The backward pass
differentiates everything exactly, including the Z_i dependence on psi.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import grid
from .densecrf import _resize_colors
from .errors import NumericError, ParameterError, ShapeError, StateError
from .superpixel import SuperpixelMap, resample_to


def sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.clip(x, -500, None))), np.exp(np.clip(x, None, 500)) / (1.0 + np.exp(np.clip(x, None, 500))))


@dataclass
class EcrfParams:
    """Learnable parameters and configuration of the layer."""

    embed_w: np.ndarray  # (d_k, 3 + d_pos)
    embed_b: np.ndarray  # (d_k,)
    compat_w: np.ndarray  # (2C,)
    compat_b: np.ndarray  # (1,)
    use_pairwise: bool = True
    use_superpixel: bool = True
    window_radius: int | None = None  # None = all pairs
    pos_dim: int = 16
    input_smoothing: int = 0  # box-blur passes on the image before kernel inputs

    @staticmethod
    def initialize(
        channels: int,
        d_k: int = 16,
        pos_dim: int = 16,
        use_pairwise: bool = True,
        use_superpixel: bool = True,
        window_radius: int | None = None,
        rng: np.random.Generator | None = None,
        embed_scale: float = 0.01,
        embed_pos_scale: float | None = None,
        input_smoothing: int = 0,
    ) -> "EcrfParams":
        """Small random init for the embedding (so the all-pairs message
        sum starts near zero and the layer opens close to the identity),
        zeros for the compat map so message gating starts neutral at 0.5.
        `embed_pos_scale` lets the position columns start weaker than the
        color columns, biasing the kernel toward appearance similarity."""
        if d_k < 1:
            raise ParameterError("d_k must be >= 1")
        rng = rng or np.random.default_rng(0)
        fan_in = 3 + pos_dim
        embed_w = rng.normal(0.0, embed_scale, size=(d_k, fan_in))
        if embed_pos_scale is not None:
            embed_w[:, 3:] *= embed_pos_scale / embed_scale
        return EcrfParams(
            embed_w=embed_w,
            embed_b=np.zeros(d_k),
            compat_w=np.zeros(2 * channels),
            compat_b=np.zeros(1),
            use_pairwise=use_pairwise,
            use_superpixel=use_superpixel,
            window_radius=window_radius,
            pos_dim=pos_dim,
            input_smoothing=input_smoothing,
        )

    def param_list(self) -> list[tuple[str, np.ndarray, bool]]:
        """(name, tensor, weight_decay_applies) triples.  The compat bias
        is decay-exempt so its 0.5 operating point is not dragged around."""
        return [
            ("ecrf.embed_w", self.embed_w, True),
            ("ecrf.embed_b", self.embed_b, False),
            ("ecrf.compat_w", self.compat_w, True),
            ("ecrf.compat_b", self.compat_b, False),
        ]


@dataclass
class EcrfActivation:
    """Forward-pass cache consumed by ecrf_backward."""

    shape: tuple[int, int, int]
    features: np.ndarray  # N x C
    inputs: np.ndarray | None  # N x (3 + d_pos) kernel inputs
    tokens: np.ndarray | None  # N x d_k
    raw_kernel: np.ndarray | None  # N x N token dot products
    active: np.ndarray | None  # N x N bool: pairs contributing to psi
    kernel: np.ndarray | None  # N x N clamped kernel
    mu: np.ndarray | None  # N x N compatibilities
    psi: np.ndarray | None  # N x N pairwise weights
    pooled: np.ndarray | None  # N x C superpixel means
    block_ids: np.ndarray | None  # N block membership
    block_sizes: np.ndarray | None
    z: np.ndarray  # N normalizers
    output: np.ndarray  # N x C refined features
    params: EcrfParams = field(repr=False, default=None)


def kernel_inputs(
    image: np.ndarray, height: int, width: int, pos_dim: int, smoothing: int = 0
) -> np.ndarray:
    """Per-cell [color, position] tokens at feature resolution, N x (3+d).

    `smoothing` box-blur passes denoise the colors before resizing so the
    kernel sees appearance rather than pixel noise.  Colors are centered
    at mid-gray so that dissimilar colors embed to opposing tokens and the
    clamped dot-product kernel can actually shut messages off."""
    from .superpixel import _box_blur

    for _ in range(smoothing):
        image = _box_blur(np.asarray(image, dtype=np.float64))
    colors = _resize_colors(image, height, width).reshape(-1, 3) - 0.5
    pos = grid.position_embedding(height, width, pos_dim).reshape(-1, pos_dim)
    return np.concatenate([colors, pos], axis=1)


def kernel_embed(inputs: np.ndarray, params: EcrfParams) -> np.ndarray:
    """Embed kernel inputs into d_k-dim tokens."""
    if inputs.shape[1] != params.embed_w.shape[1]:
        raise ParameterError(
            f"kernel input dim {inputs.shape[1]} != embed map fan-in {params.embed_w.shape[1]}"
        )
    return inputs @ params.embed_w.T + params.embed_b


def kernel_value(tokens: np.ndarray, i: int, j: int) -> float:
    """Clamped dot-product kernel between two embedded cells."""
    return max(float(tokens[i] @ tokens[j]), 0.0)


def feature_compat(f_i: np.ndarray, f_j: np.ndarray, params: EcrfParams) -> float:
    """Sigmoid gate over the concatenated feature pair, in (0, 1)."""
    c = len(f_i)
    pre = float(f_i @ params.compat_w[:c] + f_j @ params.compat_w[c:] + params.compat_b[0])
    return float(sigmoid(np.asarray(pre)))


def superpixel_pool(features: np.ndarray, sp: SuperpixelMap) -> np.ndarray:
    """Replace each cell's feature with its superpixel block mean."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.shape[:2] != sp.shape:
        raise ShapeError(f"feature shape {feats.shape[:2]} != superpixel map shape {sp.shape}")
    h, w, c = feats.shape
    ids = sp.block_ids.ravel()
    n = sp.block_count
    sizes = np.bincount(ids, minlength=n).astype(np.float64)
    sizes[sizes == 0] = 1.0
    flat = feats.reshape(-1, c)
    sums = np.zeros((n, c))
    np.add.at(sums, ids, flat)
    return (sums / sizes[:, None])[ids].reshape(h, w, c)


def _window_mask(height: int, width: int, radius: int) -> np.ndarray:
    rr, cc = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    r = rr.ravel()
    c = cc.ravel()
    return (np.abs(r[:, None] - r[None, :]) <= radius) & (np.abs(c[:, None] - c[None, :]) <= radius)


def ecrf_forward(
    features: np.ndarray,
    image: np.ndarray,
    sp: SuperpixelMap | None,
    params: EcrfParams,
    inputs: np.ndarray | None = None,
) -> tuple[np.ndarray, EcrfActivation]:
    """Run the layer; returns the refined feature map and the activation
    cache needed for the backward pass.

    `inputs` allows pre-computed kernel inputs to be reused across
    iterations (they depend only on the image, not on the parameters).
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 3:
        raise ShapeError(f"feature map must be HxWxC, got shape {feats.shape}")
    h, w, c = feats.shape
    n = h * w
    flat = feats.reshape(n, c)

    tokens = raw = active = kernel = mu = psi = None
    if params.use_pairwise:
        if inputs is None:
            inputs = kernel_inputs(image, h, w, params.pos_dim, params.input_smoothing)
        tokens = kernel_embed(inputs, params)
        raw = tokens @ tokens.T
        active = raw > 0
        np.fill_diagonal(active, False)
        if params.window_radius is not None:
            active &= _window_mask(h, w, params.window_radius)
        kernel = np.where(active, raw, 0.0)
        u1 = params.compat_w[:c]
        u2 = params.compat_w[c:]
        pre = (flat @ u1)[:, None] + (flat @ u2)[None, :] + params.compat_b
        mu = sigmoid(pre)
        psi = np.where(active, mu * kernel, 0.0)

    pooled = block_ids = block_sizes = None
    if params.use_superpixel:
        if sp is None:
            raise ParameterError("superpixel term enabled but no superpixel map given")
        sp_feat = sp if sp.shape == (h, w) else resample_to(sp, h, w)
        block_ids = sp_feat.block_ids.ravel()
        block_sizes = np.bincount(block_ids, minlength=sp_feat.block_count).astype(np.float64)
        pooled = superpixel_pool(feats, sp_feat).reshape(n, c)

    z = np.ones(n)
    numer = flat.copy()
    if psi is not None:
        z = z + psi.sum(axis=1)
        numer = numer + psi @ flat
    if pooled is not None:
        z = z + 1.0
        numer = numer + pooled

    out = numer / z[:, None]
    if not np.all(np.isfinite(out)):
        bad = int(np.flatnonzero(~np.isfinite(out).all(axis=1))[0])
        raise NumericError(f"non-finite refined feature at cell {bad}")

    act = EcrfActivation(
        shape=(h, w, c),
        features=flat,
        inputs=inputs if params.use_pairwise else None,
        tokens=tokens,
        raw_kernel=raw,
        active=active,
        kernel=kernel,
        mu=mu,
        psi=psi,
        pooled=pooled,
        block_ids=block_ids,
        block_sizes=block_sizes,
        z=z,
        output=out,
        params=params,
    )
    return out.reshape(h, w, c), act


def ecrf_backward(act: EcrfActivation, upstream: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Exact gradients of a scalar loss through the layer.

    Returns the gradient w.r.t. the input feature map and a dict with
    entries embed_w, embed_b, compat_w, compat_b.
    """
    if act is None or act.params is None:
        raise StateError("forward activation required before backward")
    params = act.params
    h, w, c = act.shape
    n = h * w
    dup = np.asarray(upstream, dtype=np.float64).reshape(n, c)
    flat = act.features

    dnum = dup / act.z[:, None]
    dz = -(dup * act.output).sum(axis=1) / act.z

    d_flat = dnum.copy()  # unary term
    grads = {
        "embed_w": np.zeros_like(params.embed_w),
        "embed_b": np.zeros_like(params.embed_b),
        "compat_w": np.zeros_like(params.compat_w),
        "compat_b": np.zeros(1),
    }

    if params.use_pairwise:
        dpsi = dnum @ flat.T + dz[:, None]
        dpsi = np.where(act.active, dpsi, 0.0)
        d_flat += act.psi.T @ dnum  # message values F_j

        dmu = dpsi * act.kernel
        dk = dpsi * act.mu

        dpre = dmu * act.mu * (1.0 - act.mu)
        row = dpre.sum(axis=1)
        col = dpre.sum(axis=0)
        u1 = params.compat_w[:c]
        u2 = params.compat_w[c:]
        grads["compat_w"][:c] = flat.T @ row
        grads["compat_w"][c:] = flat.T @ col
        grads["compat_b"][0] = dpre.sum()
        d_flat += row[:, None] * u1[None, :] + col[:, None] * u2[None, :]

        draw = np.where(act.active, dk, 0.0)  # clamp: only active pairs pass gradient
        dtok = draw @ act.tokens + draw.T @ act.tokens
        grads["embed_w"] = dtok.T @ act.inputs
        grads["embed_b"] = dtok.sum(axis=0)

    if params.use_superpixel:
        dpool = dnum  # coefficient of pooled term is 1
        sums = np.zeros((len(act.block_sizes), c))
        np.add.at(sums, act.block_ids, dpool)
        sizes = act.block_sizes.copy()
        sizes[sizes == 0] = 1.0
        d_flat += (sums / sizes[:, None])[act.block_ids]

    return d_flat.reshape(h, w, c), grads
