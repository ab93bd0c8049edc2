"""Dense CRF over class scores via mean-field message passing.

Implements the classic two-kernel Gaussian pairwise potential and the
additive score update Y*_i = (Y_i + sum_j psi(i,j) Y_j) / Z_i with
Z_i = 1 + sum_j psi(i,j), so every update is a convex combination of the
incoming scores.  Message passing is exact O(N^2); no lattice
approximations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError


@dataclass(frozen=True)
class GaussianKernelParams:
    w1: float = 1.0
    w2: float = 1.0
    theta_alpha: float = 8.0
    theta_beta: float = 0.25
    theta_gamma: float = 3.0

    def __post_init__(self):
        if self.theta_alpha <= 0 or self.theta_beta <= 0 or self.theta_gamma <= 0:
            raise ParameterError("kernel scale factors must be positive")


@dataclass(frozen=True)
class LabelCompatibility:
    matrix: np.ndarray

    @staticmethod
    def identity(n_classes: int) -> "LabelCompatibility":
        return LabelCompatibility(np.eye(n_classes))


def gaussian_kernel(p_i, p_j, color_i, color_j, params: GaussianKernelParams) -> float:
    """Two-kernel Gaussian similarity between pixels i and j."""
    dp2 = float(np.sum((np.asarray(p_i, dtype=np.float64) - np.asarray(p_j, dtype=np.float64)) ** 2))
    dc2 = float(np.sum((np.asarray(color_i, dtype=np.float64) - np.asarray(color_j, dtype=np.float64)) ** 2))
    appearance = np.exp(-dp2 / (2 * params.theta_alpha**2) - dc2 / (2 * params.theta_beta**2))
    smoothness = np.exp(-dp2 / (2 * params.theta_gamma**2))
    return params.w1 * appearance + params.w2 * smoothness


def pairwise_weight(label_a: int, label_b: int, kernel: float, compat: LabelCompatibility) -> float:
    """Message passing weight: compatibility times kernel."""
    return float(compat.matrix[label_a, label_b]) * kernel


def kernel_matrix(
    height: int,
    width: int,
    image: np.ndarray,
    params: GaussianKernelParams,
    window_radius: int | None,
) -> np.ndarray:
    """N x N Gaussian kernel over all cell pairs, zero diagonal.

    The score grid may be coarser than the image; colors are area-averaged
    down and positions are taken at cell resolution.
    """
    colors = _resize_colors(image, height, width)
    rr, cc = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    pos = np.stack([rr.ravel(), cc.ravel()], axis=1)
    flat = colors.reshape(-1, 3)

    dp2 = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(axis=2)
    dc2 = ((flat[:, None, :] - flat[None, :, :]) ** 2).sum(axis=2)
    k = params.w1 * np.exp(-dp2 / (2 * params.theta_alpha**2) - dc2 / (2 * params.theta_beta**2))
    k += params.w2 * np.exp(-dp2 / (2 * params.theta_gamma**2))
    np.fill_diagonal(k, 0.0)
    if window_radius is not None:
        inside = np.maximum(
            np.abs(pos[:, None, 0] - pos[None, :, 0]), np.abs(pos[:, None, 1] - pos[None, :, 1])
        ) <= window_radius
        k *= inside
    return k


def _resize_colors(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Area-average an image down to (height, width); identity if equal."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    if (h, w) == (height, width):
        return img
    if h % height == 0 and w % width == 0:
        sh, sw = h // height, w // width
        return img.reshape(height, sh, width, sw, 3).mean(axis=(1, 3))
    ri = np.minimum((np.arange(height) * h) // height, h - 1)
    ci = np.minimum((np.arange(width) * w) // width, w - 1)
    return img[np.ix_(ri, ci)]


def mean_field_step(
    scores: np.ndarray,
    image: np.ndarray,
    params: GaussianKernelParams,
    compat: LabelCompatibility,
    window_radius: int | None = None,
    kernel: np.ndarray | None = None,
) -> np.ndarray:
    """One message passing update of an H x W x n score field.

    Y*_i = (Y_i + sum_j psi(i,j) Y_j) / (1 + sum_j psi(i,j)), applied per
    class with the label-compatibility mixing of incoming class scores.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 3:
        raise ShapeError(f"score field must be HxWxn, got shape {scores.shape}")
    h, w, n = scores.shape
    if kernel is None:
        kernel = kernel_matrix(h, w, image, params, window_radius)
    flat = scores.reshape(-1, n)
    # messages: for class a, sum_j k(i,j) * sum_b mu(a,b) Y_j^b
    mixed = flat @ compat.matrix.T
    messages = kernel @ mixed
    # per-class normalizer: Z_{i,a} = 1 + sum_j k(i,j) * rowsum_a(mu),
    # which reduces to the convex 1 + sum_j k(i,j) for identity mu
    z = 1.0 + np.outer(kernel.sum(axis=1), compat.matrix.sum(axis=1))
    out = (flat + messages) / z
    return out.reshape(h, w, n)


def softmax(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = scores - scores.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def run_inference(
    scores: np.ndarray,
    image: np.ndarray,
    params: GaussianKernelParams,
    compat: LabelCompatibility,
    steps: int,
    window_radius: int | None = None,
) -> np.ndarray:
    """Iterate mean-field updates then softmax-normalize to probabilities."""
    if steps < 1:
        raise ParameterError("steps must be >= 1")
    scores = np.asarray(scores, dtype=np.float64)
    h, w, _ = scores.shape
    kernel = kernel_matrix(h, w, image, params, window_radius)
    for _ in range(steps):
        scores = mean_field_step(scores, image, params, compat, kernel=kernel)
    return softmax(scores)


def joint_refine_probs(p_k: np.ndarray, neighbors: list[tuple[float, np.ndarray]]) -> np.ndarray:
    """Refine one pixel's distribution with weighted neighbor distributions.

    P-hat = (sum_j w_j P_j + P_k) / (1 + sum_j w_j).
    """
    p_k = np.asarray(p_k, dtype=np.float64)
    total = p_k.copy()
    z = 1.0
    for w_j, p_j in neighbors:
        if w_j < 0:
            raise ParameterError(f"negative neighbor weight {w_j}")
        total += w_j * np.asarray(p_j, dtype=np.float64)
        z += w_j
    return total / z


def joint_refine_field(probs: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Vectorized joint refinement of an H x W x n probability field.

    `weights` is the N x N nonnegative message weight matrix with zero
    diagonal; each cell is refined per joint_refine_probs.
    """
    h, w, n = probs.shape
    flat = probs.reshape(-1, n)
    z = 1.0 + weights.sum(axis=1)
    return ((weights @ flat + flat) / z[:, None]).reshape(h, w, n)
