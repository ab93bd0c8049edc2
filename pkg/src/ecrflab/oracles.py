"""Independent finite-difference oracles for the class-weight gradients.

Each oracle differentiates a scalar loss written directly from the
definitions, never reusing the analytic gradient code:

  baseline  L(W) = -log softmax(W^T F_k)[c]
  joint     L(W) = -log softmax(W^T F_k + delta)[c], where delta is the
            log-space logit correction that maps the raw softmax onto the
            neighbor-refined distribution, computed once at the base
            point and frozen (the scale-only convention: the refinement
            is an additive logit constant w.r.t. W)
  ecrf      L(W) = -log softmax(sum_j w_j W^T F_j + W^T F_k)[c] / Z,
            Z = 1 + sum_j w_j (the aggregate logits are linear in W, so
            no freezing is needed; the constant 1/Z matches the refined
            feature normalization)

All oracles return the *negative* gradient w.r.t. the label column W_c,
i.e. the descent direction, via central differences in float64.
"""

from __future__ import annotations

import numpy as np

from .densecrf import joint_refine_probs, softmax
from .gradtheory import PixelCase


def _central_diff(loss, w_c: np.ndarray, eps: float) -> np.ndarray:
    grad = np.zeros_like(w_c, dtype=np.float64)
    for i in range(len(w_c)):
        wp = w_c.copy()
        wm = w_c.copy()
        wp[i] += eps
        wm[i] -= eps
        grad[i] = (loss(wp) - loss(wm)) / (2 * eps)
    return grad


def baseline_loss_grad(case: PixelCase, weights: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    c = case.label

    def loss(w_c):
        w = weights.copy()
        w[:, c] = w_c
        logits = w.T @ case.feature
        shifted = logits - logits.max()
        return float(np.log(np.exp(shifted).sum()) - shifted[c])

    return -_central_diff(loss, weights[:, c].copy(), eps)


def jointcrf_loss_grad(case: PixelCase, weights: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    c = case.label
    base_logits = weights.T @ case.feature
    p_k = softmax(base_logits)
    refined = joint_refine_probs(p_k, [(w_j, softmax(weights.T @ f_j)) for w_j, f_j in case.neighbors])
    # frozen additive logit correction reproducing the refined distribution
    delta = np.log(refined) - base_logits

    def loss(w_c):
        w = weights.copy()
        w[:, c] = w_c
        logits = w.T @ case.feature + delta
        shifted = logits - logits.max()
        return float(np.log(np.exp(shifted).sum()) - shifted[c])

    return -_central_diff(loss, weights[:, c].copy(), eps)


def ecrf_loss_grad(case: PixelCase, weights: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    c = case.label
    z = 1.0 + sum(w_j for w_j, _ in case.neighbors)

    def loss(w_c):
        w = weights.copy()
        w[:, c] = w_c
        logits = w.T @ case.feature
        for w_j, f_j in case.neighbors:
            logits = logits + w_j * (w.T @ f_j)
        shifted = logits - logits.max()
        return float(np.log(np.exp(shifted).sum()) - shifted[c]) / z

    return -_central_diff(loss, weights[:, c].copy(), eps)


_BY_NAME = {
    "baseline_weight_grad": baseline_loss_grad,
    "jointcrf_weight_grad": jointcrf_loss_grad,
    "ecrf_weight_grad": ecrf_loss_grad,
}


def finite_diff_grad(kind: str, case: PixelCase, weights: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    return _BY_NAME[kind](case, weights, eps=eps)
