"""Class-weight gradient geometry for the three training regimes.

For a boundary pixel with feature F_k and label c, the negative gradient
of the cross-entropy loss w.r.t. the class weight W_c is:

    baseline:   (1 - P_k)  * F_k
    joint CRF:  (1 - Phat) * F_k                    (scale only)
    feature CRF:(1 - P*) * (sum_j w_j F_j + F_k)/Z  (scale and direction)

where Phat mixes neighbor probabilities, P* is the softmax of the
neighbor-aggregated logits, and Z = 1 + sum_j w_j.  The angle experiment
applies one equal-step update per regime and measures how far the
updated weight moves away from the confusable class.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .densecrf import joint_refine_probs, softmax
from .errors import ParameterError


@dataclass(frozen=True)
class PixelCase:
    """One boundary pixel with its inner-pixel neighborhood."""

    feature: np.ndarray  # F_k, C-vector
    label: int
    neighbors: tuple[tuple[float, np.ndarray], ...]  # (w_j, F_j)

    def __post_init__(self):
        for w_j, _ in self.neighbors:
            if w_j < 0:
                raise ParameterError(f"negative neighbor weight {w_j}")


@dataclass(frozen=True)
class GradReport:
    grad: np.ndarray  # -grad of loss w.r.t. W_c (the descent direction)
    scale: float  # the (1 - P) factor
    direction: np.ndarray  # unit vector of grad
    angle_to_feature: float  # radians between grad and F_k


def softmax_ce(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Numerically stable cross-entropy; returns (loss, probabilities)."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < len(logits):
        raise ParameterError(f"label {label} out of range for {len(logits)} classes")
    shifted = logits - logits.max()
    lse = np.log(np.exp(shifted).sum())
    probs = np.exp(shifted - lse)
    return float(lse - shifted[label]), probs


def _report(grad: np.ndarray, scale: float, feature: np.ndarray) -> GradReport:
    norm = np.linalg.norm(grad)
    direction = grad / norm if norm > 0 else np.zeros_like(grad)
    fnorm = np.linalg.norm(feature)
    if norm > 0 and fnorm > 0:
        cosang = np.clip(grad @ feature / (norm * fnorm), -1.0, 1.0)
        angle = float(np.arccos(cosang))
    else:
        angle = 0.0
    return GradReport(grad=grad, scale=scale, direction=direction, angle_to_feature=angle)


def baseline_weight_grad(case: PixelCase, weights: np.ndarray) -> GradReport:
    """-grad W_c = (1 - P_k^c) F_k from the plain softmax classifier."""
    logits = weights.T @ case.feature
    _, probs = softmax_ce(logits, case.label)
    scale = 1.0 - probs[case.label]
    return _report(scale * case.feature, scale, case.feature)


def jointcrf_weight_grad(case: PixelCase, weights: np.ndarray) -> GradReport:
    """-grad W_c = (1 - Phat_k^c) F_k with neighbor probabilities frozen.

    Neighbor distributions come from the same classifier but are treated
    as constants w.r.t. W, matching the scale-only update.
    """
    _, p_k = softmax_ce(weights.T @ case.feature, case.label)
    refined = joint_refine_probs(
        p_k, [(w_j, softmax(weights.T @ f_j)) for w_j, f_j in case.neighbors]
    )
    scale = 1.0 - refined[case.label]
    return _report(scale * case.feature, scale, case.feature)


def ecrf_weight_grad(case: PixelCase, weights: np.ndarray) -> GradReport:
    """-grad W_c = (1 - P*) (sum_j w_j F_j + F_k) / Z.

    P* is the softmax of the aggregated logits sum_j w_j Y_j + Y_k; the
    message weights w_j are constants w.r.t. W.
    """
    agg_logits = weights.T @ case.feature
    agg_feature = case.feature.copy()
    z = 1.0
    for w_j, f_j in case.neighbors:
        agg_logits = agg_logits + w_j * (weights.T @ f_j)
        agg_feature = agg_feature + w_j * f_j
        z += w_j
    _, p_star = softmax_ce(agg_logits, case.label)
    scale = 1.0 - p_star[case.label]
    return _report(scale * agg_feature / z, scale, case.feature)


def _angle(a: np.ndarray, b: np.ndarray) -> float:
    cosang = np.clip(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)), -1.0, 1.0)
    return float(np.arccos(cosang))


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def angle_experiment(
    w1: np.ndarray,
    w2: np.ndarray,
    mix: float = 0.5,
    neighbor_purity: float = 1.0,
    neighbor_weight: float = 1.0,
    step: float = 0.1,
) -> tuple[float, float, float]:
    """One gradient step per regime; returns angles (theta1, theta2,
    theta3) between the confusable weight w2 and the updated w1.

    The boundary feature is a convex mixture of the two unit class
    directions (`mix` toward w2); the inner-pixel neighbor leans toward
    w1 with the given purity.  Larger angle = better separation, and the
    feature-CRF update should win: theta3 > theta2 > theta1.
    """
    w1 = np.asarray(w1, dtype=np.float64)
    w2 = np.asarray(w2, dtype=np.float64)
    cross = np.linalg.norm(np.outer(w1, w2) - np.outer(w2, w1))
    if cross < 1e-12:
        raise ParameterError("class weights must not be collinear")

    u1, u2 = _unit(w1), _unit(w2)
    f_k = (1.0 - mix) * u1 + mix * u2
    f_j = _unit(neighbor_purity * u1 + (1.0 - neighbor_purity) * f_k)
    case = PixelCase(feature=f_k, label=0, neighbors=((neighbor_weight, f_j),))
    weights = np.stack([w1, w2], axis=1)

    angles = []
    for fn in (baseline_weight_grad, jointcrf_weight_grad, ecrf_weight_grad):
        report = fn(case, weights)
        updated = w1 + step * report.grad
        angles.append(_angle(w2, updated))
    return tuple(angles)
