"""Segmentation metrics and the class-weight confusion diagnostic.

mIoU and boundary F-score evaluate predictions; adjacency counting plus
cosine similarity of classifier weight columns quantify how confusable
the weights of frequently-adjacent classes have become.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, n_classes: int) -> np.ndarray:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    valid = (gt >= 0) & (gt < n_classes)
    idx = gt[valid].astype(np.int64) * n_classes + pred[valid].astype(np.int64)
    return np.bincount(idx, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def miou(pred: np.ndarray, gt: np.ndarray, n_classes: int) -> tuple[np.ndarray, float]:
    """Per-class IoU and the mean over classes present in gt or pred.

    Classes absent from both maps contribute NaN per-class and are
    excluded from the mean.
    """
    cm = confusion_matrix(pred, gt, n_classes)
    inter = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - np.diag(cm)
    ious = np.full(n_classes, np.nan)
    present = union > 0
    ious[present] = inter[present] / union[present]
    mean = float(np.nanmean(ious)) if present.any() else 0.0
    return ious, mean


def _boundary_mask(labels: np.ndarray) -> np.ndarray:
    """Cells with a 4-neighbor of a different label."""
    b = np.zeros(labels.shape, dtype=bool)
    b[:-1, :] |= labels[:-1, :] != labels[1:, :]
    b[1:, :] |= labels[:-1, :] != labels[1:, :]
    b[:, :-1] |= labels[:, :-1] != labels[:, 1:]
    b[:, 1:] |= labels[:, :-1] != labels[:, 1:]
    return b


def _dilate_chebyshev(mask: np.ndarray, radius: int) -> np.ndarray:
    out = mask.copy()
    for _ in range(radius):
        grown = out.copy()
        grown[:-1, :] |= out[1:, :]
        grown[1:, :] |= out[:-1, :]
        grown[:, :-1] |= out[:, 1:]
        grown[:, 1:] |= out[:, :-1]
        grown[:-1, :-1] |= out[1:, 1:]
        grown[1:, 1:] |= out[:-1, :-1]
        grown[:-1, 1:] |= out[1:, :-1]
        grown[1:, :-1] |= out[:-1, 1:]
        out = grown
    return out


def boundary_fscore(pred: np.ndarray, gt: np.ndarray, tolerance: int = 1) -> float:
    """Boundary F-score with a Chebyshev pixel tolerance.

    A predicted boundary pixel counts as correct when a ground-truth
    boundary pixel of the same class lies within the tolerance; recall is
    symmetric.  F = 1 when both boundary sets are empty, 0 when P+R = 0.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    pred_b = _boundary_mask(pred)
    gt_b = _boundary_mask(gt)
    if not pred_b.any() and not gt_b.any():
        return 1.0

    classes = np.union1d(np.unique(pred[pred_b]) if pred_b.any() else [], np.unique(gt[gt_b]) if gt_b.any() else [])
    tp_p = 0  # matched predicted boundary pixels
    tp_g = 0  # matched gt boundary pixels
    total_p = 0
    total_g = 0
    for c in classes:
        pb = pred_b & (pred == c)
        gb = gt_b & (gt == c)
        total_p += int(pb.sum())
        total_g += int(gb.sum())
        if gb.any():
            tp_p += int((pb & _dilate_chebyshev(gb, tolerance)).sum())
        if pb.any():
            tp_g += int((gb & _dilate_chebyshev(pb, tolerance)).sum())
    precision = tp_p / total_p if total_p else 0.0
    recall = tp_g / total_g if total_g else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def adjacency_counts(gt: np.ndarray, n_classes: int) -> np.ndarray:
    """Symmetric n x n counts of 4-adjacent cell pairs with differing
    labels; each unordered edge counted once per direction pair."""
    gt = np.asarray(gt)
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    for a, b in (
        (gt[:-1, :].ravel(), gt[1:, :].ravel()),
        (gt[:, :-1].ravel(), gt[:, 1:].ravel()),
    ):
        diff = a != b
        np.add.at(counts, (a[diff], b[diff]), 1)
    return counts + counts.T - np.diag(np.diag(counts))  # symmetrize unordered edges


@dataclass(frozen=True)
class BcwcRow:
    class_id: int
    partner_id: int
    adjacency: int
    similarity: float


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def bcwc_curve(weights: np.ndarray, counts: np.ndarray) -> list[BcwcRow]:
    """For each class, pair it with its most-adjacent partner and report
    the cosine similarity of the two weight columns, sorted by adjacency
    count descending.  Classes with no adjacency anywhere are excluded.

    `weights` is C x n (one column per class)."""
    n = counts.shape[0]
    rows = []
    for a in range(n):
        if counts[a].sum() == 0:
            continue
        partner = int(counts[a].argmax())  # argmax breaks ties toward smaller id
        rows.append(
            BcwcRow(
                class_id=a,
                partner_id=partner,
                adjacency=int(counts[a, partner]),
                similarity=cosine_similarity(weights[:, a], weights[:, partner]),
            )
        )
    rows.sort(key=lambda r: (-r.adjacency, r.class_id))
    return rows
