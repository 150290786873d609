"""Composite segmentation loss and binary semantic mIoU / mAcc.

Each loss returns its value; the ``*_grad`` companions return the gradient
with respect to the network outputs they consume (logits or the IoU score),
which the decoder's backward pass chains through.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .raster import resample_matrix

EPS = 1e-7


class NumericError(ValueError):
    pass


def _as_2d(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim == 3:
        if a.shape[0] != 1:
            raise ValueError(f"expected a single-channel raster, got shape {a.shape}")
        a = a[0]
    return a


def _check_dims(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")


def seg_loss(pred_probs: np.ndarray, gt: np.ndarray) -> float:
    """Mean binary cross-entropy with probabilities clamped to [EPS, 1 - EPS]."""
    p = _as_2d(pred_probs).astype(np.float64)
    y = _as_2d(gt).astype(np.float64)
    _check_dims(p, y)
    p = np.clip(p, EPS, 1.0 - EPS)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x)))


def seg_loss_grad_logits(logits: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """d seg_loss(sigmoid(logits), gt) / d logits, zero where the clamp is active."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(gt, dtype=np.float64).reshape(z.shape)
    p = sigmoid(z)
    active = (p > EPS) & (p < 1.0 - EPS)
    return np.where(active, (p - y) / z.size, 0.0)


def binary_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred) != 0
    gt = np.asarray(gt) != 0
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def iou_loss(pred_iou: float, mask_probs: np.ndarray, gt: np.ndarray) -> float:
    """Squared error between the predicted IoU and the IoU of the 0.5-thresholded mask."""
    m = _as_2d(mask_probs)
    y = _as_2d(gt)
    _check_dims(m, y)
    actual = binary_iou(m > 0.5, y)
    return float((pred_iou - actual) ** 2)


def iou_loss_grad(pred_iou: float, mask_probs: np.ndarray, gt: np.ndarray) -> float:
    return 2.0 * (pred_iou - binary_iou(_as_2d(mask_probs) > 0.5, _as_2d(gt)))


def _upsample_to(x: np.ndarray, h: int, w: int) -> np.ndarray:
    return resample_matrix(x.shape[0], h) @ x @ resample_matrix(x.shape[1], w).T


def stability_loss(logits_per_scale: list[np.ndarray]) -> float:
    """Mean over coarser maps of mean |upsample(coarse) - full|; the first map is full-res."""
    if len(logits_per_scale) < 2:
        raise ValueError("stability loss needs at least two scales")
    full = _as_2d(logits_per_scale[0]).astype(np.float64)
    h, w = full.shape
    terms = [np.mean(np.abs(_upsample_to(_as_2d(c).astype(np.float64), h, w) - full))
             for c in logits_per_scale[1:]]
    return float(np.mean(terms))


def stability_loss_grad(logits_per_scale: list[np.ndarray]) -> list[np.ndarray]:
    full = _as_2d(logits_per_scale[0]).astype(np.float64)
    h, w = full.shape
    m = len(logits_per_scale) - 1
    g_full = np.zeros_like(full)
    grads = []
    for c in logits_per_scale[1:]:
        c = _as_2d(c).astype(np.float64)
        mh, mw = resample_matrix(c.shape[0], h), resample_matrix(c.shape[1], w)
        s = np.sign(mh @ c @ mw.T - full) / (full.size * m)
        g_full -= s
        grads.append(mh.T @ s @ mw)
    return [g_full] + grads


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 0.01

    def __post_init__(self):
        for name in ("lambda1", "lambda2"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative")


@dataclass(frozen=True)
class LossReport:
    l_seg: float
    l_iou: float
    l_stability: float
    l_total: float


def total_loss(parts: tuple[float, float, float], w: LossWeights = LossWeights()) -> LossReport:
    l_seg, l_iou, l_stab = (float(v) for v in parts)
    for name, v in (("l_seg", l_seg), ("l_iou", l_iou), ("l_stability", l_stab)):
        if not math.isfinite(v):
            raise NumericError(f"{name} is not finite: {v}")
    return LossReport(l_seg, l_iou, l_stab, l_seg + w.lambda1 * l_iou + w.lambda2 * l_stab)


# --------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class EvalReport:
    per_class_iou: tuple[float, float]
    miou: float
    per_class_acc: tuple[float, float]
    macc: float
    confusion: tuple[tuple[int, int], tuple[int, int]]  # [gt][pred], class 0 = background

    def to_dict(self) -> dict:
        return {
            "per_class_iou": list(self.per_class_iou),
            "miou": self.miou,
            "per_class_acc": list(self.per_class_acc),
            "macc": self.macc,
            "confusion": [list(r) for r in self.confusion],
        }


def confusion(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """2x2 counts, rows = ground truth class, columns = predicted class."""
    p = _as_2d(pred)
    g = _as_2d(gt)
    _check_dims(p, g)
    idx = 2 * (g != 0).astype(np.int64) + (p != 0).astype(np.int64)
    return np.bincount(idx.ravel(), minlength=4).reshape(2, 2)


def report_from_confusion(cm: np.ndarray) -> EvalReport:
    cm = np.asarray(cm, dtype=np.int64)
    ious, accs = [], []
    for c in range(2):
        tp = cm[c, c]
        fn = cm[c].sum() - tp
        fp = cm[:, c].sum() - tp
        denom = tp + fp + fn
        ious.append(1.0 if denom == 0 else tp / denom)
        accs.append(1.0 if tp + fn == 0 else tp / (tp + fn))
    return EvalReport(
        per_class_iou=(float(ious[0]), float(ious[1])),
        miou=float(np.mean(ious)),
        per_class_acc=(float(accs[0]), float(accs[1])),
        macc=float(np.mean(accs)),
        confusion=tuple(tuple(int(v) for v in row) for row in cm),
    )


def evaluate(pred: np.ndarray, gt: np.ndarray) -> EvalReport:
    """Binary semantic metrics: any nonzero label counts as target."""
    return report_from_confusion(confusion(pred, gt))
