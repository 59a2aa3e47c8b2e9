"""Segmentation metrics: overlap scores plus the Hausdorff boundary distance.

Conventions for degenerate inputs (never defined upstream, chosen for
bounded, monotone behavior): Dice of two empty masks is 1 and of one
empty mask 0; the Hausdorff distance involving any empty boundary is the
image diagonal. SEN/SPE/MAE are computed on foreground-vs-background
binarized maps; Dice is macro-averaged over foreground classes and mIoU
over all classes.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, ValidationError


@dataclass
class MetricReport:
    miou: float
    dsc: float
    sen: float
    spe: float
    hd: float
    mae: float


def _check_pair(pred, target):
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"metric: shape mismatch {pred.shape} vs {target.shape}")
    if pred.ndim != 2:
        raise ShapeError(f"metric: masks must be 2-d, got {pred.shape}")
    return pred.astype(np.int64), target.astype(np.int64)


def _infer_classes(pred, target, n_classes):
    if n_classes is None:
        return max(2, int(max(pred.max(initial=0), target.max(initial=0))) + 1)
    if pred.max(initial=0) >= n_classes or target.max(initial=0) >= n_classes:
        raise ValidationError(f"labels exceed n_classes={n_classes}")
    return int(n_classes)


def dsc(pred, target, n_classes=None):
    """Dice overlap, macro-averaged over foreground classes."""
    pred, target = _check_pair(pred, target)
    n_classes = _infer_classes(pred, target, n_classes)
    scores = []
    for c in range(1, n_classes):
        p = pred == c
        t = target == c
        size = p.sum() + t.sum()
        if size == 0:
            scores.append(1.0)
        else:
            scores.append(2.0 * np.logical_and(p, t).sum() / size)
    return float(np.mean(scores))


def miou(pred, target, n_classes=None):
    """Mean intersection-over-union across all classes (background too)."""
    pred, target = _check_pair(pred, target)
    n_classes = _infer_classes(pred, target, n_classes)
    scores = []
    for c in range(n_classes):
        p = pred == c
        t = target == c
        union = np.logical_or(p, t).sum()
        if union == 0:
            scores.append(1.0)
        else:
            scores.append(np.logical_and(p, t).sum() / union)
    return float(np.mean(scores))


def _binary_counts(pred, target):
    p = pred > 0
    t = target > 0
    tp = np.logical_and(p, t).sum()
    fp = np.logical_and(p, ~t).sum()
    fn = np.logical_and(~p, t).sum()
    tn = np.logical_and(~p, ~t).sum()
    return tp, fp, fn, tn


def sen(pred, target):
    """Sensitivity TP/(TP+FN) on binarized maps; 1 when nothing to find."""
    pred, target = _check_pair(pred, target)
    tp, _, fn, _ = _binary_counts(pred, target)
    return float(tp / (tp + fn)) if tp + fn > 0 else 1.0


def spe(pred, target):
    """Specificity TN/(TN+FP) on binarized maps; 1 without true negatives."""
    pred, target = _check_pair(pred, target)
    _, fp, _, tn = _binary_counts(pred, target)
    return float(tn / (tn + fp)) if tn + fp > 0 else 1.0


def mae(pred, target):
    """Mean absolute error between binarized maps."""
    pred, target = _check_pair(pred, target)
    return float(np.abs((pred > 0).astype(np.float64)
                        - (target > 0).astype(np.float64)).mean())


def boundary_points(mask):
    """Foreground pixels with a background (or out-of-image) 4-neighbor."""
    mask = np.asarray(mask) > 0
    padded = np.pad(mask, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    return np.argwhere(mask & ~interior).astype(np.float64)


def _directed_hd(a, b):
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
    return float(np.sqrt(d2.min(axis=1).max()))


def hausdorff(pred, target):
    """Exact symmetric Hausdorff distance between foreground boundaries."""
    pred, target = _check_pair(pred, target)
    h, w = pred.shape
    diagonal = float(np.sqrt(h * h + w * w))
    a = boundary_points(pred)
    b = boundary_points(target)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return diagonal
    return max(_directed_hd(a, b), _directed_hd(b, a))


def evaluate_pair(pred, target, n_classes=None):
    return MetricReport(
        miou=miou(pred, target, n_classes),
        dsc=dsc(pred, target, n_classes),
        sen=sen(pred, target),
        spe=spe(pred, target),
        hd=hausdorff(pred, target),
        mae=mae(pred, target),
    )


def mean_report(reports):
    """Field-wise mean of a list of MetricReports as a plain dict."""
    if not reports:
        raise ValidationError("mean_report: no reports")
    return {name: float(np.mean([getattr(r, name) for r in reports]))
            for name in ("miou", "dsc", "sen", "spe", "hd", "mae")}
