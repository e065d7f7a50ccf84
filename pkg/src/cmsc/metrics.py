"""Boundary prediction metrics.

Precision counts a predicted boundary pixel as correct when some ground
truth boundary pixel lies within Chebyshev distance ``tol`` (default 1);
recall is the mirror image. This proximity matching is implemented by
dilating the opposite image with a square structuring element, and on
aggregate sets the counts are summed before the ratios are formed. A mask
restricts both images to the pixels inside it.

Empty-set conventions: no predicted pixels gives precision 1, no ground
truth pixels gives recall 1, and F is 0 when P + R is 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

from .tensor import ShapeError, Tensor, mse_loss


class MatchResult(NamedTuple):
    matched_pred: int
    total_pred: int
    matched_gt: int
    total_gt: int

    def __add__(self, other):
        return MatchResult(*(a + b for a, b in zip(self, other)))


@dataclass(frozen=True)
class PrPoint:
    threshold: float
    precision: float
    recall: float
    f_measure: float


@dataclass(frozen=True)
class PrCurve:
    points: List[PrPoint]
    auc: float
    best_f: float


@dataclass(frozen=True)
class ErrorProfile:
    """Mean absolute error indexed by Chebyshev distance from the patch border."""

    bins: np.ndarray


def _as_binary(img, name):
    arr = np.asarray(img)
    if not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} must be binary")
    return arr.astype(bool)


def _dilate_chebyshev(binary, tol):
    if tol == 0:
        return binary
    out = binary.copy()
    h, w = binary.shape
    for dy in range(-tol, tol + 1):
        for dx in range(-tol, tol + 1):
            if dy == 0 and dx == 0:
                continue
            ys = slice(max(0, dy), min(h, h + dy))
            xs = slice(max(0, dx), min(w, w + dx))
            ys_src = slice(max(0, -dy), min(h, h - dy))
            xs_src = slice(max(0, -dx), min(w, w - dx))
            out[ys, xs] |= binary[ys_src, xs_src]
    return out


def match_counts(pred, gt, tol=1, mask=None):
    """Proximity-matched pixel counts for one binary image pair."""
    pred = _as_binary(pred, "pred")
    gt = _as_binary(gt, "gt")
    if pred.shape != gt.shape:
        raise ShapeError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if mask is not None:
        m = _as_binary(mask, "mask")
        if m.shape != pred.shape:
            raise ShapeError(f"mask shape {m.shape} does not match {pred.shape}")
        pred = pred & m
        gt = gt & m
    matched_pred = int((pred & _dilate_chebyshev(gt, tol)).sum())
    matched_gt = int((gt & _dilate_chebyshev(pred, tol)).sum())
    return MatchResult(matched_pred, int(pred.sum()), matched_gt, int(gt.sum()))


def prf_from_counts(counts):
    p = 1.0 if counts.total_pred == 0 else counts.matched_pred / counts.total_pred
    r = 1.0 if counts.total_gt == 0 else counts.matched_gt / counts.total_gt
    f = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return p, r, f


def bpr(pred, gt, tol=1, mask=None):
    """Boundary precision, recall and F for one binary pair."""
    counts = match_counts(pred, gt, tol=tol, mask=mask)
    p, r, f = prf_from_counts(counts)
    return p, r, f, counts


def default_thresholds(n=255):
    """n evenly spaced binarization thresholds in the open interval (0, 1)."""
    return np.linspace(0.0, 1.0, n + 2)[1:-1]


def pr_curve(pred_conf, gt_binary, thresholds=None, tol=1, mask=None):
    """Threshold sweep over one pair or an aligned stack of pairs.

    Confidences are binarized with >= at each threshold and the match
    counts are accumulated over all pairs before forming P, R and F. The
    area under the curve integrates precision over recall by trapezoid,
    points sorted by (recall, precision).
    """
    pred_conf = np.asarray(pred_conf, dtype=np.float32)
    gt_binary = np.asarray(gt_binary)
    if pred_conf.shape != gt_binary.shape:
        raise ShapeError(f"shape mismatch: {pred_conf.shape} vs {gt_binary.shape}")
    if pred_conf.ndim == 2:
        pred_conf = pred_conf[None]
        gt_binary = gt_binary[None]
        mask_stack = None if mask is None else [mask]
    else:
        mask_stack = None if mask is None else (
            [mask] * len(pred_conf) if np.asarray(mask).ndim == 2 else list(mask)
        )
    if pred_conf.min() < 0.0 or pred_conf.max() > 1.0:
        raise ValueError("confidences must lie in [0, 1]")
    if thresholds is None:
        thresholds = default_thresholds()
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if thresholds.size == 0:
        raise ValueError("need at least one threshold")
    if (np.diff(thresholds) <= 0).any():
        raise ValueError("thresholds must be strictly increasing")

    points = []
    for th in thresholds:
        total = MatchResult(0, 0, 0, 0)
        for i, (conf, gt) in enumerate(zip(pred_conf, gt_binary)):
            m = None if mask_stack is None else mask_stack[i]
            total = total + match_counts(conf >= th, gt, tol=tol, mask=m)
        p, r, f = prf_from_counts(total)
        points.append(PrPoint(float(th), p, r, f))

    by_recall = sorted(points, key=lambda pt: (pt.recall, pt.precision))
    auc = 0.0
    for a, b in zip(by_recall, by_recall[1:]):
        auc += (b.recall - a.recall) * (a.precision + b.precision) / 2
    return PrCurve(points=points, auc=auc, best_f=max(pt.f_measure for pt in points))


def mse_metric(pred, gt):
    """Mean squared pixel difference (same implementation as the training loss)."""
    return mse_loss(Tensor(np.asarray(pred, dtype=np.float32)),
                    Tensor(np.asarray(gt, dtype=np.float32))).item()


def laplacian_sharpness(image):
    """Mean absolute 3x3 discrete Laplacian response over interior pixels."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] < 3 or img.shape[1] < 3:
        raise ShapeError(f"need a single-channel image of at least 3x3, got {img.shape}")
    resp = (
        -4.0 * img[1:-1, 1:-1]
        + img[:-2, 1:-1]
        + img[2:, 1:-1]
        + img[1:-1, :-2]
        + img[1:-1, 2:]
    )
    return float(np.abs(resp).mean())


def border_distance_map(patch):
    """Chebyshev distance of every patch pixel from the patch border."""
    ys, xs = np.mgrid[0:patch, 0:patch]
    return np.minimum.reduce([ys, xs, patch - 1 - ys, patch - 1 - xs])


def error_vs_border_distance(preds, gts, patch):
    """Per-pixel absolute error averaged into border-distance rings."""
    preds = np.asarray(preds, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    if preds.shape != gts.shape:
        raise ShapeError(f"shape mismatch: {preds.shape} vs {gts.shape}")
    if preds.ndim == 2:
        preds, gts = preds[None], gts[None]
    if preds.shape[1:] != (patch, patch):
        raise ShapeError(f"patches must be {patch}x{patch}, got {preds.shape[1:]}")
    dist = border_distance_map(patch)
    err = np.abs(preds - gts)
    bins = np.zeros(patch // 2, dtype=np.float64)
    for d in range(patch // 2):
        ring = dist == d
        bins[d] = err[:, ring].mean()
    return ErrorProfile(bins=bins)


def format_metric_table(rows):
    """Aligned plain-text table for (step, metric, value) rows."""
    header = ("step", "metric", "value")
    cells = [(str(s), str(m), f"{v:.6f}") for s, m, v in rows]
    widths = [max(len(h), *(len(c[i]) for c in cells)) if cells else len(h)
              for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    for c in cells:
        lines.append("  ".join(v.ljust(w) for v, w in zip(c, widths)))
    return "\n".join(lines)


def write_metric_csv(rows, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write("step,metric,value\n")
        for s, m, v in rows:
            f.write(f"{s},{m},{v:.10g}\n")
