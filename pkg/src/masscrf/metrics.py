"""Dice index, trimap boundary accuracy and McNemar's paired test."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, special

from .errors import BadParam, NoDiscordantPairs, ShapeMismatch

_EIGHT = np.ones((3, 3), dtype=bool)


class EmptyBandWarning(UserWarning):
    """Trimap band is empty (groundtruth is all background or all foreground)."""


@dataclass(frozen=True)
class ConfusionCounts:
    TP: int
    FP: int
    FN: int
    TN: int

    @property
    def total(self) -> int:
        return self.TP + self.FP + self.FN + self.TN

    def dice(self) -> float:
        denom = 2 * self.TP + self.FP + self.FN
        return 1.0 if denom == 0 else 2.0 * self.TP / denom


def _pair(pred, gt) -> tuple:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs groundtruth {gt.shape}")
    return pred, gt


def confusion(pred, gt) -> ConfusionCounts:
    pred, gt = _pair(pred, gt)
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


def dice(pred, gt) -> float:
    """2|P∩G| / (|P| + |G|); two empty masks score 1.0."""
    pred, gt = _pair(pred, gt)
    total = np.count_nonzero(pred) + np.count_nonzero(gt)
    if total == 0:
        return 1.0
    return 2.0 * np.count_nonzero(pred & gt) / total


def boundary(gt) -> np.ndarray:
    """Pixels with an 8-neighbour of the other label (both sides of the contour)."""
    gt = np.asarray(gt).astype(bool)
    near_fg = ndimage.binary_dilation(gt, structure=_EIGHT)
    near_bg = ndimage.binary_dilation(~gt, structure=_EIGHT)
    return (gt & near_bg) | (~gt & near_fg)


def trimap_band(gt, width: int) -> np.ndarray:
    """Pixels within Chebyshev distance ``width`` of the groundtruth boundary."""
    if width < 1:
        raise BadParam(f"trimap width must be >= 1, got {width}")
    edge = boundary(gt)
    if not edge.any():
        return edge
    square = np.ones((2 * width + 1, 2 * width + 1), dtype=bool)
    return ndimage.binary_dilation(edge, structure=square)


def trimap_counts(pred, gt, width: int) -> tuple:
    """(correct, total) pixel counts inside the band."""
    pred, gt = _pair(pred, gt)
    band = trimap_band(gt, width)
    return int(np.count_nonzero((pred == gt) & band)), int(np.count_nonzero(band))


def trimap_accuracy(pred, gt, width: int) -> float:
    correct, total = trimap_counts(pred, gt, width)
    if total == 0:
        warnings.warn("empty trimap band; accuracy reported as 1.0", EmptyBandWarning, stacklevel=2)
        return 1.0
    return correct / total


def mcnemar(model_a_correct, model_b_correct) -> tuple:
    """Chi-square statistic (1 dof, no continuity correction) and its p-value."""
    a = np.asarray(model_a_correct).astype(bool).ravel()
    b = np.asarray(model_b_correct).astype(bool).ravel()
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.size} vs {b.size} paired outcomes")
    only_a = int(np.count_nonzero(a & ~b))
    only_b = int(np.count_nonzero(~a & b))
    return mcnemar_from_counts(only_a, only_b)


def mcnemar_from_counts(only_a: int, only_b: int) -> tuple:
    if only_a + only_b == 0:
        raise NoDiscordantPairs("both models agree on every pixel")
    chi2 = (only_a - only_b) ** 2 / (only_a + only_b)
    # chi-square(1) survival function as the regularized upper incomplete gamma Q(1/2, x/2)
    return float(chi2), float(special.gammaincc(0.5, chi2 / 2.0))
