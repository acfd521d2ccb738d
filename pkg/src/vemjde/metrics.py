"""Evaluation against ground truth: errors, detection curves, HRF shape."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MetricError
from .model import MixtureParams

__all__ = [
    "mse",
    "RocCurve",
    "roc_curve",
    "HrfFeatures",
    "hrf_features",
    "parcel_activation_flag",
]


def mse(estimate: np.ndarray, truth: np.ndarray) -> float:
    """Mean squared elementwise difference."""
    estimate = np.asarray(estimate, dtype=float).ravel()
    truth = np.asarray(truth, dtype=float).ravel()
    if estimate.size != truth.size:
        raise MetricError(
            f"length mismatch: {estimate.size} vs {truth.size}"
        )
    return float(np.mean((estimate - truth) ** 2))


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float


def roc_curve(scores: np.ndarray, truth: np.ndarray) -> RocCurve:
    """Detection curve over all unique score thresholds.

    ``truth`` is binary (nonzero = positive). Points are ordered from
    the all-negative corner to (1, 1) and are monotone in both
    coordinates; the area uses the trapezoid rule.
    """
    scores = np.asarray(scores, dtype=float).ravel()
    truth = np.asarray(truth).ravel().astype(bool)
    if scores.size != truth.size:
        raise MetricError("scores and truth must have equal length")
    n_pos = int(truth.sum())
    n_neg = truth.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC undefined: truth contains a single class")
    order = np.argsort(-scores, kind="stable")
    sorted_truth = truth[order]
    sorted_scores = scores[order]
    tp = np.cumsum(sorted_truth)
    fp = np.cumsum(~sorted_truth)
    # Keep one point per distinct threshold (the last index of each run).
    last = np.nonzero(np.diff(sorted_scores, append=np.nan))[0]
    tpr = np.concatenate([[0.0], tp[last] / n_pos])
    fpr = np.concatenate([[0.0], fp[last] / n_neg])
    thresholds = np.concatenate([[np.inf], sorted_scores[last]])
    auc = float(np.trapezoid(tpr, fpr))
    return RocCurve(fpr=fpr, tpr=tpr, thresholds=thresholds, auc=auc)


@dataclass(frozen=True)
class HrfFeatures:
    peak_value: float
    time_to_peak: float
    time_to_undershoot: float
    fwhm: float


def _interp_crossing(t0, t1, v0, v1, level):
    return t0 + (level - v0) * (t1 - t0) / (v1 - v0)


def hrf_features(h: np.ndarray, dt: float) -> HrfFeatures:
    """Peak value, time-to-peak, time-to-undershoot and FWHM.

    The peak time is refined by a quadratic fit through the three taps
    around the maximum so it is not quantized to the dt grid; widths use
    linear interpolation on both flanks at half the peak value.
    """
    h = np.asarray(h, dtype=float)
    if h.size < 5:
        raise MetricError("need at least 5 taps")
    if np.all(h == 0):
        raise MetricError("flat filter has no peak")
    t = np.arange(h.size) * dt
    k = int(np.argmax(h))
    pv = float(h[k])
    if pv <= 0:
        raise MetricError("no positive peak")
    # Quadratic sub-sample refinement around the argmax.
    if 0 < k < h.size - 1:
        denom = h[k - 1] - 2 * h[k] + h[k + 1]
        shift = 0.5 * (h[k - 1] - h[k + 1]) / denom if denom < 0 else 0.0
        ttp = (k + shift) * dt
    else:
        ttp = k * dt
    # Undershoot: global minimum strictly after the peak.
    tail = h[k + 1:]
    ttu = float(t[k + 1 + int(np.argmin(tail))]) if tail.size else float(t[k])
    # FWHM by linear interpolation at pv / 2 on each flank.
    half = pv / 2.0
    left = None
    for i in range(k, 0, -1):
        if h[i - 1] <= half <= h[i]:
            left = _interp_crossing(t[i - 1], t[i], h[i - 1], h[i], half)
            break
    right = None
    for i in range(k, h.size - 1):
        if h[i] >= half >= h[i + 1]:
            right = _interp_crossing(t[i], t[i + 1], h[i], h[i + 1], half)
            break
    if left is None or right is None:
        raise MetricError("peak never drops below half maximum")
    return HrfFeatures(peak_value=pv, time_to_peak=float(ttp),
                       time_to_undershoot=ttu, fwhm=float(right - left))


def parcel_activation_flag(mixture: MixtureParams, threshold: float = 8.0
                           ) -> bool:
    """True when some condition's activated-class mean reaches threshold."""
    return bool(np.max(mixture.means[1]) >= threshold)
