"""Point-level detection metrics and the NAB changepoint score.

The NAB scorer follows the public SKAB evaluation harness: windows sit to the
left of each true changepoint, only the first detection in a window scores
(on a tanh-shaped curve from ``w_tp`` at the left edge down to ``w_fp`` at the
right edge), each detection outside every window costs ``w_fp`` and each
missed window costs ``w_fn``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, UndefinedRateError


@dataclass(frozen=True)
class ConfusionCounts:
    TP: int
    FP: int
    FN: int
    TN: int

    def __post_init__(self):
        if min(self.TP, self.FP, self.FN, self.TN) < 0:
            raise ContractError("confusion counts must be non-negative")

    @property
    def total(self):
        return self.TP + self.FP + self.FN + self.TN

    def __add__(self, other):
        return ConfusionCounts(self.TP + other.TP, self.FP + other.FP,
                               self.FN + other.FN, self.TN + other.TN)


def _flags(x, name):
    x = np.asarray(x)
    if x.ndim != 1:
        raise ContractError(f"{name} must be a 1-D flag array")
    if x.dtype != bool:
        if not np.isin(x, (0, 1)).all():
            raise ContractError(f"{name} must contain only 0/1")
        x = x.astype(bool)
    return x


def confusion(pred, truth):
    pred, truth = _flags(pred, "pred"), _flags(truth, "truth")
    if len(pred) != len(truth):
        raise ContractError(f"length mismatch: {len(pred)} predictions, {len(truth)} labels")
    return ConfusionCounts(int((pred & truth).sum()), int((pred & ~truth).sum()),
                           int((~pred & truth).sum()), int((~pred & ~truth).sum()))


def f1(c):
    """TP / (TP + (FP + FN)/2); 0 when there is nothing to score."""
    denom = c.TP + 0.5 * (c.FP + c.FN)
    return c.TP / denom if denom > 0 else 0.0


def far_mar(c):
    """False-alarm and missed-alarm rates, in percent."""
    if c.FP + c.TN == 0:
        raise UndefinedRateError("FAR undefined: no negative points")
    if c.FN + c.TP == 0:
        raise UndefinedRateError("MAR undefined: no positive points")
    return 100.0 * c.FP / (c.FP + c.TN), 100.0 * c.FN / (c.FN + c.TP)


# ---------------------------------------------------------------------------
# NAB
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NabProfile:
    name: str
    w_tp: float
    w_fp: float
    w_fn: float

    def __post_init__(self):
        if not all(np.isfinite([self.w_tp, self.w_fp, self.w_fn])):
            raise ContractError("NAB weights must be finite")
        if not self.w_fp <= 0 <= self.w_tp:
            raise ContractError("NAB weights need w_fp <= 0 <= w_tp")


STANDARD = NabProfile("standard", 1.0, -0.11, -1.0)
LOW_FP = NabProfile("lowFP", 1.0, -0.22, -1.0)
LOW_FN = NabProfile("lowFN", 1.0, -0.11, -2.0)
PROFILES = (STANDARD, LOW_FP, LOW_FN)

_CURVE_POINTS = 1000


def _curve(profile):
    x = np.linspace(-np.pi / 2, np.pi / 2, _CURVE_POINTS)
    half = (profile.w_tp - profile.w_fp) / 2
    return -half * np.tanh(x) / np.tanh(np.pi / 2) + half + profile.w_fp


def window_reward(position, profile):
    """Reward for a first detection at relative position 0..1 inside a window."""
    event = min(int(position * _CURVE_POINTS), _CURVE_POINTS - 1)
    return float(_curve(profile)[event])


def nab_windows(changepoints, times=None, window_width=None, portion=0.1):
    """Scoring windows ``[cp - width, cp]`` (in time units) for each changepoint.

    ``width`` is ``window_width`` if given, else ``portion`` of the series span
    divided by (number of changepoints + 1). Overlaps are resolved by moving the
    later window's left edge to the earlier window's right edge.
    """
    cp = _flags(changepoints, "changepoints")
    times = np.arange(len(cp), dtype=np.float64) if times is None else np.asarray(times, dtype=np.float64)
    if times.shape != cp.shape:
        raise ContractError("times and changepoints differ in length")
    if len(times) > 1 and np.any(np.diff(times) < 0):
        raise ContractError("times must be sorted")
    stamps = times[cp]
    if len(stamps) == 0:
        return []
    width = window_width if window_width is not None else \
        (times[-1] - times[0]) / (len(stamps) + 1) * portion
    if not width >= 0:
        raise ContractError("window width must be non-negative")
    windows = [[t - width, t] for t in stamps]
    for a, b in zip(windows, windows[1:]):
        if a[1] >= b[0]:
            b[0] = a[1]
    return [tuple(w) for w in windows]


def _check_windows(windows):
    for (l0, r0), (l1, r1) in zip(windows, windows[1:]):
        if l1 < r0 or l1 < l0:
            raise ContractError("windows must be sorted and non-overlapping")
    for left, right in windows:
        if right < left:
            raise ContractError(f"malformed window ({left}, {right})")


def nab_outcome(detections, windows, times=None):
    """Split detections into first-hit positions per window, misses and false positives.

    Returns ``(positions, n_missed, n_false)`` where ``positions`` holds the
    relative position (0..1) of the earliest detection in each hit window.
    Windows are inclusive on both edges.
    """
    det = _flags(detections, "detections")
    times = np.arange(len(det), dtype=np.float64) if times is None else np.asarray(times, dtype=np.float64)
    if times.shape != det.shape:
        raise ContractError("times and detections differ in length")
    windows = [tuple(map(float, w)) for w in windows]
    _check_windows(windows)
    hits = times[det]
    if not windows:
        return [], 0, len(hits)
    inside = np.zeros(len(hits), dtype=bool)
    positions, missed = [], 0
    for left, right in windows:
        mask = (hits >= left) & (hits <= right)
        inside |= mask
        if not mask.any():
            missed += 1
            continue
        first = hits[mask].min()
        positions.append((first - left) / (right - left) if right > left else 0.0)
    return positions, missed, int((~inside).sum())


def nab_raw(detections, windows, profile=STANDARD, times=None):
    """Un-normalised ``(score, null, perfect)`` for one series."""
    positions, missed, false = nab_outcome(detections, windows, times)
    score = profile.w_fp * false + profile.w_fn * missed
    score += sum(window_reward(p, profile) for p in positions)
    n = len(windows)
    return score, n * profile.w_fn, n * profile.w_tp


def normalise_nab(score, null, perfect):
    if perfect == null:
        raise UndefinedRateError("NAB undefined without changepoint windows")
    return 100.0 * (score - null) / (perfect - null)


def nab_score(detections, windows, profile=STANDARD, times=None):
    """NAB score: 0 for a detector that never fires, 100 for a perfect one."""
    return normalise_nab(*nab_raw(detections, windows, profile, times))


def nab_pooled(series, profile=STANDARD):
    """Score several ``(detections, windows, times)`` triples as one pool,
    summing raw, null and perfect totals before normalising."""
    totals = np.zeros(3)
    for det, win, times in series:
        totals += nab_raw(det, win, profile, times)
    return normalise_nab(*totals)


def changepoints_from_flags(flags):
    """Predicted changepoints from point flags: every 0/1 transition, plus the
    first point if it is already flagged."""
    flags = _flags(flags, "flags").astype(np.int8)
    cp = np.zeros(len(flags), dtype=bool)
    if len(flags):
        cp[0] = bool(flags[0])
        cp[1:] = np.diff(flags) != 0
    return cp


def scaled_average(f1_score, nab_standard):
    """(F1 + NAB/100) / 2, with negative NAB treated as 0."""
    return (f1_score + max(nab_standard, 0.0) / 100.0) / 2.0
