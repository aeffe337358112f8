"""Per-feature reconstruction-error thresholds and anomaly flagging."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError


@dataclass
class ThresholdProfile:
    per_feature_threshold: np.ndarray   # [F]
    sensitivity: float
    calibration_errors: np.ndarray      # [N, F] window MAEs on the calibration set
    normalizer: object = None

    @property
    def n_features(self):
        return len(self.per_feature_threshold)

    def with_sensitivity(self, sensitivity):
        """Same calibration, thresholds rescaled to ``sensitivity``."""
        if not sensitivity > 0:
            raise ContractError("sensitivity must be positive")
        base = self.calibration_errors.max(axis=0)
        return ThresholdProfile(sensitivity * base, sensitivity, self.calibration_errors, self.normalizer)


@dataclass
class PointLabels:
    index: np.ndarray              # original series index of each point
    flags: np.ndarray              # [L] any-feature flag
    per_feature_flags: np.ndarray  # [L, F]
    window_errors: np.ndarray      # [N, F]

    def to_text(self, delimiter=","):
        F = self.per_feature_flags.shape[1]
        lines = [delimiter.join(["index", "flag"] + [f"flag_f{f}" for f in range(F)])]
        for i, flag, row in zip(self.index, self.flags, self.per_feature_flags):
            lines.append(delimiter.join([str(int(i)), str(int(flag))] + [str(int(v)) for v in row]))
        return "\n".join(lines) + "\n"


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    threshold: float
    feature: int

    def to_text(self, delimiter=","):
        lines = [f"# feature={self.feature} threshold={self.threshold:.12g}",
                 delimiter.join(["bin_left", "bin_right", "count"])]
        for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
            lines.append(delimiter.join([f"{lo:.12g}", f"{hi:.12g}", str(int(c))]))
        return "\n".join(lines) + "\n"


def window_mae(x, x_hat):
    """Mean absolute error per feature over the time axis; batched inputs allowed."""
    x, x_hat = np.asarray(x, dtype=np.float64), np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape or x.ndim < 2:
        raise ShapeError(f"shapes differ or are not [.., T, F]: {x.shape} vs {x_hat.shape}")
    return np.abs(x_hat - x).mean(axis=-2)


def reconstruction_errors(model, windows, batch_size=256):
    w = windows.windows if hasattr(windows, "windows") else np.asarray(windows)
    return window_mae(w, model.predict(w, batch_size))


def calibrate(model, train_windows, sensitivity=1.0):
    """Thresholds = sensitivity x worst training-window MAE, per feature."""
    if len(train_windows) == 0:
        raise ContractError("cannot calibrate on an empty dataset")
    if not sensitivity > 0:
        raise ContractError("sensitivity must be positive")
    errors = reconstruction_errors(model, train_windows)
    return profile_from_errors(errors, sensitivity, getattr(train_windows, "normalizer", None))


def profile_from_errors(errors, sensitivity=1.0, normalizer=None):
    errors = np.asarray(errors, dtype=np.float64)
    if errors.ndim != 2 or len(errors) == 0:
        raise ContractError("calibration errors must be a non-empty [N, F] array")
    return ThresholdProfile(sensitivity * errors.max(axis=0), float(sensitivity), errors, normalizer)


def flag_points(window_errors, thresholds, start_indices, timesteps):
    """Union of exceeding windows over the points they cover.

    Returns ``(index, flags, per_feature_flags)``.
    """
    window_errors = np.asarray(window_errors)
    starts = np.asarray(start_indices)
    exceed = window_errors > np.asarray(thresholds)        # [N, F]
    origin = int(starts.min())
    length = int(starts.max()) - origin + timesteps
    # difference array: +1 at window start, -1 one past its end
    diff = np.zeros((length + 1, exceed.shape[1]), dtype=np.int64)
    np.add.at(diff, starts - origin, exceed.astype(np.int64))
    np.add.at(diff, starts - origin + timesteps, -exceed.astype(np.int64))
    per_feature = np.cumsum(diff, axis=0)[:length] > 0
    return np.arange(origin, origin + length), per_feature.any(axis=1), per_feature


def detect(model, profile, test_windows):
    """Flag points covered by any window whose MAE exceeds a feature threshold."""
    if test_windows.stride != 1:
        raise ContractError("detection needs stride-1 windows")
    if profile.normalizer is not None and not profile.normalizer.same_as(test_windows.normalizer):
        raise ContractError("test windows were not normalised with the calibration statistics")
    if test_windows.n_features != profile.n_features:
        raise ShapeError("test windows and profile differ in feature count")
    errors = reconstruction_errors(model, test_windows)
    index, flags, per_feature = flag_points(errors, profile.per_feature_threshold,
                                            test_windows.start_indices, test_windows.timesteps)
    return PointLabels(index, flags, per_feature, errors)


def error_histogram(profile, feature, bins=30):
    if not 0 <= feature < profile.n_features:
        raise ContractError(f"feature {feature} out of range")
    if bins < 1:
        raise ContractError("bins must be >= 1")
    counts, edges = np.histogram(profile.calibration_errors[:, feature], bins=bins)
    return Histogram(edges, counts, float(profile.per_feature_threshold[feature]), feature)
