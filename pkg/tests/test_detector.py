import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lstmcaps.detector import (
    PointLabels, calibrate, detect, error_histogram, flag_points, profile_from_errors, window_mae,
)
from lstmcaps.errors import ContractError, ShapeError
from lstmcaps.training import fit_normalizer, make_windows, prepare_windows


class Shifted:
    """Stand-in model: reconstruction = input + a fixed offset per window row."""

    def __init__(self, offset=None):
        self.offset = offset

    def predict(self, windows, batch_size=256):
        w = np.asarray(windows, dtype=float)
        return w if self.offset is None else w + self.offset(w)


def brute_force_flags(errors, thresholds, starts, T):
    lo, hi = starts.min(), starts.max() + T
    per = np.zeros((hi - lo, errors.shape[1]), dtype=bool)
    for e, s in zip(errors, starts):
        for f in range(errors.shape[1]):
            if e[f] > thresholds[f]:
                for p in range(s, s + T):
                    per[p - lo, f] = True
    return per.any(axis=1), per


def test_window_mae_examples(rng):
    x = rng.normal(size=(4, 3))
    assert np.array_equal(window_mae(x, x), np.zeros(3))
    assert window_mae(np.zeros((2, 1)), np.array([[1.0], [-1.0]])).tolist() == [1.0]
    r = rng.normal(size=(4, 3))
    assert np.array_equal(window_mae(x, x + r), window_mae(x + r, x))
    assert np.allclose(window_mae(x, x + r), window_mae(x, x - r), atol=1e-15)
    with pytest.raises(ShapeError):
        window_mae(np.zeros((2, 1)), np.zeros((3, 1)))


def test_threshold_is_max_times_sensitivity():
    errs = np.array([[0.1], [0.2], [0.3]])
    assert profile_from_errors(errs).per_feature_threshold.tolist() == [0.3]
    half = profile_from_errors(errs, 0.5).per_feature_threshold
    assert half[0] == pytest.approx(0.15, abs=1e-15)
    assert profile_from_errors(errs).with_sensitivity(2.0).per_feature_threshold[0] == 0.6


def test_perfect_reconstructor_flags_every_nonzero_error(rng):
    data = make_windows(rng.normal(size=(20, 2)), 4)
    prof = calibrate(Shifted(), data)
    assert np.array_equal(prof.per_feature_threshold, [0.0, 0.0])
    nudged = Shifted(lambda w: np.where(np.arange(len(w))[:, None, None] == 3, 1e-9, 0.0))
    labels = detect(nudged, prof, data)
    assert labels.flags.sum() == 4 and labels.flags[3:7].all()


def test_no_training_window_self_flagged(rng):
    x = rng.normal(size=(60, 3))
    stats = fit_normalizer(x)
    data = prepare_windows(stats, x, 5)
    model = Shifted(lambda w: 0.3 * np.sin(w))
    labels = detect(model, calibrate(model, data, 1.0), data)
    assert not labels.flags.any()


def test_single_window_trace():
    errors = np.zeros((6, 3))
    errors[2, 2] = 5.0
    index, flags, per = flag_points(errors, np.ones(3), np.arange(6), 3)
    assert index.tolist() == list(range(8))
    assert np.nonzero(flags)[0].tolist() == [2, 3, 4]
    assert per[:, 2].tolist() == flags.tolist()
    assert not per[:, :2].any()


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 12), st.integers(1, 5), st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_flags_match_brute_force(n, T, F, seed):
    r = np.random.default_rng(seed)
    errors = r.random((n, F))
    thr = r.random(F)
    starts = np.arange(n) + int(r.integers(0, 50))
    index, flags, per = flag_points(errors, thr, starts, T)
    bf, bf_per = brute_force_flags(errors, thr, starts, T)
    assert index[0] == starts[0]
    assert np.array_equal(flags, bf) and np.array_equal(per, bf_per)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.1, 3), st.floats(0.1, 3), st.integers(0, 2**32 - 1))
def test_flags_monotone_in_sensitivity(s1, s2, seed):
    r = np.random.default_rng(seed)
    calib = profile_from_errors(r.random((20, 2)))
    errors = r.random((15, 2)) * 1.5
    lo, hi = sorted((s1, s2))
    _, f_lo, _ = flag_points(errors, calib.with_sensitivity(lo).per_feature_threshold, np.arange(15), 4)
    _, f_hi, _ = flag_points(errors, calib.with_sensitivity(hi).per_feature_threshold, np.arange(15), 4)
    assert np.all(f_hi <= f_lo)


def test_detect_is_repeatable_and_checks_inputs(rng):
    x = rng.normal(size=(40, 2))
    stats = fit_normalizer(x)
    data = prepare_windows(stats, x, 4)
    model = Shifted(lambda w: 0.1 * w ** 2)
    prof = calibrate(model, data)
    a, b = detect(model, prof, data), detect(model, prof, data)
    assert np.array_equal(a.flags, b.flags) and np.array_equal(a.window_errors, b.window_errors)
    with pytest.raises(ContractError):
        detect(model, prof, make_windows(x, 4))          # not normalised with the stats
    with pytest.raises(ContractError):
        detect(model, prof, prepare_windows(stats, x, 4, stride=2))
    with pytest.raises(ContractError):
        calibrate(model, data, sensitivity=0)


def test_point_labels_text(rng):
    _, flags, per = flag_points(np.array([[2.0, 0.0]]), np.ones(2), np.array([5]), 2)
    text = PointLabels(np.array([5, 6]), flags, per, np.array([[2.0, 0.0]])).to_text()
    assert text.splitlines() == ["index,flag,flag_f0,flag_f1", "5,1,1,0", "6,1,1,0"]


@pytest.mark.parametrize("bins", [1, 3, 30])
def test_histogram_counts(bins, rng):
    prof = profile_from_errors(rng.random((25, 2)), sensitivity=1.2)
    h = error_histogram(prof, 1, bins)
    assert len(h.counts) == bins and h.counts.sum() == 25
    assert h.threshold >= h.edges[-1]
    assert h.to_text().startswith("# feature=1 threshold=")
    with pytest.raises(ContractError):
        error_histogram(prof, 2)
    with pytest.raises(ContractError):
        error_histogram(prof, 0, bins=0)
