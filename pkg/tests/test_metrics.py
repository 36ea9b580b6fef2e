"""Metric tests with sklearn as the independent oracle."""

import itertools

import numpy as np
import pytest
from sklearn.metrics import (
    confusion_matrix as sk_confusion,
    precision_recall_fscore_support,
)

from lithoflow.metrics import (
    MetricsError,
    confusion_matrix,
    fragmentation_rate,
    run_lengths,
    weighted_prf,
)


def expand_confusion(mat):
    """Build (y_true, y_pred) realizing a given truth-by-prediction matrix."""
    y_true, y_pred = [], []
    for i, row in enumerate(mat):
        for j, n in enumerate(row):
            y_true.extend([i] * n)
            y_pred.extend([j] * n)
    return np.array(y_true), np.array(y_pred)


# ---------------------------------------------------------------------------
# confusion matrix
# ---------------------------------------------------------------------------

def test_confusion_rows_are_truth():
    y_true = np.array([0, 0, 1, 2, 2])
    y_pred = np.array([0, 1, 1, 2, 0])
    mat = confusion_matrix(y_true, y_pred, 3)
    np.testing.assert_array_equal(mat, [[1, 1, 0], [0, 1, 0], [1, 0, 1]])
    np.testing.assert_array_equal(mat.sum(axis=1), [2, 1, 2])  # supports
    np.testing.assert_array_equal(mat, sk_confusion(y_true, y_pred, labels=[0, 1, 2]))


def test_confusion_validation():
    with pytest.raises(MetricsError):
        confusion_matrix([0, 1], [0], 2)
    with pytest.raises(MetricsError, match="outside"):
        confusion_matrix([0, 3], [0, 0], 2)
    with pytest.raises(MetricsError, match="empty"):
        confusion_matrix([], [], 2)


# ---------------------------------------------------------------------------
# weighted precision / recall / F1
# ---------------------------------------------------------------------------

def test_weighted_prf_worked_example():
    y_true, y_pred = expand_confusion([[2, 1, 0], [0, 2, 0], [1, 0, 4]])
    rep = weighted_prf(y_true, y_pred, 3)
    np.testing.assert_allclose(rep.precision, [2 / 3, 2 / 3, 1.0])
    np.testing.assert_allclose(rep.recall, [2 / 3, 1.0, 0.8])
    np.testing.assert_allclose(rep.f1, [2 / 3, 0.8, 8 / 9])
    np.testing.assert_array_equal(rep.support, [3, 2, 5])
    # oracle: support-weighted mean of per-class F1
    p, r, f, _ = precision_recall_fscore_support(
        y_true, y_pred, labels=[0, 1, 2], average="weighted", zero_division=0
    )
    assert rep.weighted_f1 == pytest.approx(f, abs=1e-12)
    assert rep.weighted_precision == pytest.approx(p, abs=1e-12)
    assert rep.weighted_recall == pytest.approx(r, abs=1e-12)
    assert rep.weighted_f1 == pytest.approx(0.80444, abs=1e-4)
    assert rep.accuracy == pytest.approx(0.8)


def test_weighted_prf_matches_sklearn_randomized():
    rng = np.random.default_rng(8)
    for _ in range(100):
        C = int(rng.integers(2, 6))
        n = int(rng.integers(5, 60))
        y_true = rng.integers(0, C, n)
        y_pred = rng.integers(0, C, n)
        with warnings_ignored():
            rep = weighted_prf(y_true, y_pred, C)
        p, r, f, _ = precision_recall_fscore_support(
            y_true, y_pred, labels=list(range(C)), average="weighted", zero_division=0
        )
        assert rep.weighted_precision == pytest.approx(p, abs=1e-10)
        assert rep.weighted_recall == pytest.approx(r, abs=1e-10)
        assert rep.weighted_f1 == pytest.approx(f, abs=1e-10)


class warnings_ignored:
    def __enter__(self):
        import warnings
        self._cm = warnings.catch_warnings()
        self._cm.__enter__()
        warnings.simplefilter("ignore")

    def __exit__(self, *exc):
        return self._cm.__exit__(*exc)


def test_perfect_prediction():
    y = np.array([0, 1, 2, 1, 0])
    rep = weighted_prf(y, y, 3)
    assert rep.weighted_f1 == 1.0
    assert rep.accuracy == 1.0


def test_never_predicted_class_warns_and_zeroes():
    y_true = np.array([0, 1, 1])
    y_pred = np.array([0, 0, 0])
    with pytest.warns(UserWarning, match="never predicted"):
        rep = weighted_prf(y_true, y_pred, 2)
    assert rep.precision[1] == 0.0
    assert rep.f1[1] == 0.0


def test_zero_support_class_drops_out_of_weighting():
    # class 2 exists in the label space but has no true samples
    y_true = np.array([0, 0, 1, 1])
    y_pred = np.array([0, 0, 1, 1])
    rep = weighted_prf(y_true, y_pred, 3)
    assert rep.support[2] == 0
    assert rep.weighted_f1 == 1.0


# ---------------------------------------------------------------------------
# fragmentation
# ---------------------------------------------------------------------------

def test_run_lengths_matches_groupby_oracle():
    rng = np.random.default_rng(5)
    for _ in range(50):
        labels = rng.integers(0, 3, size=int(rng.integers(1, 40)))
        got = run_lengths(labels)
        want = [(k, len(list(g))) for k, g in itertools.groupby(labels.tolist())]
        assert got == want
        assert sum(n for _, n in got) == labels.size


def test_fragmentation_hand_cases():
    assert fragmentation_rate([0, 0, 0, 1, 1, 1], interval=1.0, min_thickness=3.0) == 0.0
    # runs of length 1,1,3,3: the two singletons are below 3 m
    assert fragmentation_rate([0, 1, 0, 0, 0, 1, 1, 1], interval=1.0,
                              min_thickness=3.0) == 0.5
    assert fragmentation_rate([0, 1, 0, 1], interval=1.0, min_thickness=3.0) == 1.0
    assert fragmentation_rate([0] * 10, interval=1.0, min_thickness=3.0) == 0.0


def test_fragmentation_default_threshold_is_three_intervals():
    # interval 0.5 -> default 1.5 m; 2-sample runs (1.0 m) fragment, 3-sample
    # runs (1.5 m) do not
    assert fragmentation_rate([0, 0, 1, 1, 1], interval=0.5) == 0.5
    assert fragmentation_rate([0, 0, 0, 1, 1, 1], interval=0.5) == 0.0


def test_fragmentation_speckle_vs_blocks():
    speckle = np.arange(12) % 2
    blocks = np.repeat([0, 1], 6)
    assert fragmentation_rate(speckle, 1.0) == 1.0
    assert fragmentation_rate(blocks, 1.0) == 0.0


def test_fragmentation_validation():
    with pytest.raises(MetricsError):
        fragmentation_rate([0, 1], interval=0.0)
    with pytest.raises(MetricsError, match="empty"):
        fragmentation_rate([], interval=1.0)
