import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hagmil.metrics import auc, binary_auc, classify_metrics, youden_threshold

from oracles import exhaustive_youden, f1_at, pair_count_auc


def test_auc_examples():
    assert binary_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert binary_auc([0.5] * 4, [0, 1, 0, 1]) == 0.5
    assert binary_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_auc_single_class_errors():
    with pytest.raises(ValueError):
        binary_auc([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        auc(np.eye(3)[[0, 0]], [0, 0])


def test_macro_ovr_auc():
    scores = np.array([[0.8, 0.1, 0.1], [0.2, 0.7, 0.1], [0.1, 0.2, 0.7], [0.6, 0.3, 0.1]])
    labels = [0, 1, 2, 0]
    expected = np.mean([pair_count_auc(scores[:, c], [int(y == c) for y in labels]) for c in range(3)])
    assert auc(scores, labels) == pytest.approx(expected, abs=1e-15)


def test_fixed_threshold_examples():
    perfect = classify_metrics([0.1, 0.9, 0.2, 0.8], [0, 1, 0, 1])
    assert perfect.f1 == 1.0 and perfect.accuracy == 1.0 and perfect.threshold == 0.5
    negative = classify_metrics([0.1, 0.2, 0.3, 0.4], [0, 1, 0, 1])
    assert negative.f1 == 0.0


def test_youden_six_sample_hand_case():
    scores = [0.1, 0.3, 0.45, 0.4, 0.7, 0.9]
    labels = [0, 0, 0, 1, 1, 1]
    t = youden_threshold(scores, labels)
    assert t == exhaustive_youden(scores, labels)
    rep = classify_metrics(scores, labels, "youden")
    assert rep.threshold == t
    assert rep.f1 == f1_at(scores, labels, t)


def test_youden_tie_goes_to_lower_threshold():
    # thresholds 0.5 and 0.2 both reach J = 0.5
    assert youden_threshold([0.2, 0.5, 0.1, 0.8], [1, 0, 0, 1]) == pytest.approx(exhaustive_youden([0.2, 0.5, 0.1, 0.8], [1, 0, 0, 1]))


def test_bad_threshold_mode():
    with pytest.raises(ValueError):
        classify_metrics([0.1, 0.9], [0, 1], "median")


def test_multiclass_report():
    scores = np.array([[0.8, 0.1, 0.1], [0.2, 0.7, 0.1], [0.1, 0.2, 0.7], [0.1, 0.6, 0.3]])
    rep = classify_metrics(scores, [0, 1, 2, 2])
    assert rep.threshold is None and rep.n == 4
    assert rep.accuracy == 0.75
    assert len(rep.per_class) == 3
    assert rep.f1 == pytest.approx(np.mean([1.0, 2 / 3, 2 / 3]))


@settings(max_examples=500, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 1)), min_size=2, max_size=20))
def test_metrics_match_brute_force(pairs):
    scores = [s / 6.0 for s, _ in pairs]
    labels = [y for _, y in pairs]
    if len(set(labels)) < 2:
        return
    assert binary_auc(scores, labels) == pair_count_auc(scores, labels)
    t = youden_threshold(scores, labels)
    assert t == exhaustive_youden(scores, labels)
    assert classify_metrics(scores, labels, "youden").f1 == f1_at(scores, labels, t)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(-50, 50), st.integers(0, 1)), min_size=2, max_size=20))
def test_auc_invariant_under_increasing_transform(pairs):
    scores = np.array([s for s, _ in pairs], dtype=float) / 10
    labels = [y for _, y in pairs]
    if len(set(labels)) < 2:
        return
    assert binary_auc(scores, labels) == binary_auc(np.exp(scores), labels) == binary_auc(2 * scores - 1, labels)
