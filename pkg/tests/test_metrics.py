import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from camf.metrics import ConfusionCounts, MetricError, accuracy, confusion, degenerate, f1, mcc, score

counts = st.integers(min_value=0, max_value=10**6)


def test_confusion_hand_tabulation():
    c = confusion([1, 0, 0, 1], [1, 1, 0, 0])
    assert (c.tp, c.fn, c.tn, c.fp) == (1, 1, 1, 1)


def test_confusion_all_correct():
    c = confusion([1, 0, 1, 1], [1, 0, 1, 1])
    assert c.fp == 0 and c.fn == 0


@pytest.mark.parametrize("preds,labels", [([], []), ([1, 0], [1]), ([2], [1])])
def test_confusion_rejects_bad_input(preds, labels):
    with pytest.raises(MetricError):
        confusion(preds, labels)


def test_counts_must_be_nonnegative():
    with pytest.raises(MetricError):
        ConfusionCounts(tp=-1, fp=0, tn=0, fn=0)


def test_f1_examples():
    assert f1(ConfusionCounts(5, 0, 0, 0)) == 1.0
    assert f1(ConfusionCounts(2, 1, 0, 1)) == pytest.approx(4 / 6, abs=1e-15)
    assert f1(ConfusionCounts(0, 0, 10, 0)) == 0.0
    assert "f1" in degenerate(ConfusionCounts(0, 0, 10, 0))


def test_mcc_examples():
    assert mcc(ConfusionCounts(tp=5, fp=0, tn=5, fn=0)) == 1.0
    assert mcc(ConfusionCounts(1, 1, 1, 1)) == 0.0
    # frozen 50-digit evaluation
    assert mcc(ConfusionCounts(tp=90, fp=4, tn=1, fn=5)) == pytest.approx(0.13524203070138519562, rel=1e-14)


def test_mcc_zero_denominator_convention():
    c = ConfusionCounts(tp=7, fp=3, tn=0, fn=0)
    assert mcc(c) == 0.0
    assert "mcc" in degenerate(c)


def test_accuracy_examples():
    assert accuracy(ConfusionCounts(3, 0, 4, 0)) == 1.0
    assert accuracy(ConfusionCounts(0, 3, 0, 4)) == 0.0
    assert accuracy(ConfusionCounts(tp=3, fp=2, tn=4, fn=1)) == pytest.approx(0.7)


def test_score_keys():
    assert set(score([1, 0], [1, 0])) >= {"f1", "acc", "mcc"}


@settings(max_examples=200, deadline=None)
@given(counts, counts, counts, counts)
def test_mcc_exact(tp, fp, tn, fn):
    c = ConfusionCounts(tp, fp, tn, fn)
    den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    mp.mp.dps = 60
    ref = 0.0 if den == 0 else float((mp.mpf(tp) * tn - mp.mpf(fp) * fn) / mp.sqrt(den))
    assert mcc(c) == pytest.approx(ref, rel=1e-12, abs=1e-15)
    assert -1.0 <= mcc(c) <= 1.0


@settings(max_examples=200, deadline=None)
@given(counts, counts, counts, counts)
def test_swapping_classes_keeps_mcc(tp, fp, tn, fn):
    # relabel positives as negatives: tp<->tn and fp<->fn
    c = ConfusionCounts(tp, fp, tn, fn)
    assert mcc(c.swapped()) == pytest.approx(mcc(c), rel=1e-12, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(counts, counts, counts, counts, counts)
def test_f1_ignores_true_negatives(tp, fp, tn, fn, tn2):
    assert f1(ConfusionCounts(tp, fp, tn, fn)) == f1(ConfusionCounts(tp, fp, tn2, fn))


def test_inverting_predictions_negates_mcc(rng):
    for _ in range(50):
        labels = rng.integers(0, 2, 30)
        preds = rng.integers(0, 2, 30)
        a = mcc(confusion(preds, labels))
        b = mcc(confusion(1 - preds, labels))
        assert b == pytest.approx(-a, abs=1e-12)


def test_mcc_equals_pearson(rng):
    for _ in range(200):
        n = int(rng.integers(4, 60))
        labels = rng.integers(0, 2, n)
        preds = rng.integers(0, 2, n)
        if labels.std() == 0 or preds.std() == 0:
            continue
        r = np.corrcoef(preds, labels)[0, 1]
        assert math.isclose(mcc(confusion(preds, labels)), r, abs_tol=1e-10)
