import itertools
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dermhybrid.metrics import (
    binary_summary,
    confusion_matrix,
    evaluate,
    roc_auc_binary,
    roc_auc_macro,
    roc_curve,
    summarize,
    trapezoid_auc,
    write_report,
)


def pair_count_auc(scores, truth):
    """Oracle: credit every (positive, negative) pair directly."""
    pos = [s for s, t in zip(scores, truth) if t == 1]
    neg = [s for s, t in zip(scores, truth) if t == 0]
    credit = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return credit / (len(pos) * len(neg))


def brute_force_summary(pred, truth, k):
    """Oracle: per-sample TP/TN/FP/FN tallies, no confusion matrix."""
    sens, spec = [], []
    for c in range(k):
        tp = tn = fp = fn = 0
        for p, t in zip(pred, truth):
            if t == c and p == c:
                tp += 1
            elif t == c:
                fn += 1
            elif p == c:
                fp += 1
            else:
                tn += 1
        if tp + fn == 0:
            continue
        sens.append(tp / (tp + fn))
        spec.append(tn / (tn + fp) if tn + fp else 1.0)
    acc = sum(p == t for p, t in zip(pred, truth)) / len(pred)
    return math.fsum(sens) / len(sens), math.fsum(spec) / len(spec), acc


def test_confusion_examples():
    cm = confusion_matrix([0, 1, 1], [0, 0, 1], 2)
    assert cm.tolist() == [[1, 1], [0, 1]]
    cm = confusion_matrix([0, 1, 2, 3], [0, 1, 2, 3], 7)
    assert np.array_equal(cm, np.diag([1, 1, 1, 1, 0, 0, 0]))
    assert confusion_matrix([0, 2, 5], [1, 2, 6], 7).sum() == 3


def test_confusion_errors():
    with pytest.raises(ValueError):
        confusion_matrix([0, 1], [0], 7)
    with pytest.raises(ValueError):
        confusion_matrix([7], [0], 7)
    with pytest.raises(ValueError):
        confusion_matrix([], [], 7)


def test_summarize_binary_example():
    # TP=74, FN=26, TN=96, FP=4 with class 1 positive
    cm = np.array([[96, 4], [26, 74]])
    ref = binary_summary(74, 96, 4, 26)
    assert ref == pytest.approx({"SENS": 0.74, "SPEC": 0.96, "BACC": 0.85, "Accuracy": 0.85})
    rep = summarize(cm)
    assert rep.per_class[1][:2] == (0.74, 0.96)
    assert rep.bacc == ref["BACC"]
    assert rep.accuracy == ref["Accuracy"]


def test_summarize_perfect():
    rep = summarize(np.diag([3, 1, 4, 1, 5, 9, 2]))
    assert (rep.bacc, rep.spec, rep.sens, rep.accuracy) == (1.0, 1.0, 1.0, 1.0)


def test_summarize_errors_and_absent_class():
    with pytest.raises(ValueError):
        summarize(np.zeros((7, 7), dtype=int))
    cm = np.zeros((7, 7), dtype=int)
    cm[0, 0] = 3
    cm[1, 0] = 1
    with pytest.warns(UserWarning, match="absent"):
        rep = summarize(cm)
    assert set(rep.per_class) == {0, 1}
    assert rep.bacc == 0.5


@pytest.mark.parametrize("seed", range(20))
def test_summarize_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 201))
    truth = rng.integers(0, 7, n)
    pred = np.where(rng.random(n) < 0.6, truth, rng.integers(0, 7, n))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = summarize(confusion_matrix(pred, truth, 7))
    bacc, spec, acc = brute_force_summary(pred.tolist(), truth.tolist(), 7)
    assert (rep.bacc, rep.spec, rep.accuracy) == (bacc, spec, acc)
    assert rep.sens == rep.bacc


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=2, max_size=60))
def test_binary_reduces_to_two_class_formulas(pairs):
    truth = [t for t, _ in pairs]
    pred = [p for _, p in pairs]
    if len(set(truth)) < 2:
        return
    tp = sum(1 for t, p in pairs if t == 1 and p == 1)
    tn = sum(1 for t, p in pairs if t == 0 and p == 0)
    fp = sum(1 for t, p in pairs if t == 0 and p == 1)
    fn = sum(1 for t, p in pairs if t == 1 and p == 0)
    rep = summarize(confusion_matrix(pred, truth, 2))
    ref = binary_summary(tp, tn, fp, fn)
    assert rep.per_class[1][0] == ref["SENS"]
    assert rep.per_class[1][1] == ref["SPEC"]
    assert rep.bacc == pytest.approx(ref["BACC"], abs=1e-15)
    assert rep.accuracy == ref["Accuracy"]


def test_micro_average():
    cm = np.array([[5, 1], [2, 2]])
    rep = summarize(cm, average="micro")
    assert rep.sens == pytest.approx(0.7)
    assert rep.spec == pytest.approx(0.7)
    with pytest.raises(ValueError):
        summarize(cm, average="weighted")


def test_auc_examples():
    assert roc_auc_binary([0.9, 0.8, 0.3, 0.1], [1, 1, 0, 0]) == 1.0
    assert roc_auc_binary([0.1, 0.3, 0.8, 0.9], [1, 1, 0, 0]) == 0.0
    assert roc_auc_binary([0.9, 0.4, 0.6, 0.1], [1, 1, 0, 0]) == 0.75
    assert pair_count_auc([0.9, 0.4, 0.6, 0.1], [1, 1, 0, 0]) == 0.75
    with pytest.raises(ValueError):
        roc_auc_binary([0.1, 0.2], [1, 1])


@pytest.mark.parametrize("seed", range(30))
def test_auc_pair_counting_and_trapezoid(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 51))
    truth = rng.integers(0, 2, n)
    truth[0], truth[1] = 0, 1
    scores = rng.integers(0, 6, n) / 5.0 if seed % 2 else rng.random(n)
    auc = roc_auc_binary(scores, truth)
    assert abs(auc - pair_count_auc(scores.tolist(), truth.tolist())) < 1e-12
    assert abs(auc - trapezoid_auc(*roc_curve(scores, truth))) < 1e-12
    assert 0.0 <= auc <= 1.0
    # strictly increasing transform
    assert roc_auc_binary(np.exp(3 * scores) - 7, truth) == pytest.approx(auc, abs=1e-12)


def test_roc_curve_endpoints():
    fpr, tpr = roc_curve([0.2, 0.2, 0.7, 0.1], [0, 1, 1, 0])
    assert (fpr[0], tpr[0], fpr[-1], tpr[-1]) == (0.0, 0.0, 1.0, 1.0)
    assert np.all(np.diff(fpr) >= 0) and np.all(np.diff(tpr) >= 0)


def test_macro_auc_examples():
    truth = np.array([0, 0, 1, 1])
    scores = np.zeros((4, 7))
    scores[:, 0] = [0.9, 0.8, 0.1, 0.2]  # class 0 ranked perfectly
    scores[:, 1] = [0.5, 0.5, 0.5, 0.5]  # all ties -> 0.5
    with pytest.warns(UserWarning):
        mean, per = roc_auc_macro(scores, truth)
    assert per == {0: 1.0, 1: 0.5}
    assert mean == 0.75
    with pytest.raises(ValueError):
        roc_auc_macro(np.zeros((3, 7)), [2, 2, 2])


def test_macro_auc_all_perfect(rng):
    truth = np.repeat(np.arange(7), 5)
    scores = np.eye(7)[truth] + rng.random((35, 7)) * 0.1
    assert roc_auc_macro(scores, truth)[0] == 1.0


def test_macro_auc_random_null():
    rng = np.random.default_rng(2024)
    truth = np.repeat(np.arange(7), 2000 // 7 + 1)[:2000]
    scores = rng.random((2000, 7))
    mean, _ = roc_auc_macro(scores, truth)
    assert abs(mean - 0.5) <= 0.05


def test_evaluate_and_report(tmp_path):
    truth = np.array([0, 1, 2, 3, 4, 5, 6, 0])
    scores = np.eye(7)[truth]
    rep, cm = evaluate(truth, truth, scores)
    assert rep.auc == 1.0 and cm.trace() == 8
    write_report(tmp_path / "r.csv", rep, [f"c{i}" for i in range(7)])
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "metric,value"
    assert [l.split(",")[0] for l in lines[1:6]] == ["BACC", "SPEC", "SENS", "Accuracy", "AUC"]
