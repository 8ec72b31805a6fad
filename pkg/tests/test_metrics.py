import json

import numpy as np
import pytest

from grnn.core import ClassificationMap, LabelMap
from grnn.metrics import confusion_matrix, evaluate, kappa_from_confusion, split_labels


def _row_case(truth, pred, c):
    n = len(truth)
    truth_map = LabelMap(np.zeros(n, int), np.arange(n), truth, c, (1, n))
    cmap = ClassificationMap(np.array([pred]), np.ones((1, n), np.uint8))
    return evaluate(cmap, truth_map)


def brute_kappa(truth, pred, c):
    n = len(truth)
    agree = sum(t == p for t, p in zip(truth, pred)) / n
    chance = sum((sum(t == q for t in truth) / n) * (sum(p == q for p in pred) / n) for q in range(1, c + 1))
    return agree, (agree - chance) / (1 - chance)


def test_hand_computed_kappa():
    rep = _row_case([1, 1, 1, 2, 2, 2], [1, 1, 2, 2, 2, 2], 2)
    assert rep.oa == pytest.approx(5 / 6, abs=1e-15)
    assert rep.kappa == pytest.approx(2 / 3, abs=1e-15)
    assert rep.confusion.tolist() == [[2, 1, 0], [0, 3, 0]]
    np.testing.assert_allclose(rep.per_class, [2 / 3, 1.0])


def test_perfect_prediction():
    rep = _row_case([1, 2, 3, 2], [1, 2, 3, 2], 3)
    assert rep.oa == 1.0 and rep.kappa == 1.0 and not rep.kappa_degenerate


def test_single_class_degenerate():
    rep = _row_case([2, 2, 2], [2, 2, 2], 3)
    assert rep.kappa == 1.0 and rep.kappa_degenerate
    assert np.isnan(rep.per_class[0])


def test_unclassified_counts_as_error():
    rep = _row_case([1, 2], [0, 2], 2)
    assert rep.confusion.tolist() == [[0, 0, 1], [0, 1, 0]]
    assert rep.oa == 0.5
    assert rep.confusion.sum() == rep.n_test == 2


def test_random_instances_match_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(100):
        c = int(rng.integers(2, 6))
        n = int(rng.integers(2, 40))
        truth = rng.integers(1, c + 1, size=n)
        pred = np.where(rng.random(n) < 0.6, truth, rng.integers(1, c + 1, size=n))
        if len(set(truth)) == 1 and len(set(pred)) == 1:
            continue
        oa, kappa, _ = kappa_from_confusion(confusion_matrix(truth, pred, c))
        b_oa, b_kappa = brute_kappa(truth.tolist(), pred.tolist(), c)
        assert oa == pytest.approx(b_oa, abs=1e-12)
        assert kappa == pytest.approx(b_kappa, abs=1e-12)


def test_oa_permutation_invariant():
    rng = np.random.default_rng(1)
    truth = rng.integers(1, 5, size=50)
    pred = np.where(rng.random(50) < 0.7, truth, rng.integers(1, 5, size=50))
    perm = np.array([0, 3, 1, 4, 2])
    a = kappa_from_confusion(confusion_matrix(truth, pred, 4))
    b = kappa_from_confusion(confusion_matrix(perm[truth], perm[pred], 4))
    assert a[0] == b[0]
    assert a[1] == pytest.approx(b[1], abs=1e-14)


def test_evaluate_errors():
    empty = LabelMap([], [], [], 2, (1, 2))
    with pytest.raises(ValueError, match="empty"):
        evaluate(ClassificationMap(np.ones((1, 2), int), np.ones((1, 2), np.uint8)), empty)
    with pytest.raises(ValueError):
        confusion_matrix([3], [1], 2)


def _blob(counts):
    classes = np.repeat(np.arange(1, len(counts) + 1), counts)
    n = len(classes)
    return LabelMap(np.zeros(n, int), np.arange(n), classes, len(counts), (1, n))


def test_split_per_class_count():
    labels = _blob([30, 12, 50])
    train, test = split_labels(labels, per_class_count=10, seed=3)
    assert np.bincount(train.classes, minlength=4)[1:].tolist() == [10, 10, 10]
    assert len(train) + len(test) == len(labels)
    assert not set(train.flat_index()) & set(test.flat_index())


def test_split_fraction_half():
    train, test = split_labels(_blob([100]), train_fraction=0.5, seed=0)
    assert len(train) == 50 and len(test) == 50


def test_split_fraction_remainder_goes_to_largest():
    train, _ = split_labels(_blob([15, 5]), train_fraction=0.3, seed=0)
    # floors 4 and 1; round(6) leaves one extra for the larger class
    assert np.bincount(train.classes, minlength=3)[1:].tolist() == [5, 1]


def test_split_deterministic_and_errors():
    labels = _blob([20, 20])
    a, _ = split_labels(labels, per_class_count=5, seed=7)
    b, _ = split_labels(labels, per_class_count=5, seed=7)
    assert a.flat_index().tolist() == b.flat_index().tolist()
    with pytest.raises(ValueError, match="fewer than"):
        split_labels(_blob([20, 3]), per_class_count=5)
    with pytest.raises(ValueError):
        split_labels(labels)
    with pytest.raises(ValueError):
        split_labels(labels, train_fraction=0.0)


def test_report_serialisation():
    rep = _row_case([1, 1, 1, 2, 2, 2], [1, 1, 2, 2, 2, 2], 3)
    d = json.loads(rep.to_json())
    assert d["confusion"][0] == [2, 1, 0, 0]
    assert d["per_class"][2] is None
    text = rep.to_text()
    assert "OA    = 0.8333" in text and "n/a" in text
