import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grnn.core import LabelMap, SuperpixelSegmentation
from grnn.labels import hard_from_soft, hard_labels, label_matrix, one_hot, one_hot_matrix, soft_labels


def test_one_hot_examples():
    assert one_hot(2, 4).tolist() == [0, 1, 0, 0]
    assert one_hot(1, 1).tolist() == [1]
    with pytest.raises(ValueError):
        one_hot(5, 4)
    with pytest.raises(ValueError):
        one_hot(0, 4)
    with pytest.raises(ValueError):
        one_hot_matrix(np.array([1, 3]), 2)


def _one_sp(classes, c, extra_sp=True):
    # superpixel 0 = first row, superpixel 1 = second row (unlabeled)
    w = max(len(classes), 1)
    seg = SuperpixelSegmentation(np.vstack([np.zeros(w, int), np.ones(w, int)]) if extra_sp else np.zeros((1, w), int))
    labels = LabelMap(np.zeros(len(classes), int), np.arange(len(classes)), classes, c, seg.shape)
    return soft_labels(labels, seg, c)


def test_soft_label_frequencies():
    sl = _one_sp([1, 1, 2], 3)
    np.testing.assert_allclose(sl.soft[0], [2 / 3, 1 / 3, 0])
    assert sl.hard[0].tolist() == [1, 0, 0]
    assert sl.labeled_mask.tolist() == [True, False]
    assert sl.soft[1].tolist() == [0, 0, 0] and sl.hard[1].tolist() == [0, 0, 0]


def test_single_labeled_pixel():
    sl = _one_sp([3], 3)
    assert sl.soft[0].tolist() == [0, 0, 1]
    assert sl.hard[0].tolist() == [0, 0, 1]


def test_tie_goes_to_lowest_class():
    assert hard_from_soft(np.array([[0.5, 0.5, 0.0]])).tolist() == [[1, 0, 0]]
    assert hard_from_soft(np.array([[0.0, 0.5, 0.5]])).tolist() == [[0, 1, 0]]
    assert hard_from_soft(np.zeros((1, 3))).tolist() == [[0, 0, 0]]


def test_shape_mismatch():
    seg = SuperpixelSegmentation(np.zeros((2, 2), int))
    with pytest.raises(ValueError):
        soft_labels(LabelMap([0], [0], [1], 1, (3, 3)), seg)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 10), st.integers(1, 10), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_brute_force_tally(h, w, c, seed):
    rng = np.random.default_rng(seed)
    n_sp = int(rng.integers(1, h * w + 1))
    assign = rng.integers(0, n_sp, size=(h, w))
    # compact labels so every index is used
    _, assign = np.unique(assign, return_inverse=True)
    seg = SuperpixelSegmentation(assign.reshape(h, w))
    k = int(rng.integers(0, h * w + 1))
    idx = rng.choice(h * w, size=k, replace=False)
    labels = LabelMap(idx // w, idx % w, rng.integers(1, c + 1, size=k), c, (h, w))
    sl = soft_labels(labels, seg, c)
    for s in range(seg.count):
        tally = np.zeros(c)
        for r, col, q in zip(labels.rows, labels.cols, labels.classes):
            if seg.assignment[r, col] == s:
                tally[q - 1] += 1
        if tally.sum() == 0:
            assert not sl.labeled_mask[s]
            assert sl.soft[s].sum() == 0 and sl.hard[s].sum() == 0
        else:
            assert sl.labeled_mask[s]
            np.testing.assert_array_equal(sl.soft[s], tally / tally.sum())
            assert sl.soft[s].sum() == pytest.approx(1.0, abs=1e-12)
            assert np.argmax(sl.hard[s]) == np.flatnonzero(tally == tally.max())[0]
            assert sl.hard[s].sum() == 1
    again = hard_labels(sl)
    np.testing.assert_array_equal(again.hard, sl.hard)
    np.testing.assert_array_equal(label_matrix(labels, seg, c), sl.hard)
