"""One-hot encodings and soft/hard superpixel labels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import LabelMap, SuperpixelSegmentation


@dataclass
class SuperpixelLabels:
    soft: np.ndarray          # (N, c) class frequencies, zero rows when unlabeled
    hard: np.ndarray          # (N, c) one-hot argmax of soft, zero rows when unlabeled
    labeled_mask: np.ndarray  # (N,) bool


def one_hot(y: int, c: int) -> np.ndarray:
    """Indicator vector of class y (1-indexed) in R^c."""
    if not 1 <= y <= c:
        raise ValueError(f"class {y} outside 1..{c}")
    v = np.zeros(c)
    v[y - 1] = 1.0
    return v


def one_hot_matrix(classes: np.ndarray, c: int) -> np.ndarray:
    classes = np.asarray(classes, dtype=np.int64)
    if len(classes) and (classes.min() < 1 or classes.max() > c):
        raise ValueError(f"class ids outside 1..{c}")
    out = np.zeros((len(classes), c))
    out[np.arange(len(classes)), classes - 1] = 1.0
    return out


def hard_from_soft(soft: np.ndarray) -> np.ndarray:
    """Argmax one-hot per nonzero row; ties go to the lowest class index."""
    soft = np.asarray(soft, dtype=np.float64)
    hard = np.zeros_like(soft)
    labeled = soft.sum(axis=1) > 0
    rows = np.flatnonzero(labeled)
    hard[rows, np.argmax(soft[rows], axis=1)] = 1.0
    return hard


def soft_labels(labels: LabelMap, seg: SuperpixelSegmentation, c: int | None = None) -> SuperpixelLabels:
    if labels.shape != seg.shape:
        raise ValueError(f"label map shape {labels.shape} does not match segmentation {seg.shape}")
    c = labels.num_classes if c is None else c
    n = seg.count
    sp = seg.assignment[labels.rows, labels.cols]
    counts = np.zeros((n, c))
    np.add.at(counts, (sp, labels.classes - 1), 1.0)
    totals = counts.sum(axis=1)
    mask = totals > 0
    soft = np.zeros_like(counts)
    soft[mask] = counts[mask] / totals[mask, None]
    return SuperpixelLabels(soft, hard_from_soft(soft), mask)


def hard_labels(sl: SuperpixelLabels) -> SuperpixelLabels:
    return SuperpixelLabels(sl.soft, hard_from_soft(sl.soft), sl.labeled_mask)


def label_matrix(labels: LabelMap, seg: SuperpixelSegmentation, c: int | None = None) -> np.ndarray:
    """The N x c hard label matrix T for a given labeled pixel set."""
    return soft_labels(labels, seg, c).hard
