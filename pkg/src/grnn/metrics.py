"""Confusion matrix, overall accuracy, Cohen's kappa and stratified label splits."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass

import numpy as np

from .core import ClassificationMap, LabelMap

log = logging.getLogger(__name__)


@dataclass
class EvalReport:
    confusion: np.ndarray    # (c, c+1); rows truth, cols prediction, last col = unclassified
    oa: float
    kappa: float
    per_class: np.ndarray    # recall per class, nan for classes absent from truth
    n_test: int
    kappa_degenerate: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["confusion"] = self.confusion.tolist()
        d["per_class"] = [None if np.isnan(v) else float(v) for v in self.per_class]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        c = self.confusion.shape[0]
        width = max(6, len(str(self.confusion.max())) + 1)
        head = "truth\\pred" + "".join(f"{q:>{width}d}" for q in range(1, c + 1)) + f"{'none':>{width}}" + "  recall"
        lines = [head]
        for q in range(c):
            rec = self.per_class[q]
            cells = "".join(f"{v:>{width}d}" for v in self.confusion[q])
            lines.append(f"{q + 1:>10d}" + cells + ("     n/a" if np.isnan(rec) else f"  {rec:6.4f}"))
        lines.append(f"OA    = {self.oa:.4f}")
        lines.append(f"kappa = {self.kappa:.4f}" + ("  (degenerate: p_e = 1)" if self.kappa_degenerate else ""))
        lines.append(f"n     = {self.n_test}")
        return "\n".join(lines)


def confusion_matrix(truth: np.ndarray, pred: np.ndarray, c: int) -> np.ndarray:
    """truth in 1..c, pred in 0..c (0 = unclassified, counted in the last column)."""
    truth = np.asarray(truth, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if len(truth) and (truth.min() < 1 or truth.max() > c):
        raise ValueError(f"truth classes outside 1..{c}")
    if len(pred) and (pred.min() < 0 or pred.max() > c):
        raise ValueError(f"predicted classes outside 0..{c}")
    col = np.where(pred == 0, c, pred - 1)
    conf = np.zeros((c, c + 1), dtype=np.int64)
    np.add.at(conf, (truth - 1, col), 1)
    return conf


def kappa_from_confusion(conf: np.ndarray) -> tuple[float, float, bool]:
    """(overall accuracy, kappa, degenerate flag) from a (c, c+1) confusion matrix."""
    n = conf.sum()
    c = conf.shape[0]
    p_o = np.trace(conf[:, :c]) / n
    p_e = float(np.sum(conf.sum(axis=1) * conf[:, :c].sum(axis=0))) / float(n) ** 2
    if p_e >= 1.0:
        if p_o < 1.0:
            log.warning("kappa undefined: chance agreement is 1 but predictions are imperfect")
            return float(p_o), float("nan"), True
        return float(p_o), 1.0, True
    return float(p_o), float((p_o - p_e) / (1.0 - p_e)), False


def evaluate(pred: ClassificationMap, truth: LabelMap, num_classes: int | None = None) -> EvalReport:
    if len(truth) == 0:
        raise ValueError("empty truth set")
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match truth {truth.shape}")
    c = truth.num_classes if num_classes is None else num_classes
    y = truth.classes
    yhat = pred.labels[truth.rows, truth.cols]
    conf = confusion_matrix(y, yhat, c)
    oa, kappa, degenerate = kappa_from_confusion(conf)
    support = conf.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(support > 0, np.diag(conf[:, :c]) / support, np.nan)
    return EvalReport(conf, oa, kappa, per_class, int(conf.sum()), degenerate)


def split_labels(labels: LabelMap, train_fraction: float | None = None,
                 per_class_count: int | None = None, seed: int = 0) -> tuple[LabelMap, LabelMap]:
    """Stratified random split into (train, test).

    With train_fraction, per-class counts are floored and the remaining
    budget round(fraction * total) - sum(floors) goes one pixel each to the
    largest classes.
    """
    if (train_fraction is None) == (per_class_count is None):
        raise ValueError("give exactly one of train_fraction or per_class_count")
    rng = np.random.default_rng(seed)
    classes = np.arange(1, labels.num_classes + 1)
    members = [np.flatnonzero(labels.classes == q) for q in classes]
    sizes = np.array([len(m) for m in members])
    if per_class_count is not None:
        short = [int(q) for q, s in zip(classes, sizes) if 0 < s < per_class_count]
        if short:
            raise ValueError(f"classes {short} have fewer than {per_class_count} labeled pixels")
        counts = np.minimum(sizes, per_class_count)
    else:
        if not 0.0 < train_fraction <= 1.0:
            raise ValueError("train_fraction must be in (0, 1]")
        counts = np.floor(sizes * train_fraction).astype(np.int64)
        remainder = int(round(train_fraction * sizes.sum())) - int(counts.sum())
        for i in np.lexsort((classes, -sizes)):
            if remainder <= 0:
                break
            if counts[i] < sizes[i]:
                counts[i] += 1
                remainder -= 1
    train_mask = np.zeros(len(labels), dtype=bool)
    for m, k in zip(members, counts):
        if k:
            train_mask[rng.permutation(m)[:k]] = True
    return labels.subset(train_mask), labels.subset(~train_mask)
