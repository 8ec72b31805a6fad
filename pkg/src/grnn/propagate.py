"""Confidence-based label augmentation and graph label propagation."""

from __future__ import annotations

import numpy as np
from scipy import sparse
from scipy.linalg import solve

from .classifier import MlpParams, forward
from .core import (
    PROVENANCE_GROUND_TRUTH,
    PROVENANCE_PREDICTED,
    PROVENANCE_UNREACHED,
    ClassificationMap,
    HsiCube,
    LabelMap,
    SuperpixelSegmentation,
)
from .graph import SuperpixelGraph, normalized_adjacency

DEFAULT_TAU = 0.4
DEFAULT_ALPHA = 0.5
DIRECT_SOLVE_MAX_N = 2000


def confident_set(params: MlpParams, reduced: HsiCube, tau: float = DEFAULT_TAU) -> LabelMap:
    """Pixels whose top class probability is at least tau, labeled with that class."""
    p = forward(params, reduced.pixels())
    top = p.max(axis=1)
    idx = np.flatnonzero(top >= tau)
    rows, cols = np.divmod(idx, reduced.width)
    return LabelMap(rows, cols, np.argmax(p[idx], axis=1) + 1, p.shape[1], reduced.shape)


def merge_labels(base: LabelMap, confident: LabelMap) -> LabelMap:
    """Union of both sets; ground truth wins where a pixel appears in both."""
    if base.shape != confident.shape:
        raise ValueError("label maps cover different image shapes")
    extra = ~np.isin(confident.flat_index(), base.flat_index())
    return LabelMap(
        np.concatenate([base.rows, confident.rows[extra]]),
        np.concatenate([base.cols, confident.cols[extra]]),
        np.concatenate([base.classes, confident.classes[extra]]),
        max(base.num_classes, confident.num_classes),
        base.shape,
    )


def propagate_direct(s_norm: sparse.spmatrix, t_m: np.ndarray, alpha: float) -> np.ndarray:
    n = s_norm.shape[0]
    a = np.eye(n) - alpha * s_norm.toarray()
    return solve(a, t_m, assume_a="sym")


def propagate_iterative(s_norm: sparse.spmatrix, t_m: np.ndarray, alpha: float,
                        tol: float = 1e-10, max_iter: int | None = None) -> np.ndarray:
    """Fixed point of F = alpha*S*F + T_M.

    Stops once the residual alpha*S*F + T_M - F is below tol in max-norm.
    """
    if max_iter is None:
        scale = max(float(np.abs(t_m).max()), 1.0) * np.sqrt(s_norm.shape[0])
        max_iter = int(np.ceil(np.log(tol / scale) / np.log(alpha))) + 100 if alpha > 0 else 1
    f = t_m.copy()
    for _ in range(max_iter):
        f_new = alpha * (s_norm @ f) + t_m
        if np.abs(f_new - f).max() < tol:
            return f_new
        f = f_new
    raise RuntimeError(f"label propagation did not converge in {max_iter} iterations")


def propagate(graph: SuperpixelGraph, t_m: np.ndarray, alpha: float = DEFAULT_ALPHA,
              method: str = "auto") -> np.ndarray:
    """Solve (I - alpha * D^-1/2 W D^-1/2) T* = T_M."""
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must be in [0, 1), got {alpha}")
    t_m = np.asarray(t_m, dtype=np.float64)
    if t_m.shape[0] != graph.n:
        raise ValueError(f"T_M has {t_m.shape[0]} rows, graph has {graph.n} nodes")
    if alpha == 0.0:
        return t_m.copy()
    s = normalized_adjacency(graph)
    if method == "auto":
        method = "direct" if graph.n <= DIRECT_SOLVE_MAX_N else "iterative"
    if method == "direct":
        return propagate_direct(s, t_m, alpha)
    if method == "iterative":
        return propagate_iterative(s, t_m, alpha)
    raise ValueError(f"unknown method {method!r}")


def final_labels(t_star: np.ndarray, seg: SuperpixelSegmentation,
                 ground_truth: LabelMap | None = None) -> ClassificationMap:
    """Broadcast each superpixel's argmax class (ties: lowest index) to its pixels.

    Superpixels whose row is all zero get class 1 and are flagged unreached.
    """
    t_star = np.asarray(t_star)
    if t_star.shape[0] != seg.count:
        raise ValueError(f"T* has {t_star.shape[0]} rows, segmentation {seg.count} superpixels")
    sp_class = np.argmax(t_star, axis=1) + 1
    unreached = ~np.any(t_star != 0, axis=1)
    labels = sp_class[seg.assignment]
    prov = np.where(unreached[seg.assignment], PROVENANCE_UNREACHED, PROVENANCE_PREDICTED).astype(np.uint8)
    if ground_truth is not None:
        prov[ground_truth.rows, ground_truth.cols] = PROVENANCE_GROUND_TRUTH
    return ClassificationMap(labels, prov)
