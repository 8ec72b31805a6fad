"""Superpixel feature extraction and sparse adjacency construction.

Edge weights use Gaussian kernels on spectral and spatial feature distances::

    W[k, l] = exp(-beta * |f_k - f_l|^2 / (h * sigma_s^2))
            * exp(-(1 - beta) * |p_k - p_l|^2 / (h * sigma_l^2))

where f is the mean (reduced) spectrum of a superpixel and p its centroid
normalized by the image height and width. This is a reconstruction: the
published method names the parameters (h, beta, sigma_s, sigma_l) but defers
their exact use to earlier work.

Candidate neighbors of node k are the superpixels touching it under
xi-connectivity plus its n_s spectrally nearest superpixels. Each row keeps its
n_s largest candidate weights (ties go to the lower node index) and the result
is symmetrized with an elementwise max.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .core import HsiCube, SuperpixelSegmentation
from .superpixel import superpixel_adjacency


@dataclass
class GraphConfig:
    h: float = 15.0
    beta: float = 0.9
    sigma_s: float = 2.0
    sigma_l: float = 1.0
    xi: int = 8
    n_s: int = 20

    def validate(self) -> None:
        if self.h <= 0 or self.sigma_s <= 0 or self.sigma_l <= 0:
            raise ValueError("h, sigma_s and sigma_l must be > 0")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must be in [0, 1]")
        if self.xi not in (4, 8):
            raise ValueError("xi must be 4 or 8")
        if self.n_s < 1:
            raise ValueError("n_s must be >= 1")


@dataclass
class SuperpixelGraph:
    weights: sparse.csr_matrix
    features: np.ndarray | None = None

    def __post_init__(self):
        self.weights = sparse.csr_matrix(self.weights, dtype=np.float64)
        self.weights.sort_indices()

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    @property
    def degrees(self) -> np.ndarray:
        return np.asarray(self.weights.sum(axis=1)).ravel()


def extract_features(reduced: HsiCube, seg: SuperpixelSegmentation) -> np.ndarray:
    """Rows are [mean spectrum, mean row / H, mean col / W] per superpixel."""
    if reduced.shape != seg.shape:
        raise ValueError(f"segmentation shape {seg.shape} does not match cube {reduced.shape}")
    h, w = seg.shape
    n = seg.count
    flat = seg.assignment.ravel()
    sizes = np.bincount(flat, minlength=n).astype(np.float64)
    x = reduced.pixels()
    spectra = np.empty((n, x.shape[1]))
    for j in range(x.shape[1]):
        spectra[:, j] = np.bincount(flat, weights=x[:, j], minlength=n) / sizes
    rows, cols = np.divmod(np.arange(h * w), w)
    cy = np.bincount(flat, weights=rows, minlength=n) / sizes / h
    cx = np.bincount(flat, weights=cols, minlength=n) / sizes / w
    return np.column_stack([spectra, cy, cx])


def kernel_weights(features: np.ndarray, i: np.ndarray, j: np.ndarray, cfg: GraphConfig) -> np.ndarray:
    """Edge weights for node pairs (i, j)."""
    spec = features[:, :-2]
    pos = features[:, -2:]
    d_spec = np.sum((spec[i] - spec[j]) ** 2, axis=1)
    d_spat = np.sum((pos[i] - pos[j]) ** 2, axis=1)
    return np.exp(-cfg.beta * d_spec / (cfg.h * cfg.sigma_s**2)
                  - (1.0 - cfg.beta) * d_spat / (cfg.h * cfg.sigma_l**2))


def spectral_neighbors(features: np.ndarray, k: int, block: int = 512) -> np.ndarray:
    """Indices of the k spectrally nearest other nodes per row; ties by lower index."""
    spec = features[:, :-2]
    n = len(spec)
    k = min(k, n - 1)
    sq = np.sum(spec**2, axis=1)
    out = np.empty((n, k), dtype=np.int64)
    for s in range(0, n, block):
        e = min(s + block, n)
        d = sq[s:e, None] + sq[None, :] - 2.0 * spec[s:e] @ spec.T
        d[np.arange(e - s), np.arange(s, e)] = np.inf
        out[s:e] = np.argsort(d, axis=1, kind="stable")[:, :k]
    return out


def build_adjacency(features: np.ndarray, seg: SuperpixelSegmentation, cfg: GraphConfig,
                    return_truncated: bool = False):
    """Sparse symmetric weight matrix over superpixels.

    With ``return_truncated`` the row-truncated matrix before symmetrization is
    returned as a second value.
    """
    cfg.validate()
    n = len(features)
    if n < 2:
        raise ValueError("a superpixel graph needs at least 2 nodes")
    if seg.count != n:
        raise ValueError(f"segmentation has {seg.count} superpixels, features have {n} rows")

    touching = superpixel_adjacency(seg, cfg.xi)
    knn = spectral_neighbors(features, cfg.n_s)
    src = np.concatenate([touching[:, 0], touching[:, 1], np.repeat(np.arange(n), knn.shape[1])])
    dst = np.concatenate([touching[:, 1], touching[:, 0], knn.ravel()])
    pairs = np.unique(np.stack([src, dst], axis=1), axis=0)
    src, dst = pairs[:, 0], pairs[:, 1]
    wts = kernel_weights(features, src, dst, cfg)

    # per-row top-n_s: sort by (row, -weight, column)
    order = np.lexsort((dst, -wts, src))
    src, dst, wts = src[order], dst[order], wts[order]
    row_start = np.searchsorted(src, np.arange(n))
    rank = np.arange(len(src)) - row_start[src]
    keep = (rank < cfg.n_s) & (wts > 0)
    truncated = sparse.csr_matrix((wts[keep], (src[keep], dst[keep])), shape=(n, n))
    w = truncated.maximum(truncated.T).tocsr()

    deg = np.asarray(w.sum(axis=1)).ravel()
    isolated = np.flatnonzero(deg <= 0)
    if len(isolated):
        w = w.tolil()
        for k in isolated:
            nb = int(knn[k, 0])
            wk = kernel_weights(features, np.array([k]), np.array([nb]), cfg)[0]
            wk = max(wk, np.finfo(np.float64).tiny)
            w[k, nb] = max(w[k, nb], wk)
            w[nb, k] = max(w[nb, k], wk)
        w = w.tocsr()
    w.setdiag(0.0)
    w.eliminate_zeros()
    graph = SuperpixelGraph(w, features)
    if return_truncated:
        return graph, truncated
    return graph


def normalized_adjacency(graph: SuperpixelGraph) -> sparse.csr_matrix:
    """Symmetric normalization D^-1/2 W D^-1/2."""
    deg = graph.degrees
    if np.any(deg <= 0):
        raise ValueError(f"zero-degree nodes: {np.flatnonzero(deg <= 0)[:10].tolist()}")
    inv = sparse.diags(1.0 / np.sqrt(deg))
    return (inv @ graph.weights @ inv).tocsr()


row_normalized = normalized_adjacency


def write_graph(graph: SuperpixelGraph, path: str | os.PathLike) -> None:
    """Coordinate list ``k,l,w`` of the upper triangle; weights in repr precision."""
    coo = sparse.triu(graph.weights, k=1).tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# n={graph.n}\n")
        for k, l, v in zip(coo.row[order], coo.col[order], coo.data[order]):
            f.write(f"{k},{l},{float(v)!r}\n")


def read_graph(path: str | os.PathLike) -> SuperpixelGraph:
    n = None
    rows, cols, vals = [], [], []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if line[1:].strip().startswith("n="):
                    n = int(line[1:].strip()[2:])
                continue
            k, l, v = line.split(",")
            rows.append(int(k))
            cols.append(int(l))
            vals.append(float(v))
    if n is None:
        raise ValueError(f"{path}: missing '# n=' header")
    upper = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return SuperpixelGraph(upper + upper.T)
