"""PCA reduction of the spectral axis."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np

from .core import HsiCube, read_raster, write_raster

log = logging.getLogger(__name__)

DEFAULT_VARIANCE_TARGET = 0.9990


@dataclass
class PcaModel:
    mean: np.ndarray                 # (B,)
    components: np.ndarray           # (b, B), orthonormal rows
    explained_variance: np.ndarray   # (b,), non-increasing
    total_variance: float
    scale: np.ndarray | None = None  # per-band std when standardized

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    @property
    def n_bands(self) -> int:
        return self.components.shape[1]

    def explained_variance_ratio(self) -> np.ndarray:
        if self.total_variance <= 0:
            return np.zeros_like(self.explained_variance)
        return self.explained_variance / self.total_variance


def _eig_desc(cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    # deterministic sign: largest-magnitude loading positive
    idx = np.argmax(np.abs(evecs), axis=0)
    signs = np.sign(evecs[idx, np.arange(evecs.shape[1])])
    signs[signs == 0] = 1.0
    return evals, evecs * signs


def fit_pca(cube: HsiCube, variance_target: float = DEFAULT_VARIANCE_TARGET,
            standardize: bool = False) -> PcaModel:
    """Fit PCA on all pixels and keep the fewest components reaching variance_target.

    The covariance uses the unbiased 1/(n-1) normalization. When the pixel
    count is below the band count, b is capped at the numerical rank.
    """
    if not 0.0 < variance_target <= 1.0:
        raise ValueError(f"variance_target must be in (0, 1], got {variance_target}")
    x = cube.pixels()
    n, bands = x.shape
    mean = x.mean(axis=0)
    xc = x - mean
    scale = None
    if standardize:
        scale = xc.std(axis=0)
        scale[scale == 0] = 1.0
        xc = xc / scale
    cov = xc.T @ xc / max(n - 1, 1)
    evals, evecs = _eig_desc(cov)
    total = float(evals.sum())
    if total <= 0.0 or np.all(x == x[0]):
        log.warning("degenerate cube: all pixels identical, keeping one zero-variance component")
        return PcaModel(x[0].copy(), evecs[:, :1].T.copy(), np.zeros(1), 0.0, scale)
    ratio = np.cumsum(evals) / total
    b = int(np.searchsorted(ratio, variance_target - 1e-12) + 1)
    rank = int(np.sum(evals > evals[0] * max(n, bands) * np.finfo(float).eps))
    b = max(1, min(b, rank, bands))
    return PcaModel(mean, evecs[:, :b].T.copy(), evals[:b].copy(), total, scale)


def apply_pca(model: PcaModel, cube: HsiCube) -> HsiCube:
    if cube.bands != model.n_bands:
        raise ValueError(f"band mismatch: model expects {model.n_bands}, cube has {cube.bands}")
    x = cube.pixels() - model.mean
    if model.scale is not None:
        x = x / model.scale
    y = x @ model.components.T
    return HsiCube(y.reshape(cube.height, cube.width, model.n_components))


def inverse_pca(model: PcaModel, reduced: HsiCube) -> HsiCube:
    y = reduced.pixels() @ model.components
    if model.scale is not None:
        y = y * model.scale
    y = y + model.mean
    return HsiCube(y.reshape(reduced.height, reduced.width, model.n_bands))


def first_component_image(reduced: HsiCube) -> np.ndarray:
    """Component 0 min-max scaled to [0, 1]; a constant component maps to 0.5."""
    img = reduced.data[:, :, 0].astype(np.float64)
    lo, hi = img.min(), img.max()
    if hi <= lo:
        return np.full(img.shape, 0.5)
    return (img - lo) / (hi - lo)


def save_pca(model: PcaModel, header_path: str | os.PathLike) -> None:
    """Store [mean; scale; components] as a (b+2) x B f32 raster."""
    scale = model.scale if model.scale is not None else np.ones(model.n_bands)
    mat = np.vstack([model.mean, scale, model.components])
    meta = {
        "kind": "pca",
        "explained_variance": model.explained_variance.tolist(),
        "total_variance": model.total_variance,
        "standardized": model.scale is not None,
    }
    write_raster(header_path, mat, "f32", meta)


def load_pca(header_path: str | os.PathLike) -> PcaModel:
    mat, header = read_raster(header_path)
    meta = header.get("meta", {})
    if meta.get("kind") != "pca":
        raise ValueError(f"{header_path} is not a PCA model container")
    mat = mat[:, :, 0].astype(np.float64)
    scale = mat[1] if meta.get("standardized") else None
    return PcaModel(mat[0], mat[2:], np.asarray(meta["explained_variance"], dtype=np.float64),
                    float(meta["total_variance"]), scale)
