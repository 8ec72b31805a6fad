"""Synthetic crown-structured hyperspectral scenes.

The scene is a Voronoi tessellation of random sites ("crowns"), each crown
belonging to one class. Every class has a smooth reflectance signature built
from a few Gaussian bumps over the band axis, optionally blended toward a shared
base spectrum so classes look alike. Each crown may carry its own brightness
gain, and pixels get i.i.d. Gaussian noise on top.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import HsiCube, LabelMap


@dataclass
class SynthConfig:
    h: int = 64
    w: int = 64
    bands: int = 32
    n_classes: int = 8
    crowns_per_class: int = 3
    noise_sigma: float = 0.0
    snr_db: float | None = None       # when set, overrides noise_sigma
    spectral_separation: float = 0.5
    class_contrast: float = 1.0       # 1 = independent spectra, -> 0 = all near a shared base
    crown_variability: float = 0.0    # std of a per-crown brightness factor around 1
    label_fraction: float = 0.01
    seed: int = 0
    max_retries: int = 200

    def validate(self) -> None:
        if min(self.h, self.w, self.bands) < 1:
            raise ValueError("h, w and bands must be >= 1")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.crowns_per_class < 1:
            raise ValueError("crowns_per_class must be >= 1")
        if not 0.0 < self.label_fraction <= 1.0:
            raise ValueError("label_fraction must be in (0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0.0 < self.class_contrast <= 1.0:
            raise ValueError("class_contrast must be in (0, 1]")
        if self.crown_variability < 0:
            raise ValueError("crown_variability must be >= 0")
        if self.n_classes * self.crowns_per_class > self.h * self.w:
            raise ValueError("more crowns than pixels")


SYNTH_PRESETS = {
    # classes share half their signature, so pixels alone are hard to separate at 15 dB
    "desk": SynthConfig(h=64, w=64, bands=32, n_classes=8, crowns_per_class=3, snr_db=15.0,
                        spectral_separation=0.1, class_contrast=0.5, label_fraction=0.01),
}


@dataclass
class SynthScene:
    cube: HsiCube
    truth: LabelMap
    sparse: LabelMap
    signatures: np.ndarray   # (c, bands)
    crowns: np.ndarray       # (h, w) crown index
    noise_sigma: float


def smooth_spectrum(rng: np.random.Generator, bands: int) -> np.ndarray:
    """Baseline plus 3-5 Gaussian bumps, clipped to [0, 1]."""
    axis = np.arange(bands, dtype=np.float64)
    s = np.full(bands, rng.uniform(0.05, 0.2))
    for _ in range(rng.integers(3, 6)):
        amp = rng.uniform(0.05, 0.4)
        center = rng.uniform(0, bands - 1)
        width = rng.uniform(bands / 12, bands / 4) if bands > 1 else 1.0
        s += amp * np.exp(-0.5 * ((axis - center) / width) ** 2)
    return np.clip(s, 0.0, 1.0)


def _signatures(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    for _ in range(cfg.max_retries):
        base = smooth_spectrum(rng, cfg.bands)
        own = np.stack([smooth_spectrum(rng, cfg.bands) for _ in range(cfg.n_classes)])
        sig = (1.0 - cfg.class_contrast) * base + cfg.class_contrast * own
        d = np.sqrt(np.sum((sig[:, None] - sig[None]) ** 2, axis=2))
        if d[np.triu_indices(cfg.n_classes, 1)].min() >= cfg.spectral_separation:
            return sig
    raise ValueError(f"could not draw {cfg.n_classes} signatures separated by "
                     f"{cfg.spectral_separation} in {cfg.max_retries} attempts")


def generate_scene(cfg: SynthConfig) -> SynthScene:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    sig = _signatures(rng, cfg)

    n_sites = cfg.n_classes * cfg.crowns_per_class
    flat_sites = rng.choice(cfg.h * cfg.w, size=n_sites, replace=False)
    sites = np.column_stack(np.divmod(flat_sites, cfg.w)).astype(np.float64)
    site_class = rng.permutation(np.repeat(np.arange(1, cfg.n_classes + 1), cfg.crowns_per_class))
    rr, cc = np.mgrid[0:cfg.h, 0:cfg.w]
    _, crown = cKDTree(sites).query(np.column_stack([rr.ravel(), cc.ravel()]))
    crowns = crown.reshape(cfg.h, cfg.w)
    truth_dense = site_class[crowns]

    clean = sig[truth_dense - 1]
    if cfg.crown_variability > 0:
        gain = np.clip(1.0 + cfg.crown_variability * rng.normal(size=n_sites), 0.1, None)
        clean = clean * gain[crowns][:, :, None]
    sigma = cfg.noise_sigma
    if cfg.snr_db is not None:
        sigma = float(np.sqrt(np.mean(clean**2) / 10 ** (cfg.snr_db / 10)))
    data = clean + rng.normal(0.0, 1.0, clean.shape) * sigma if sigma > 0 else clean.copy()

    truth = LabelMap.from_dense(truth_dense, cfg.n_classes)
    if cfg.label_fraction >= 1.0:
        sparse = truth
    else:
        picked = []
        for q in range(1, cfg.n_classes + 1):
            members = np.flatnonzero(truth.classes == q)
            if len(members) == 0:
                continue
            k = max(1, int(round(cfg.label_fraction * len(members))))
            picked.append(rng.choice(members, size=k, replace=False))
        mask = np.zeros(len(truth), dtype=bool)
        mask[np.concatenate(picked)] = True
        sparse = truth.subset(mask)
    return SynthScene(HsiCube(data), truth, sparse, sig, crowns, sigma)


def generate(cfg: SynthConfig) -> tuple[HsiCube, LabelMap, LabelMap]:
    """(cube, full ground truth, sparse training labels)."""
    scene = generate_scene(cfg)
    return scene.cube, scene.truth, scene.sparse
