"""SLIC superpixels on a single-channel image."""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .core import SuperpixelSegmentation


@dataclass
class SlicConfig:
    n_superpixels: int = 1200
    compactness: float = 0.1
    max_iters: int = 10
    min_size_fraction: float = 0.05

    def validate(self, n_pixels: int | None = None) -> None:
        if self.n_superpixels < 1:
            raise ValueError("n_superpixels must be >= 1")
        if n_pixels is not None and self.n_superpixels > n_pixels:
            raise ValueError(f"n_superpixels={self.n_superpixels} exceeds pixel count {n_pixels}")
        if self.compactness <= 0:
            raise ValueError("compactness must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not 0 <= self.min_size_fraction < 1:
            raise ValueError("min_size_fraction must be in [0, 1)")


def _grid_shape(h: int, w: int, n: int) -> tuple[int, int]:
    """Seed grid (rows, cols) trading count error against cell aspect ratio."""
    best, best_score = (1, 1), np.inf
    for ny in range(1, min(h, n) + 1):
        nx = int(np.clip(round(n / ny), 1, w))
        score = abs(ny * nx - n) / n + 0.25 * abs(np.log((h / ny) / (w / nx)))
        if score < best_score:
            best, best_score = (ny, nx), score
    return best


def _seed_centers(image: np.ndarray, n: int) -> np.ndarray:
    """Regular grid seeds moved to the lowest-gradient pixel of their 3x3 neighborhood."""
    h, w = image.shape
    ny, nx = _grid_shape(h, w, n)
    sy, sx = h / ny, w / nx
    gy, gx = np.gradient(image) if min(h, w) > 1 else (np.zeros_like(image), np.zeros_like(image))
    grad = gy**2 + gx**2
    centers = []
    for i in range(ny):
        for j in range(nx):
            cy, cx = (i + 0.5) * sy - 0.5, (j + 0.5) * sx - 0.5
            r0, c0 = int(round(cy)), int(round(cx))
            best = grad[r0, c0]
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    r, c = r0 + dr, c0 + dc
                    if 0 <= r < h and 0 <= c < w and grad[r, c] < best:
                        best, cy, cx = grad[r, c], float(r), float(c)
            centers.append((cy, cx, image[int(round(cy)), int(round(cx))]))
    return np.array(centers, dtype=np.float64)


def slic_segment(image: np.ndarray, cfg: SlicConfig, seed: int = 0) -> SuperpixelSegmentation:
    """Localized k-means in (intensity, row, col) space followed by connectivity repair.

    Distance is sqrt(dI^2 + (d_xy / S)^2 * m^2) with S = sqrt(H*W/N). Seeding
    is a deterministic grid, so ``seed`` does not change the result; it is
    accepted for interface symmetry with the other pipeline stages.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError("image must be 2-D")
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains non-finite values")
    h, w = image.shape
    cfg.validate(h * w)
    if cfg.n_superpixels == 1:
        return SuperpixelSegmentation(np.zeros((h, w), dtype=np.int64))

    step = np.sqrt(h * w / cfg.n_superpixels)
    centers = _seed_centers(image, cfg.n_superpixels)
    ny, nx = _grid_shape(h, w, cfg.n_superpixels)
    radius = int(np.ceil(max(h / ny, w / nx, step)))
    m2 = (cfg.compactness / step) ** 2
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)

    labels = np.full((h, w), -1, dtype=np.int64)
    for _ in range(cfg.max_iters):
        dist = np.full((h, w), np.inf)
        labels.fill(-1)
        for k, (cy, cx, ci) in enumerate(centers):
            r0, r1 = max(int(cy) - radius, 0), min(int(cy) + radius + 1, h)
            c0, c1 = max(int(cx) - radius, 0), min(int(cx) + radius + 1, w)
            win = image[r0:r1, c0:c1]
            d = (win - ci) ** 2 + m2 * ((rows[r0:r1, c0:c1] - cy) ** 2 + (cols[r0:r1, c0:c1] - cx) ** 2)
            better = d < dist[r0:r1, c0:c1]
            dist[r0:r1, c0:c1][better] = d[better]
            labels[r0:r1, c0:c1][better] = k
        orphan = labels < 0
        if orphan.any():
            # pixels outside every search window go to the spatially nearest center
            pr, pc = np.nonzero(orphan)
            d2 = (pr[:, None] - centers[None, :, 0]) ** 2 + (pc[:, None] - centers[None, :, 1]) ** 2
            labels[pr, pc] = np.argmin(d2, axis=1)
        flat = labels.ravel()
        count = np.bincount(flat, minlength=len(centers)).astype(np.float64)
        live = count > 0
        new = centers.copy()
        for dim, vals in enumerate((rows, cols, image)):
            s = np.bincount(flat, weights=vals.ravel(), minlength=len(centers))
            new[live, dim] = s[live] / count[live]
        if np.allclose(new, centers, rtol=0, atol=1e-10):
            centers = new
            break
        centers = new

    return enforce_connectivity(labels, cfg.min_size_fraction, cfg.n_superpixels)


def _components(labels: np.ndarray) -> np.ndarray:
    """4-connected components of equal-label pixels, numbered by first raster occurrence."""
    h, w = labels.shape
    idx = np.arange(h * w).reshape(h, w)
    same_r = labels[:, 1:] == labels[:, :-1]
    same_d = labels[1:, :] == labels[:-1, :]
    src = np.concatenate([idx[:, :-1][same_r], idx[:-1, :][same_d]])
    dst = np.concatenate([idx[:, 1:][same_r], idx[1:, :][same_d]])
    graph = coo_matrix((np.ones(len(src), dtype=np.int8), (src, dst)), shape=(h * w, h * w))
    _, comp = connected_components(graph, directed=False)
    return _relabel_first_occurrence(comp).reshape(h, w)


def _relabel_first_occurrence(flat: np.ndarray) -> np.ndarray:
    flat = np.asarray(flat).ravel()
    _, first = np.unique(flat, return_index=True)
    remap = np.empty(flat.max() + 1, dtype=np.int64)
    remap[flat[np.sort(first)]] = np.arange(len(first))
    return remap[flat]


def enforce_connectivity(raw: np.ndarray, min_size_fraction: float = 0.05,
                         n_superpixels: int | None = None) -> SuperpixelSegmentation:
    """Split labels into 4-connected pieces and merge small pieces into neighbors.

    A piece smaller than ``min_size_fraction * H*W / n_superpixels`` is merged
    into its largest adjacent piece, smallest pieces first. Stray pieces (any
    piece other than the largest one of its original label) are merged too, so
    the output never has more superpixels than the input has labels. Output
    indices are compacted in raster order of first appearance.
    """
    raw = np.asarray(raw)
    h, w = raw.shape
    if n_superpixels is None:
        n_superpixels = len(np.unique(raw))
    comp = _components(raw)
    k = int(comp.max()) + 1
    threshold = min_size_fraction * h * w / max(n_superpixels, 1)
    sizes = np.bincount(comp.ravel(), minlength=k).astype(np.int64)

    # largest piece of each original label (ties: lowest piece id)
    piece_label = np.empty(k, dtype=np.int64)
    piece_label[comp.ravel()] = raw.ravel()
    order = np.lexsort((np.arange(k), -sizes, piece_label))
    main = np.zeros(k, dtype=bool)
    first_of_label = np.ones(k, dtype=bool)
    first_of_label[1:] = piece_label[order][1:] != piece_label[order][:-1]
    main[order[first_of_label]] = True

    def needs_merge(u: int) -> bool:
        return (not main[u]) or sizes[u] < threshold

    if k == 1 or not any(needs_merge(u) for u in range(k)):
        return SuperpixelSegmentation(comp)

    a = np.concatenate([comp[:, :-1].ravel(), comp[:-1, :].ravel()])
    b = np.concatenate([comp[:, 1:].ravel(), comp[1:, :].ravel()])
    diff = a != b
    pairs = np.unique(np.sort(np.stack([a[diff], b[diff]], axis=1), axis=1), axis=0)
    adj: list[set[int]] = [set() for _ in range(k)]
    for u, v in pairs:
        adj[u].add(int(v))
        adj[v].add(int(u))

    parent = np.arange(k)
    heap = [(int(sizes[u]), u) for u in range(k) if needs_merge(u)]
    heapq.heapify(heap)
    while heap:
        size, u = heapq.heappop(heap)
        if parent[u] != u or sizes[u] != size or not needs_merge(u) or not adj[u]:
            continue
        target = max(adj[u], key=lambda v: (sizes[v], -v))
        parent[u] = target
        sizes[target] += sizes[u]
        for v in adj[u]:
            adj[v].discard(u)
            if v != target:
                adj[v].add(target)
                adj[target].add(v)
        adj[u] = set()
        if needs_merge(target):
            heapq.heappush(heap, (int(sizes[target]), target))

    root = parent.copy()
    for i in range(k):
        r = i
        while root[r] != r:
            r = root[r]
        root[i] = r
    merged = root[comp.ravel()]
    return SuperpixelSegmentation(_relabel_first_occurrence(merged).reshape(h, w))


def boundary_mask(seg: SuperpixelSegmentation) -> np.ndarray:
    """Pixels whose right or lower 4-neighbor lies in a different superpixel."""
    a = seg.assignment
    mask = np.zeros(a.shape, dtype=bool)
    mask[:, :-1] |= a[:, :-1] != a[:, 1:]
    mask[:-1, :] |= a[:-1, :] != a[1:, :]
    return mask


def boundary_overlay(image: np.ndarray, seg: SuperpixelSegmentation) -> np.ndarray:
    """Grayscale rendering of image with superpixel boundaries in red, as uint8 RGB."""
    gray = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    rgb = np.repeat((gray * 255).round().astype(np.uint8)[:, :, None], 3, axis=2)
    rgb[boundary_mask(seg)] = (255, 0, 0)
    return rgb


def superpixel_adjacency(seg: SuperpixelSegmentation, connectivity: int = 8) -> np.ndarray:
    """Unique (k, l) pairs, k < l, of superpixels touching under 4- or 8-connectivity."""
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    a = seg.assignment
    pairs = [(a[:, :-1], a[:, 1:]), (a[:-1, :], a[1:, :])]
    if connectivity == 8:
        pairs += [(a[:-1, :-1], a[1:, 1:]), (a[:-1, 1:], a[1:, :-1])]
    u = np.concatenate([p.ravel() for p, _ in pairs])
    v = np.concatenate([q.ravel() for _, q in pairs])
    keep = u != v
    e = np.sort(np.stack([u[keep], v[keep]], axis=1), axis=1)
    if len(e) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(e, axis=0)


__all__ = [
    "SlicConfig",
    "slic_segment",
    "enforce_connectivity",
    "boundary_mask",
    "boundary_overlay",
    "superpixel_adjacency",
]
