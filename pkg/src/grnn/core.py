"""Core data model and file IO.

Cubes, segmentations and maps are stored as a small JSON header plus a raw
band-sequential little-endian binary file::

    scene.json   {"height": 64, "width": 64, "bands": 32, "dtype": "f32",
                  "byte_order": "little", "interleave": "bsq",
                  "data_file": "scene.raw"}
    scene.raw    bands x height x width values

Label sets are CSV files of ``row,col,class_id`` lines (header optional) with
1-indexed class ids. Classification maps render to binary PPM (P6).
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy import ndimage

DTYPES = {"f32": "<f4", "u32": "<u4", "u8": "u1"}

PROVENANCE_PREDICTED = 0
PROVENANCE_GROUND_TRUTH = 1
PROVENANCE_UNREACHED = 2


@dataclass
class HsiCube:
    """An H x W x B reflectance cube held in float64."""

    data: np.ndarray
    band_names: list[str] | None = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError(f"cube must be 3-D (H, W, B), got shape {data.shape}")
        if min(data.shape) < 1:
            raise ValueError(f"cube dimensions must be >= 1, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("cube contains non-finite values")
        self.data = data

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def bands(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]

    def pixels(self) -> np.ndarray:
        """Row-major (H*W, B) view of the spectra."""
        return self.data.reshape(-1, self.bands)


@dataclass
class LabelMap:
    """Sparse pixel -> class assignments; class ids are 1-indexed."""

    rows: np.ndarray
    cols: np.ndarray
    classes: np.ndarray
    num_classes: int
    shape: tuple[int, int]

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.int64).ravel()
        self.cols = np.asarray(self.cols, dtype=np.int64).ravel()
        self.classes = np.asarray(self.classes, dtype=np.int64).ravel()
        self.shape = (int(self.shape[0]), int(self.shape[1]))
        self.num_classes = int(self.num_classes)
        if not (len(self.rows) == len(self.cols) == len(self.classes)):
            raise ValueError("rows, cols and classes must have equal length")
        h, w = self.shape
        if len(self.rows):
            if self.rows.min() < 0 or self.rows.max() >= h or self.cols.min() < 0 or self.cols.max() >= w:
                raise ValueError(f"label coordinate out of range for image {h}x{w}")
            if self.classes.min() < 1:
                raise ValueError("class_id must be >= 1")
            if self.classes.max() > self.num_classes:
                raise ValueError(f"class_id {self.classes.max()} exceeds num_classes={self.num_classes}")
        flat = self.flat_index()
        if len(np.unique(flat)) != len(flat):
            raise ValueError("duplicate pixel in label map")

    def __len__(self) -> int:
        return len(self.rows)

    def flat_index(self) -> np.ndarray:
        return self.rows * self.shape[1] + self.cols

    def to_dense(self) -> np.ndarray:
        """H x W array of class ids with 0 for unlabeled pixels."""
        dense = np.zeros(self.shape, dtype=np.int64)
        dense[self.rows, self.cols] = self.classes
        return dense

    @classmethod
    def from_dense(cls, dense: np.ndarray, num_classes: int | None = None) -> "LabelMap":
        dense = np.asarray(dense)
        rows, cols = np.nonzero(dense > 0)
        classes = dense[rows, cols]
        if num_classes is None:
            num_classes = int(classes.max()) if len(classes) else 0
        return cls(rows, cols, classes, num_classes, dense.shape)

    def subset(self, mask: np.ndarray) -> "LabelMap":
        return LabelMap(self.rows[mask], self.cols[mask], self.classes[mask], self.num_classes, self.shape)


@dataclass
class SuperpixelSegmentation:
    """Pixel -> superpixel index map; indices are 0..count-1."""

    assignment: np.ndarray

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.int64)
        if self.assignment.ndim != 2:
            raise ValueError("assignment must be 2-D")

    @property
    def count(self) -> int:
        return int(self.assignment.max()) + 1 if self.assignment.size else 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.assignment.shape

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment.ravel(), minlength=self.count)


@dataclass
class ClassificationMap:
    """Per-pixel class ids (0 = unclassified) plus a provenance flag per pixel."""

    labels: np.ndarray
    provenance: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.provenance is None:
            self.provenance = np.zeros(self.labels.shape, dtype=np.uint8)
        self.provenance = np.asarray(self.provenance, dtype=np.uint8)
        if self.labels.ndim != 2 or self.provenance.shape != self.labels.shape:
            raise ValueError("labels and provenance must be matching 2-D arrays")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("class ids must be >= 0")

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape


def check_segmentation(seg: SuperpixelSegmentation) -> None:
    """Raise ValueError unless seg is a total partition into non-empty 4-connected sets."""
    a = seg.assignment
    if a.size == 0:
        raise ValueError("empty segmentation")
    if a.min() < 0:
        raise ValueError("negative superpixel index")
    sizes = seg.sizes()
    if np.any(sizes == 0):
        raise ValueError(f"empty superpixel indices: {np.flatnonzero(sizes == 0)[:10].tolist()}")
    objects = ndimage.find_objects(a + 1)
    for k, sl in enumerate(objects):
        _, n = ndimage.label(a[sl] == k)
        if n != 1:
            raise ValueError(f"superpixel {k} has {n} 4-connected components")


# ---------------------------------------------------------------------------
# raster container


def write_raster(header_path: str | os.PathLike, data: np.ndarray, dtype: str = "f32",
                 meta: dict[str, Any] | None = None) -> None:
    """Write an (H, W, B) or (H, W) array as JSON header + raw BSQ file."""
    if dtype not in DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}")
    header_path = Path(header_path)
    arr = np.asarray(data)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"raster must be 2-D or 3-D, got shape {arr.shape}")
    h, w, b = arr.shape
    raw_path = header_path.with_suffix(".raw")
    header = {
        "height": h,
        "width": w,
        "bands": b,
        "dtype": dtype,
        "byte_order": "little",
        "interleave": "bsq",
        "data_file": raw_path.name,
    }
    if meta:
        header["meta"] = meta
    bsq = np.ascontiguousarray(arr.transpose(2, 0, 1), dtype=DTYPES[dtype])
    raw_path.write_bytes(bsq.tobytes())
    header_path.write_text(json.dumps(header, indent=2))


def read_raster(header_path: str | os.PathLike) -> tuple[np.ndarray, dict[str, Any]]:
    """Read a container written by write_raster; returns (H, W, B) array and header."""
    header_path = Path(header_path)
    if not header_path.exists():
        raise FileNotFoundError(f"header not found: {header_path}")
    header = json.loads(header_path.read_text())
    for key in ("height", "width", "bands", "dtype"):
        if key not in header:
            raise ValueError(f"header missing field {key!r}")
    dtype = header["dtype"]
    if dtype not in DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}")
    if header.get("byte_order", "little") != "little":
        raise ValueError("only little-endian data is supported")
    if header.get("interleave", "bsq") != "bsq":
        raise ValueError("only band-sequential (bsq) interleave is supported")
    h, w, b = int(header["height"]), int(header["width"]), int(header["bands"])
    if min(h, w, b) < 1:
        raise ValueError(f"invalid dimensions {h}x{w}x{b}")
    raw_path = header_path.parent / header.get("data_file", header_path.with_suffix(".raw").name)
    if not raw_path.exists():
        raise FileNotFoundError(f"raw data file not found: {raw_path}")
    raw = raw_path.read_bytes()
    itemsize = np.dtype(DTYPES[dtype]).itemsize
    expected = h * w * b * itemsize
    if len(raw) != expected:
        raise ValueError(f"size mismatch: header implies {expected} bytes, raw file has {len(raw)}")
    arr = np.frombuffer(raw, dtype=DTYPES[dtype]).reshape(b, h, w).transpose(1, 2, 0)
    return arr, header


def load_cube(header_path: str | os.PathLike) -> HsiCube:
    arr, header = read_raster(header_path)
    if header["dtype"] != "f32":
        raise ValueError(f"cube must be f32, got {header['dtype']}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("cube contains non-finite values")
    return HsiCube(arr.astype(np.float64), band_names=header.get("meta", {}).get("band_names"))


def save_cube(cube: HsiCube, header_path: str | os.PathLike) -> None:
    meta = {"band_names": cube.band_names} if cube.band_names else None
    write_raster(header_path, cube.data, "f32", meta)


def load_segmentation(header_path: str | os.PathLike) -> SuperpixelSegmentation:
    arr, header = read_raster(header_path)
    if header["dtype"] != "u32" or arr.shape[2] != 1:
        raise ValueError("segmentation must be a single-band u32 raster")
    return SuperpixelSegmentation(arr[:, :, 0].astype(np.int64))


def save_segmentation(seg: SuperpixelSegmentation, header_path: str | os.PathLike) -> None:
    write_raster(header_path, seg.assignment, "u32", {"count": seg.count})


def save_classification(cmap: ClassificationMap, header_path: str | os.PathLike) -> None:
    """Two-band u32 raster: band 0 class ids, band 1 provenance."""
    write_raster(header_path, np.stack([cmap.labels, cmap.provenance], axis=2), "u32",
                 {"bands": ["class_id", "provenance"]})


def load_classification(header_path: str | os.PathLike) -> ClassificationMap:
    arr, header = read_raster(header_path)
    if header["dtype"] != "u32" or arr.shape[2] != 2:
        raise ValueError("classification map must be a two-band u32 raster")
    return ClassificationMap(arr[:, :, 0].astype(np.int64), arr[:, :, 1].astype(np.uint8))


# ---------------------------------------------------------------------------
# labels


def load_labels(path: str | os.PathLike, h: int, w: int, num_classes: int | None = None) -> LabelMap:
    """Read a ``row,col,class_id`` CSV. num_classes defaults to the largest id present."""
    rows, cols, classes = [], [], []
    with open(path, newline="", encoding="utf-8") as f:
        for lineno, rec in enumerate(csv.reader(f), start=1):
            if not rec or all(not x.strip() for x in rec):
                continue
            if len(rec) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 fields, got {len(rec)}")
            try:
                r, c, q = (int(x) for x in rec)
            except ValueError:
                if lineno == 1:
                    continue  # header
                raise ValueError(f"{path}:{lineno}: non-integer field") from None
            if not (0 <= r < h and 0 <= c < w):
                raise ValueError(f"{path}:{lineno}: coordinate ({r}, {c}) out of range for {h}x{w}")
            if q < 1:
                raise ValueError(f"{path}:{lineno}: class_id must be >= 1, got {q}")
            rows.append(r)
            cols.append(c)
            classes.append(q)
    if num_classes is None:
        num_classes = max(classes) if classes else 0
    seen: set[tuple[int, int]] = set()
    for r, c in zip(rows, cols):
        if (r, c) in seen:
            raise ValueError(f"{path}: duplicate pixel ({r}, {c})")
        seen.add((r, c))
    return LabelMap(rows, cols, classes, num_classes, (h, w))


def save_labels(labels: LabelMap, path: str | os.PathLike) -> None:
    with open(path, "w", newline="\n", encoding="utf-8") as f:
        f.write("row,col,class_id\n")
        for r, c, q in zip(labels.rows, labels.cols, labels.classes):
            f.write(f"{r},{c},{q}\n")


# ---------------------------------------------------------------------------
# maps


def default_palette(num_classes: int) -> np.ndarray:
    """num_classes evenly spaced saturated hues, one RGB row per class."""
    pal = np.zeros((num_classes, 3), dtype=np.uint8)
    for q in range(num_classes):
        pal[q] = _hsv_to_rgb(q / max(num_classes, 1), 0.85, 0.95)
    return pal


def _hsv_to_rgb(h: float, s: float, v: float) -> tuple[int, int, int]:
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    r, g, b = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return int(round(r * 255)), int(round(g * 255)), int(round(b * 255))


def write_ppm(rgb: np.ndarray, path: str | os.PathLike) -> None:
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(rgb.tobytes())


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise ValueError("not a binary PPM (P6)")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError("only 8-bit PPM is supported")
    pixels = np.frombuffer(data[pos + 1:pos + 1 + w * h * 3], dtype=np.uint8)
    return pixels.reshape(h, w, 3)


def emit_map(cmap: ClassificationMap, palette: np.ndarray | None, path: str | os.PathLike) -> None:
    """Render a map to a P6 PPM.

    palette row q-1 is the color of class q; unclassified pixels (0) are black.
    """
    c = int(cmap.labels.max()) if cmap.labels.size else 0
    if palette is None:
        palette = default_palette(c)
    palette = np.asarray(palette, dtype=np.uint8).reshape(-1, 3)
    if len(palette) < c:
        raise ValueError(f"palette has {len(palette)} colors, map uses {c} classes")
    table = np.vstack([np.zeros((1, 3), dtype=np.uint8), palette])
    write_ppm(table[cmap.labels], path)
