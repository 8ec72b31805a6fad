import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from grnn.core import SuperpixelSegmentation, check_segmentation
from grnn.superpixel import (
    SlicConfig,
    boundary_mask,
    boundary_overlay,
    enforce_connectivity,
    slic_segment,
    superpixel_adjacency,
)


def smooth_field(rng, h, w, sigma=3.0, noise=0.05):
    img = ndimage.gaussian_filter(rng.normal(size=(h, w)), sigma) + noise * rng.normal(size=(h, w))
    return (img - img.min()) / (img.max() - img.min())


def test_preset_defaults():
    cfg = SlicConfig()
    assert cfg.n_superpixels == 1200
    assert cfg.compactness == 0.1
    assert cfg.max_iters == 10


def test_constant_image_grid_oracle():
    seg = slic_segment(np.full((60, 60), 0.3), SlicConfig(n_superpixels=36))
    assert seg.count == 36
    assert np.all(seg.sizes() == 100)
    check_segmentation(seg)


def test_single_superpixel():
    img = np.random.default_rng(0).random((9, 7))
    seg = slic_segment(img, SlicConfig(n_superpixels=1))
    assert seg.count == 1 and seg.assignment.shape == (9, 7)


def test_too_many_superpixels():
    with pytest.raises(ValueError, match="exceeds"):
        slic_segment(np.zeros((3, 3)), SlicConfig(n_superpixels=10))


def test_config_validation():
    with pytest.raises(ValueError):
        SlicConfig(n_superpixels=0).validate()
    with pytest.raises(ValueError):
        SlicConfig(max_iters=0).validate()
    with pytest.raises(ValueError):
        SlicConfig(compactness=0).validate()


def test_non_finite_image():
    with pytest.raises(ValueError):
        slic_segment(np.array([[0.0, np.nan]]), SlicConfig(n_superpixels=1))


def test_deterministic():
    img = smooth_field(np.random.default_rng(1), 40, 50)
    a = slic_segment(img, SlicConfig(n_superpixels=30), seed=5)
    b = slic_segment(img, SlicConfig(n_superpixels=30), seed=5)
    assert np.array_equal(a.assignment, b.assignment)


def test_follows_intensity_edge():
    # two flat halves: no superpixel should straddle the step
    img = np.zeros((30, 30))
    img[:, 15:] = 1.0
    seg = slic_segment(img, SlicConfig(n_superpixels=18))
    for k in range(seg.count):
        assert len(np.unique(img[seg.assignment == k])) == 1


@pytest.mark.parametrize("seed", range(10))
def test_random_images_partition_and_count(seed):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(20, 65, size=2)
    n = int(rng.integers(10, 120))
    seg = slic_segment(smooth_field(rng, h, w), SlicConfig(n_superpixels=n))
    check_segmentation(seg)
    assert 0.8 * n <= seg.count <= 1.2 * n


def test_enforce_connectivity_already_connected():
    raw = np.repeat(np.repeat(np.array([[3, 1], [0, 2]]), 4, axis=0), 4, axis=1)
    seg = enforce_connectivity(raw, 0.25, 4)
    # same partition, indices compacted in raster order
    assert seg.count == 4
    assert seg.assignment[0, 0] == 0 and seg.assignment[0, 7] == 1
    for k in range(4):
        assert len(np.unique(raw[seg.assignment == k])) == 1


def test_small_fragment_absorbed():
    raw = np.zeros((8, 8), dtype=int)
    raw[:, 4:] = 1
    raw[2:4, 6] = 0          # 2-pixel island of label 0 inside label 1
    seg = enforce_connectivity(raw, 0.25, 2)
    assert seg.count == 2
    assert seg.assignment[2, 6] == seg.assignment[0, 7]


def test_stray_piece_of_large_label_merged():
    # label 0 has a big main piece and a 4-pixel stray; the stray is merged
    raw = np.zeros((10, 10), dtype=int)
    raw[:, 5:] = 1
    raw[8:, 8:] = 0
    seg = enforce_connectivity(raw, 0.0, 2)
    assert seg.count == 2
    check_segmentation(seg)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 16), st.integers(2, 16), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_enforce_connectivity_random_assignment(h, w, k, seed):
    raw = np.random.default_rng(seed).integers(0, k, size=(h, w))
    seg = enforce_connectivity(raw, 0.25, k)
    check_segmentation(seg)
    assert seg.count <= len(np.unique(raw))


def test_adjacency_4_vs_8():
    seg = SuperpixelSegmentation(np.array([[0, 1], [2, 0]]))
    assert superpixel_adjacency(seg, 4).tolist() == [[0, 1], [0, 2]]
    assert superpixel_adjacency(seg, 8).tolist() == [[0, 1], [0, 2], [1, 2]]
    with pytest.raises(ValueError):
        superpixel_adjacency(seg, 6)


def test_boundary_overlay():
    seg = SuperpixelSegmentation(np.array([[0, 0, 1], [0, 0, 1]]))
    mask = boundary_mask(seg)
    assert mask.tolist() == [[False, True, False], [False, True, False]]
    rgb = boundary_overlay(np.full((2, 3), 0.5), seg)
    assert rgb.dtype == np.uint8
    assert tuple(rgb[0, 1]) == (255, 0, 0)
    assert tuple(rgb[0, 0]) == (128, 128, 128)
