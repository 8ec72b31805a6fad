"""Small random instances shared by several test modules."""

import numpy as np
from scipy import sparse

from grnn.classifier import LossProblem, init_mlp
from grnn.core import HsiCube, LabelMap, SuperpixelSegmentation
from grnn.graph import SuperpixelGraph


def strip_segmentation(h: int, w: int, n: int) -> SuperpixelSegmentation:
    """n vertical strips; always 4-connected."""
    cols = np.array_split(np.arange(w), n)
    a = np.zeros((h, w), dtype=np.int64)
    for k, cs in enumerate(cols):
        a[:, cs] = k
    return SuperpixelSegmentation(a)


def dense_graph(rng, n: int) -> SuperpixelGraph:
    w = rng.uniform(0.1, 1.0, (n, n))
    w = np.triu(w, 1)
    return SuperpixelGraph(sparse.csr_matrix(w + w.T))


def random_labels(rng, h: int, w: int, c: int, k: int) -> LabelMap:
    idx = rng.choice(h * w, size=k, replace=False)
    rows, cols = np.divmod(idx, w)
    return LabelMap(rows, cols, rng.integers(1, c + 1, size=k), c, (h, w))


def tiny_instance(rng, b=3, h1=4, h2=4, c=2, n_sp=2, h=2, w=3, n_lab=3, unweighted=False):
    cube = HsiCube(rng.normal(size=(h, w, b)))
    seg = strip_segmentation(h, w, n_sp)
    graph = dense_graph(rng, n_sp)
    labels = random_labels(rng, h, w, c, n_lab)
    prob = LossProblem.build(cube, seg, graph, labels, c, unweighted)
    params = init_mlp(b, h1, h2, c, seed=int(rng.integers(1 << 30)))
    # nonzero biases so no coordinate sits on a symmetric point
    for k in ("b1", "b2", "b3"):
        params.arrays[k] = rng.normal(scale=0.3, size=params.arrays[k].shape)
    return cube, seg, graph, labels, prob, params


def fd_max_rel_error(params, prob, weights, step=1e-5):
    """Largest relative error between analytic and central-difference gradients."""
    from grnn.classifier import PARAM_KEYS, loss, loss_and_grad

    _, _, grads = loss_and_grad(params, prob, weights)
    worst = 0.0
    for key in PARAM_KEYS:
        arr = params.arrays[key]
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + step
            fp = loss(params, prob, weights)[0]
            arr[idx] = orig - step
            fm = loss(params, prob, weights)[0]
            arr[idx] = orig
            num = (fp - fm) / (2 * step)
            ana = grads[key][idx]
            worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-6))
    return worst
