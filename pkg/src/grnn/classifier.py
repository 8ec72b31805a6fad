"""Pixelwise MLP classifier trained with a graph-regularized loss.

The network maps a reduced spectrum in R^b to class probabilities through two
leaky-ReLU hidden layers and a softmax. Training minimizes, over all pixels at
once,

    sum_{j labeled}  CE(Y_j, p_j)                               (pixel)
  + lam_spc * sum_{k labeled} |t_k - phi_k|^2                   (superpixel)
  + lam_g   * sum_{k,l} W_kl |phi_k/sqrt(d_k) - phi_l/sqrt(d_l)|^2  (graph)
  + lam_v   * sum_k var{p_j : j in S_k}                         (variance)
  - lam_en  * H(mean_k phi_k)                                   (entropy)

where phi_k is the mean prediction over superpixel k. Gradients are derived by
hand; see ``loss_and_grad``.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from .core import HsiCube, LabelMap, SuperpixelSegmentation
from .graph import SuperpixelGraph, normalized_adjacency
from .labels import one_hot_matrix, soft_labels

PARAM_KEYS = ("W1", "b1", "W2", "b2", "W3", "b3")
TERM_NAMES = ("pixel", "superpixel", "graph", "variance", "entropy")


@dataclass
class MlpParams:
    arrays: dict[str, np.ndarray]
    negative_slope: float = 0.1
    seed: int | None = None

    @property
    def sizes(self) -> tuple[int, int, int, int]:
        w1, w2, w3 = self.arrays["W1"], self.arrays["W2"], self.arrays["W3"]
        return w1.shape[0], w1.shape[1], w2.shape[1], w3.shape[1]

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def copy(self) -> "MlpParams":
        return MlpParams({k: v.copy() for k, v in self.arrays.items()}, self.negative_slope, self.seed)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.arrays[k].ravel() for k in PARAM_KEYS])

    def with_flat(self, vec: np.ndarray) -> "MlpParams":
        out, pos = {}, 0
        for k in PARAM_KEYS:
            a = self.arrays[k]
            out[k] = np.asarray(vec[pos:pos + a.size], dtype=np.float64).reshape(a.shape)
            pos += a.size
        return MlpParams(out, self.negative_slope, self.seed)


@dataclass
class LossWeights:
    lambda_spc: float = 0.0
    lambda_g: float = 0.0
    lambda_v: float = 0.0
    lambda_en: float = 0.0

    def validate(self) -> None:
        for name in ("lambda_spc", "lambda_g", "lambda_v", "lambda_en"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def n_params(b: int, h1: int, h2: int, c: int) -> int:
    return (b + 1) * h1 + (h1 + 1) * h2 + (h2 + 1) * c


def init_mlp(b: int, h1: int, h2: int, c: int, seed: int = 0, negative_slope: float = 0.1) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    if min(b, h1, h2, c) < 1:
        raise ValueError("layer sizes must be >= 1")
    rng = np.random.default_rng(seed)
    arrays = {}
    for i, (fan_in, fan_out) in enumerate(((b, h1), (h1, h2), (h2, c)), start=1):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        arrays[f"W{i}"] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        arrays[f"b{i}"] = np.zeros(fan_out)
    return MlpParams(arrays, negative_slope, seed)


def leaky_relu(u: np.ndarray, gamma: float = 0.1) -> np.ndarray:
    return np.maximum(0.0, u) + gamma * np.minimum(0.0, u)


def _leaky_slope(z: np.ndarray, gamma: float) -> np.ndarray:
    # 1 where z >= +0, gamma where z < 0; branch-free for speed on mixed signs
    s = np.copysign(0.5 * (1.0 - gamma), z)
    s += 0.5 * (1.0 + gamma)
    return s


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def _forward_cache(params: MlpParams, x: np.ndarray):
    """Returns hidden slopes and activations plus log-probabilities."""
    a = params.arrays
    g = params.negative_slope
    z1 = x @ a["W1"] + a["b1"]
    s1 = _leaky_slope(z1, g)
    h1 = z1 * s1
    z2 = h1 @ a["W2"] + a["b2"]
    s2 = _leaky_slope(z2, g)
    h2 = z2 * s2
    z3 = h2 @ a["W3"] + a["b3"]
    return s1, h1, s2, h2, _log_softmax(z3)


def forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Class probabilities for one spectrum (b,) or a batch (n, b)."""
    x = np.asarray(x, dtype=np.float64)
    return np.exp(_forward_cache(params, x)[-1])


@dataclass
class LossProblem:
    """Everything the loss needs besides the parameters, precomputed once."""

    x: np.ndarray                  # (P, b) all pixels
    assignment: np.ndarray         # (P,) superpixel of each pixel
    sizes: np.ndarray              # (N,)
    mean_op: sparse.csr_matrix     # (N, P) superpixel averaging
    labeled_idx: np.ndarray        # flat pixel indices in L
    labeled_onehot: np.ndarray     # (|L|, c)
    soft: np.ndarray               # (N, c) t
    sp_mask: np.ndarray            # (N,) superpixel labeled
    weights: sparse.csr_matrix     # (N, N) W
    degrees: np.ndarray            # (N,)
    s_norm: sparse.csr_matrix      # D^-1/2 W D^-1/2
    num_classes: int
    graph_term_unweighted: bool = False

    @classmethod
    def build(cls, reduced: HsiCube, seg: SuperpixelSegmentation, graph: SuperpixelGraph,
              labels: LabelMap, num_classes: int | None = None,
              graph_term_unweighted: bool = False) -> "LossProblem":
        c = labels.num_classes if num_classes is None else num_classes
        if reduced.shape != seg.shape or labels.shape != seg.shape:
            raise ValueError("cube, segmentation and labels must share the image shape")
        if graph.n != seg.count:
            raise ValueError(f"graph has {graph.n} nodes, segmentation {seg.count} superpixels")
        assignment = seg.assignment.ravel()
        n, p = seg.count, assignment.size
        sizes = np.bincount(assignment, minlength=n).astype(np.float64)
        mean_op = sparse.csr_matrix((1.0 / sizes[assignment], (assignment, np.arange(p))), shape=(n, p))
        sl = soft_labels(labels, seg, c)
        return cls(
            x=reduced.pixels(),
            assignment=assignment,
            sizes=sizes,
            mean_op=mean_op,
            labeled_idx=labels.flat_index(),
            labeled_onehot=one_hot_matrix(labels.classes, c),
            soft=sl.soft,
            sp_mask=sl.labeled_mask,
            weights=graph.weights,
            degrees=graph.degrees,
            s_norm=normalized_adjacency(graph),
            num_classes=c,
            graph_term_unweighted=graph_term_unweighted,
        )


def _check_finite(name: str, value) -> None:
    if not np.all(np.isfinite(value)):
        raise FloatingPointError(f"non-finite value in loss term '{name}'")


def _graph_energy(prob: LossProblem, phi: np.ndarray) -> float:
    u = phi / np.sqrt(prob.degrees)[:, None]
    if prob.graph_term_unweighted:
        n = len(u)
        return float(2 * n * np.sum(u * u) - 2 * np.sum(u.sum(axis=0) ** 2))
    coo = prob.weights.tocoo()
    diff = u[coo.row] - u[coo.col]
    return float(np.sum(coo.data * np.sum(diff * diff, axis=1)))


def loss_and_grad(params: MlpParams, prob: LossProblem, weights: LossWeights,
                  need_grad: bool = True):
    """Total loss, per-term breakdown (weighted) and gradient dict (or None)."""
    s1, h1, s2, h2, logp = _forward_cache(params, prob.x)
    p = np.exp(logp)
    phi = prob.mean_op @ p
    n = len(phi)

    terms = {}
    lab = prob.labeled_idx
    terms["pixel"] = float(-np.sum(prob.labeled_onehot * logp[lab]))
    r = (phi - prob.soft)[prob.sp_mask]
    terms["superpixel"] = weights.lambda_spc * float(np.sum(r * r))
    terms["graph"] = weights.lambda_g * _graph_energy(prob, phi) if weights.lambda_g else 0.0
    dev = p - phi[prob.assignment]
    terms["variance"] = weights.lambda_v * float(np.sum(np.sum(dev * dev, axis=1) / prob.sizes[prob.assignment]))
    mbar = phi.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        entropy = -float(np.sum(mbar * np.log(mbar)))
    terms["entropy"] = -weights.lambda_en * entropy if weights.lambda_en else 0.0
    for name in TERM_NAMES:
        _check_finite(name, terms[name])
    total = float(sum(terms.values()))
    if not need_grad:
        return total, terms, None

    # gradient w.r.t. superpixel means phi
    g_phi = np.zeros_like(phi)
    if weights.lambda_spc:
        g_phi[prob.sp_mask] += 2.0 * weights.lambda_spc * (phi - prob.soft)[prob.sp_mask]
    if weights.lambda_g:
        sq = np.sqrt(prob.degrees)[:, None]
        if prob.graph_term_unweighted:
            u = phi / sq
            g_phi += weights.lambda_g * (4.0 * n * u - 4.0 * u.sum(axis=0)) / sq
        else:
            g_phi += weights.lambda_g * 4.0 * (phi - prob.s_norm @ phi)
    if weights.lambda_en:
        g_phi += weights.lambda_en * (np.log(mbar) + 1.0) / n
    _check_finite("gradient", g_phi)

    # gradient w.r.t. pixel probabilities; the variance term's dependence on
    # phi drops out because deviations sum to zero within each superpixel
    g_p = prob.mean_op.T @ g_phi
    if weights.lambda_v:
        g_p += weights.lambda_v * 2.0 * dev / prob.sizes[prob.assignment][:, None]

    # through softmax, then cross-entropy added directly on the logits
    dz3 = p * (g_p - np.sum(g_p * p, axis=1, keepdims=True))
    dz3[lab] += p[lab] - prob.labeled_onehot

    a = params.arrays
    grads = {}
    grads["W3"] = h2.T @ dz3
    grads["b3"] = dz3.sum(axis=0)
    dz2 = (dz3 @ a["W3"].T) * s2
    grads["W2"] = h1.T @ dz2
    grads["b2"] = dz2.sum(axis=0)
    dz1 = (dz2 @ a["W2"].T) * s1
    grads["W1"] = prob.x.T @ dz1
    grads["b1"] = dz1.sum(axis=0)
    return total, terms, grads


def loss(params: MlpParams, prob: LossProblem, weights: LossWeights) -> tuple[float, dict[str, float]]:
    total, terms, _ = loss_and_grad(params, prob, weights, need_grad=False)
    return total, terms


def gradient(params: MlpParams, prob: LossProblem, weights: LossWeights) -> dict[str, np.ndarray]:
    return loss_and_grad(params, prob, weights)[2]


def superpixel_prediction(params: MlpParams, reduced: HsiCube, seg: SuperpixelSegmentation) -> np.ndarray:
    """Mean predicted distribution over the pixels of each superpixel, (N, c)."""
    p = forward(params, reduced.pixels())
    flat = seg.assignment.ravel()
    n = seg.count
    sizes = np.bincount(flat, minlength=n).astype(np.float64)
    out = np.empty((n, p.shape[1]))
    for q in range(p.shape[1]):
        out[:, q] = np.bincount(flat, weights=p[:, q], minlength=n) / sizes
    return out


def adam_step(state: AdamState, params: MlpParams, grads: dict[str, np.ndarray]) -> tuple[MlpParams, AdamState]:
    """One bias-corrected Adam update; params and state are updated in place and returned."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for k, g in grads.items():
        if k not in state.m:
            state.m[k] = np.zeros_like(g)
            state.v[k] = np.zeros_like(g)
        m, v = state.m[k], state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params.arrays[k] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


@dataclass
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    n_iter: int = 500
    seed: int = 0
    hidden: tuple[int, int] = (196, 160)
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    negative_slope: float = 0.1
    graph_term_unweighted: bool = False


def train(reduced: HsiCube, seg: SuperpixelSegmentation, graph: SuperpixelGraph, labels: LabelMap,
          cfg: TrainConfig, num_classes: int | None = None) -> tuple[MlpParams, list[dict[str, float]]]:
    """Full-batch Adam for cfg.n_iter iterations; returns parameters and per-iteration losses.

    Each history entry records the loss evaluated before that iteration's update.
    """
    cfg.weights.validate()
    prob = LossProblem.build(reduced, seg, graph, labels, num_classes, cfg.graph_term_unweighted)
    h1, h2 = cfg.hidden
    params = init_mlp(reduced.bands, h1, h2, prob.num_classes, cfg.seed, cfg.negative_slope)
    state = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    history = []
    for it in range(cfg.n_iter):
        total, terms, grads = loss_and_grad(params, prob, cfg.weights)
        history.append({"iter": it, "total": total, **terms})
        adam_step(state, params, grads)
    return params, history


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: MlpParams, header_path: str | os.PathLike) -> None:
    """JSON header plus a little-endian f32 blob of W1, b1, W2, b2, W3, b3."""
    header_path = Path(header_path)
    raw_path = header_path.with_suffix(".raw")
    raw_path.write_bytes(params.flat().astype("<f4").tobytes())
    header = {
        "kind": "mlp",
        "sizes": list(params.sizes),
        "negative_slope": params.negative_slope,
        "seed": params.seed,
        "dtype": "f32",
        "byte_order": "little",
        "layout": list(PARAM_KEYS),
        "data_file": raw_path.name,
    }
    header_path.write_text(json.dumps(header, indent=2))


def load_checkpoint(header_path: str | os.PathLike) -> MlpParams:
    header_path = Path(header_path)
    header = json.loads(header_path.read_text())
    if header.get("kind") != "mlp":
        raise ValueError(f"{header_path} is not an MLP checkpoint")
    b, h1, h2, c = header["sizes"]
    template = init_mlp(b, h1, h2, c, 0, header["negative_slope"])
    raw = (header_path.parent / header["data_file"]).read_bytes()
    vec = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    if vec.size != template.n_params:
        raise ValueError(f"size mismatch: expected {template.n_params} parameters, found {vec.size}")
    out = template.with_flat(vec)
    out.seed = header.get("seed")
    return out


def write_history(history: list[dict[str, float]], path: str | os.PathLike) -> None:
    cols = ["iter", "total", *TERM_NAMES]
    with open(path, "w", newline="\n", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(cols)
        for row in history:
            w.writerow([row["iter"]] + [repr(float(row[k])) for k in cols[1:]])
