"""End-to-end pipeline: preprocess, segment, graph, train, augment, propagate, evaluate.

``run_arrays`` works on in-memory data; ``run_pipeline`` reads the configured
files, caches intermediate stages under content-hash names and writes all
artifacts plus a manifest that can be replayed.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np
from scipy import sparse
from threadpoolctl import threadpool_limits

from . import __version__
from .classifier import (
    PARAM_KEYS,
    LossWeights,
    MlpParams,
    TrainConfig,
    forward,
    save_checkpoint,
    train,
    write_history,
)
from .core import (
    PROVENANCE_GROUND_TRUTH,
    ClassificationMap,
    HsiCube,
    LabelMap,
    SuperpixelSegmentation,
    default_palette,
    emit_map,
    load_cube,
    load_labels,
    save_classification,
    write_ppm,
)
from .graph import GraphConfig, SuperpixelGraph, build_adjacency, extract_features
from .labels import label_matrix
from .metrics import EvalReport, evaluate, split_labels
from .preprocess import DEFAULT_VARIANCE_TARGET, PcaModel, apply_pca, first_component_image, fit_pca
from .propagate import DEFAULT_ALPHA, DEFAULT_TAU, confident_set, final_labels, merge_labels, propagate
from .superpixel import SlicConfig, boundary_overlay, slic_segment
from .synth import SYNTH_PRESETS, SynthConfig, generate_scene

log = logging.getLogger(__name__)

MODES = ("grnn", "mlp-only", "labelprop-only")
OUTPUT_DIR_ENV = "GRNN_OUTPUT_DIR"


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineConfig:
    cube: str | None = None
    labels: str | None = None
    test_labels: str | None = None
    output_dir: str = "grnn-out"
    num_classes: int | None = None
    variance_target: float = DEFAULT_VARIANCE_TARGET
    slic: SlicConfig = field(default_factory=SlicConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    hidden: tuple[int, int] = (256, 240)
    n_iter: int = 500
    lr: float = 1e-3
    tau: float = DEFAULT_TAU
    alpha: float = DEFAULT_ALPHA
    split: dict[str, float] | None = None   # {"train_fraction": f} or {"per_class_count": n}
    seed: int = 0
    mode: str = "grnn"
    dump_t_star: bool = False
    cache: bool = True

    def validate(self, n_pixels: int | None = None) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if not 0.0 < self.variance_target <= 1.0:
            raise ValueError("variance_target must be in (0, 1]")
        self.slic.validate(n_pixels)
        self.graph.validate()
        self.loss_weights.validate()
        if len(self.hidden) != 2 or min(self.hidden) < 1:
            raise ValueError("hidden must be two positive widths")
        if self.n_iter < 0:
            raise ValueError("n_iter must be >= 0")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must be in [0, 1]")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must be in [0, 1)")
        if self.split is not None:
            keys = set(self.split)
            if keys not in ({"train_fraction"}, {"per_class_count"}):
                raise ValueError("split must have exactly one key: train_fraction or per_class_count")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any], base: "PipelineConfig | None" = None) -> "PipelineConfig":
        """Overlay d on base (default: a fresh config). A "preset" key selects the base."""
        d = dict(d)
        preset = d.pop("preset", None)
        if preset is not None:
            base = preset_config(preset)
        cfg = copy.deepcopy(base) if base is not None else cls()
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        subs = {"slic": SlicConfig, "graph": GraphConfig, "loss_weights": LossWeights}
        for key, value in d.items():
            if key in subs:
                sub = getattr(cfg, key)
                allowed = {f.name for f in fields(subs[key])}
                bad = set(value) - allowed
                if bad:
                    raise ValueError(f"unknown {key} keys: {sorted(bad)}")
                for k, v in value.items():
                    setattr(sub, k, v)
            elif key == "hidden":
                cfg.hidden = tuple(int(v) for v in value)
            else:
                setattr(cfg, key, value)
        return cfg

    def config_hash(self) -> str:
        """Hash of every field that can change the results."""
        d = self.to_dict()
        for k in ("output_dir", "dump_t_star", "cache"):
            d.pop(k)
        return _hash_json(d)


PIPELINE_PRESETS: dict[str, PipelineConfig] = {
    "indian_pines": PipelineConfig(
        slic=SlicConfig(n_superpixels=1200),
        graph=GraphConfig(h=15.0, beta=0.9, sigma_s=2.0, sigma_l=1.0, xi=8),
        loss_weights=LossWeights(0.15, 1e5, 2.0, 20.0),
        hidden=(256, 240), n_iter=500, tau=0.4, alpha=0.5,
        split={"per_class_count": 10},
    ),
    "french_guiana": PipelineConfig(
        slic=SlicConfig(n_superpixels=5000),
        graph=GraphConfig(h=15.0, beta=0.5, sigma_s=5.0, sigma_l=40.0, xi=8),
        loss_weights=LossWeights(0.1, 0.2, 0.1, 20.0),
        hidden=(512, 676), n_iter=400, tau=0.4, alpha=0.5,
        split={"train_fraction": 0.1},
    ),
    # desk-scale scenes: kernel widths match the spread of 64x64x32 PCA features
    "synth": PipelineConfig(
        slic=SlicConfig(n_superpixels=150),
        graph=GraphConfig(h=1.0, beta=0.9, sigma_s=0.25, sigma_l=1.0, xi=8, n_s=20),
        loss_weights=LossWeights(3.0, 0.2, 0.5, 20.0),
        hidden=(32, 32), n_iter=300, tau=0.4, alpha=0.5,
    ),
}


def preset_config(name: str) -> PipelineConfig:
    if name not in PIPELINE_PRESETS:
        raise ValueError(f"unknown preset {name!r}; expected one of {sorted(PIPELINE_PRESETS)}")
    return copy.deepcopy(PIPELINE_PRESETS[name])


# ---------------------------------------------------------------------------
# hashing and cache


def _hash_json(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def _hash_array(a: np.ndarray) -> str:
    a = np.ascontiguousarray(a)
    h = hashlib.sha256(f"{a.dtype.str}{a.shape}".encode())
    h.update(a.tobytes())
    return h.hexdigest()


def _hash_labels(labels: LabelMap) -> str:
    return _hash_json([_hash_array(labels.rows), _hash_array(labels.cols),
                       _hash_array(labels.classes), labels.num_classes, list(labels.shape)])


def file_sha256(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class StageCache:
    """float64 .npz files named <stage>-<key>.npz; a None directory disables caching."""

    def __init__(self, directory: str | os.PathLike | None):
        self.dir = Path(directory) if directory is not None else None

    def _path(self, stage: str, key: str) -> Path:
        return self.dir / f"{stage}-{key[:24]}.npz"

    def load(self, stage: str, key: str) -> dict[str, np.ndarray] | None:
        if self.dir is None:
            return None
        path = self._path(stage, key)
        if not path.exists():
            return None
        with np.load(path, allow_pickle=False) as z:
            log.debug("cache hit %s", path.name)
            return {k: z[k] for k in z.files}

    def store(self, stage: str, key: str, arrays: dict[str, np.ndarray]) -> None:
        if self.dir is None:
            return
        self.dir.mkdir(parents=True, exist_ok=True)
        path = self._path(stage, key)
        tmp = path.with_suffix(".tmp.npz")
        np.savez(tmp, **arrays)
        os.replace(tmp, path)


# ---------------------------------------------------------------------------
# stages


@dataclass
class Prepared:
    """Everything upstream of training: PCA, reduced cube, superpixels, graph."""

    pca: PcaModel
    reduced: HsiCube
    seg: SuperpixelSegmentation
    graph: SuperpixelGraph
    key: str


@dataclass
class RunResult:
    report: EvalReport | None
    cmap: ClassificationMap
    prepared: Prepared
    params: MlpParams | None
    history: list[dict[str, float]]
    t_star: np.ndarray | None
    train: LabelMap
    test: LabelMap | None
    mode: str


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def prepare(cube: HsiCube, cfg: PipelineConfig, cache: StageCache | None = None) -> Prepared:
    cache = cache or StageCache(None)
    key = _hash_json(["pca", _hash_array(cube.data), cfg.variance_target])

    def _pca():
        hit = cache.load("pca", key)
        if hit is not None:
            scale = hit["scale"] if hit["scale"].size else None
            return PcaModel(hit["mean"], hit["components"], hit["explained_variance"],
                            float(hit["total_variance"]), scale)
        model = fit_pca(cube, cfg.variance_target)
        cache.store("pca", key, {
            "mean": model.mean, "components": model.components,
            "explained_variance": model.explained_variance,
            "total_variance": np.float64(model.total_variance),
            "scale": model.scale if model.scale is not None else np.zeros(0),
        })
        return model

    pca = _stage("preprocess", _pca)
    reduced = _stage("preprocess", apply_pca, pca, cube)

    key = _hash_json(["seg", key, asdict(cfg.slic)])

    def _seg():
        hit = cache.load("segment", key)
        if hit is not None:
            return SuperpixelSegmentation(hit["assignment"])
        seg = slic_segment(first_component_image(reduced), cfg.slic, seed=cfg.seed)
        cache.store("segment", key, {"assignment": seg.assignment})
        return seg

    seg = _stage("segment", _seg)

    key = _hash_json(["graph", key, asdict(cfg.graph)])

    def _graph():
        hit = cache.load("graph", key)
        if hit is not None:
            w = sparse.csr_matrix((hit["data"], hit["indices"], hit["indptr"]), shape=tuple(hit["shape"]))
            return SuperpixelGraph(w, hit["features"])
        feats = extract_features(reduced, seg)
        g = build_adjacency(feats, seg, cfg.graph)
        w = g.weights
        cache.store("graph", key, {"data": w.data, "indices": w.indices, "indptr": w.indptr,
                                   "shape": np.array(w.shape), "features": feats})
        return g

    graph = _stage("graph", _graph)
    return Prepared(pca, reduced, seg, graph, key)


def train_stage(prep: Prepared, train_labels: LabelMap, cfg: PipelineConfig, num_classes: int,
                weights: LossWeights, cache: StageCache | None = None) -> tuple[MlpParams, list[dict[str, float]]]:
    cache = cache or StageCache(None)
    tcfg = TrainConfig(weights=weights, n_iter=cfg.n_iter, seed=cfg.seed, hidden=tuple(cfg.hidden), lr=cfg.lr)
    key = _hash_json(["train", prep.key, _hash_labels(train_labels), num_classes,
                      asdict(weights), cfg.n_iter, cfg.seed, list(cfg.hidden), cfg.lr])

    def _train():
        hit = cache.load("train", key)
        if hit is not None:
            params = MlpParams({k: hit[k] for k in PARAM_KEYS}, tcfg.negative_slope, cfg.seed)
            cols = ["iter", "total", "pixel", "superpixel", "graph", "variance", "entropy"]
            history = [{c: (int(v) if c == "iter" else float(v)) for c, v in zip(cols, row)}
                       for row in hit["history"]]
            return params, history
        params, history = train(prep.reduced, prep.seg, prep.graph, train_labels, tcfg, num_classes)
        cols = ["iter", "total", "pixel", "superpixel", "graph", "variance", "entropy"]
        hist_arr = np.array([[row[c] for c in cols] for row in history], dtype=np.float64).reshape(-1, len(cols))
        cache.store("train", key, {**params.arrays, "history": hist_arr})
        return params, history

    return _stage("train", _train)


def pixel_map(params: MlpParams, reduced: HsiCube, train_labels: LabelMap | None = None) -> ClassificationMap:
    """Per-pixel NN argmax, no superpixel smoothing."""
    p = forward(params, reduced.pixels())
    labels = (np.argmax(p, axis=1) + 1).reshape(reduced.height, reduced.width)
    prov = np.zeros(labels.shape, dtype=np.uint8)
    if train_labels is not None:
        prov[train_labels.rows, train_labels.cols] = PROVENANCE_GROUND_TRUTH
    return ClassificationMap(labels, prov)


def classify(prep: Prepared, train_labels: LabelMap, cfg: PipelineConfig, num_classes: int,
             cache: StageCache | None = None):
    """Returns (map, params, history, T*) for the configured mode."""
    if cfg.mode == "labelprop-only":
        def _lp():
            t = label_matrix(train_labels, prep.seg, num_classes)
            t_star = propagate(prep.graph, t, cfg.alpha)
            return final_labels(t_star, prep.seg, train_labels), t_star
        cmap, t_star = _stage("propagate", _lp)
        return cmap, None, [], t_star

    weights = LossWeights() if cfg.mode == "mlp-only" else cfg.loss_weights
    params, history = train_stage(prep, train_labels, cfg, num_classes, weights, cache)

    if cfg.mode == "mlp-only":
        return _stage("classify", pixel_map, params, prep.reduced, train_labels), params, history, None

    def _augment():
        confident = confident_set(params, prep.reduced, cfg.tau)
        return label_matrix(merge_labels(train_labels, confident), prep.seg, num_classes)

    t_m = _stage("augment", _augment)
    t_star = _stage("propagate", propagate, prep.graph, t_m, cfg.alpha)
    cmap = _stage("classify", final_labels, t_star, prep.seg, train_labels)
    return cmap, params, history, t_star


def _exclude(test: LabelMap, train_labels: LabelMap) -> LabelMap:
    return test.subset(~np.isin(test.flat_index(), train_labels.flat_index()))


def run_arrays(cube: HsiCube, labels: LabelMap, cfg: PipelineConfig, test_labels: LabelMap | None = None,
               cache: StageCache | None = None, prepared: Prepared | None = None) -> RunResult:
    """Run the configured mode on in-memory data.

    Training labels come from ``labels`` (split first when cfg.split is set).
    The test set is the split remainder, or ``test_labels`` minus training
    pixels; with neither the report is None.
    """
    _stage("config", cfg.validate, cube.height * cube.width)
    c = cfg.num_classes or max(labels.num_classes, test_labels.num_classes if test_labels else 0)
    if cfg.split is not None:
        train_l, test_l = _stage("split", split_labels, labels, seed=cfg.seed, **cfg.split)
    else:
        train_l, test_l = labels, None
    if test_labels is not None:
        test_l = _exclude(test_labels, train_l)
    if len(train_l) == 0:
        raise StageError("split", ValueError("no training labels"))
    prep = prepared if prepared is not None else prepare(cube, cfg, cache)
    cmap, params, history, t_star = classify(prep, train_l, cfg, c, cache)
    report = _stage("eval", evaluate, cmap, test_l, c) if test_l is not None and len(test_l) else None
    return RunResult(report, cmap, prep, params, history, t_star, train_l, test_l, cfg.mode)


# ---------------------------------------------------------------------------
# file-driven runs


def resolve_output_dir(cfg: PipelineConfig, override: str | os.PathLike | None = None) -> Path:
    """override (e.g. a CLI flag), then $GRNN_OUTPUT_DIR, then the config."""
    if override is not None:
        return Path(override)
    return Path(os.environ.get(OUTPUT_DIR_ENV) or cfg.output_dir)


def report_dict(result: RunResult, cfg: PipelineConfig) -> dict[str, Any]:
    d = result.report.to_dict() if result.report is not None else {}
    d.update({"mode": cfg.mode, "seed": cfg.seed, "config_hash": cfg.config_hash(),
              "n_superpixels": result.prepared.seg.count, "n_components": result.prepared.pca.n_components,
              "n_train": len(result.train)})
    return d


def write_t_star(t_star: np.ndarray, path: str | os.PathLike) -> None:
    c = t_star.shape[1]
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("superpixel," + ",".join(f"class_{q}" for q in range(1, c + 1)) + "\n")
        for k, row in enumerate(t_star):
            f.write(f"{k}," + ",".join(repr(float(v)) for v in row) + "\n")


def load_inputs(cfg: PipelineConfig) -> tuple[HsiCube, LabelMap, LabelMap | None]:
    if not cfg.cube or not cfg.labels:
        raise StageError("load", ValueError("config needs both 'cube' and 'labels' paths"))
    cube = _stage("load", load_cube, cfg.cube)
    labels = _stage("load", load_labels, cfg.labels, cube.height, cube.width, cfg.num_classes)
    test = None
    if cfg.test_labels:
        test = _stage("load", load_labels, cfg.test_labels, cube.height, cube.width, cfg.num_classes)
    return cube, labels, test


def run_pipeline(cfg: PipelineConfig, threads: int | None = None,
                 output_dir: str | os.PathLike | None = None) -> tuple[RunResult, Path]:
    """Run from files and write artifacts to the output directory.

    Artifacts: map.ppm, map.json/.raw, boundaries.ppm, report.json, report.txt,
    loss_history.csv, model.json/.raw (when an NN is trained), t_star.csv
    (optional) and manifest.json.
    """
    with threadpool_limits(limits=threads):
        cube, labels, test = load_inputs(cfg)
        out = resolve_output_dir(cfg, output_dir)
        out.mkdir(parents=True, exist_ok=True)
        cache = StageCache(out / "cache" if cfg.cache else None)
        result = run_arrays(cube, labels, cfg, test, cache)

    def _write():
        c = cfg.num_classes or max(labels.num_classes, test.num_classes if test else 0)
        emit_map(result.cmap, default_palette(c), out / "map.ppm")
        save_classification(result.cmap, out / "map.json")
        emit_boundaries(result.prepared, out / "boundaries.ppm")
        rep = report_dict(result, cfg)
        (out / "report.json").write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
        text = result.report.to_text() if result.report is not None else "no test labels"
        (out / "report.txt").write_text(f"mode  = {cfg.mode}\n{text}\n")
        write_history(result.history, out / "loss_history.csv")
        if result.params is not None:
            save_checkpoint(result.params, out / "model.json")
        if cfg.dump_t_star and result.t_star is not None:
            write_t_star(result.t_star, out / "t_star.csv")
        write_manifest(cfg, out / "manifest.json", threads)

    _stage("emit", _write)
    return result, out


def emit_boundaries(prep: Prepared, path: str | os.PathLike) -> None:
    write_ppm(boundary_overlay(first_component_image(prep.reduced), prep.seg), path)


def write_manifest(cfg: PipelineConfig, path: str | os.PathLike, threads: int | None) -> None:
    inputs = {}
    for key in ("cube", "labels", "test_labels"):
        p = getattr(cfg, key)
        if p:
            entry = {"path": str(p), "sha256": file_sha256(p)}
            if key == "cube":
                raw = Path(p).parent / json.loads(Path(p).read_text()).get("data_file", Path(p).with_suffix(".raw").name)
                entry["raw_sha256"] = file_sha256(raw)
            inputs[key] = entry
    manifest = {
        "version": __version__,
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "threads": threads,
        "inputs": inputs,
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_manifest(path: str | os.PathLike, verify_inputs: bool = True) -> tuple[PipelineConfig, int | None]:
    manifest = json.loads(Path(path).read_text())
    cfg = PipelineConfig.from_dict(manifest["config"])
    if cfg.config_hash() != manifest["config_hash"]:
        raise ValueError("manifest config does not match its recorded hash")
    if verify_inputs:
        for key, entry in manifest.get("inputs", {}).items():
            if file_sha256(entry["path"]) != entry["sha256"]:
                raise ValueError(f"input {key} ({entry['path']}) changed since the manifest was written")
    return cfg, manifest.get("threads")


# ---------------------------------------------------------------------------
# trials


@dataclass
class TrialsSummary:
    oa: list[float]
    kappa: list[float]
    seeds: list[int]

    @staticmethod
    def _sd(v: list[float]) -> float:
        return float(np.std(v, ddof=1)) if len(v) > 1 else 0.0

    @property
    def oa_mean(self) -> float:
        return float(np.mean(self.oa))

    @property
    def oa_sd(self) -> float:
        return self._sd(self.oa)

    @property
    def kappa_mean(self) -> float:
        return float(np.mean(self.kappa))

    @property
    def kappa_sd(self) -> float:
        return self._sd(self.kappa)

    def to_dict(self) -> dict[str, Any]:
        return {"oa": self.oa, "kappa": self.kappa, "seeds": self.seeds,
                "oa_mean": self.oa_mean, "oa_sd": self.oa_sd,
                "kappa_mean": self.kappa_mean, "kappa_sd": self.kappa_sd}


def run_trials(cfg: PipelineConfig, n_trials: int, base_seed: int = 0, threads: int | None = None,
               data: tuple[HsiCube, LabelMap, LabelMap | None] | None = None) -> TrialsSummary:
    """Independent trials with seeds base_seed, base_seed+1, ...

    Each seed redraws the split (when configured) and the NN initialization.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    with threadpool_limits(limits=threads):
        cube, labels, test = data if data is not None else load_inputs(cfg)
        prep = None
        oa, kappa, seeds = [], [], []
        for i in range(n_trials):
            tcfg = copy.deepcopy(cfg)
            tcfg.seed = base_seed + i
            if prep is None:
                prep = prepare(cube, tcfg)
            res = run_arrays(cube, labels, tcfg, test, prepared=prep)
            if res.report is None:
                raise StageError("eval", ValueError("trials need a test set (split or test_labels)"))
            oa.append(res.report.oa)
            kappa.append(res.report.kappa)
            seeds.append(tcfg.seed)
    return TrialsSummary(oa, kappa, seeds)


def synth_trials(cfg: PipelineConfig, n_trials: int, base_seed: int = 0,
                 synth: SynthConfig | None = None, threads: int | None = None) -> tuple[TrialsSummary, list[RunResult]]:
    """One freshly generated synthetic scene per seed; trains on the sparse labels, tests on the rest."""
    synth = synth or SYNTH_PRESETS["desk"]
    results, oa, kappa, seeds = [], [], [], []
    with threadpool_limits(limits=threads):
        for i in range(n_trials):
            seed = base_seed + i
            scene = generate_scene(SynthConfig(**{**asdict(synth), "seed": seed}))
            tcfg = copy.deepcopy(cfg)
            tcfg.seed = seed
            tcfg.split = None
            res = run_arrays(scene.cube, scene.sparse, tcfg, scene.truth)
            results.append(res)
            oa.append(res.report.oa)
            kappa.append(res.report.kappa)
            seeds.append(seed)
    return TrialsSummary(oa, kappa, seeds), results
