"""Command-line driver.

Each stage has its own subcommand reading and writing the on-disk formats, and
``run`` / ``trials`` drive the whole pipeline from a JSON config. Flags given on
the command line override values from the config file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .classifier import LossWeights, TrainConfig, load_checkpoint, save_checkpoint, train, write_history
from .core import (
    HsiCube,
    LabelMap,
    default_palette,
    emit_map,
    load_classification,
    load_cube,
    load_labels,
    load_segmentation,
    save_classification,
    save_cube,
    save_labels,
    save_segmentation,
    write_ppm,
)
from .graph import GraphConfig, build_adjacency, extract_features, read_graph, write_graph
from .labels import label_matrix
from .metrics import evaluate
from .pipeline import (
    MODES,
    PIPELINE_PRESETS,
    PipelineConfig,
    StageError,
    load_manifest,
    pixel_map,
    preset_config,
    run_pipeline,
    run_trials,
    synth_trials,
    write_t_star,
)
from .preprocess import apply_pca, first_component_image, fit_pca, save_pca
from .propagate import confident_set, final_labels, merge_labels, propagate
from .superpixel import SlicConfig, boundary_overlay, slic_segment
from .synth import SYNTH_PRESETS, SynthConfig, generate_scene

log = logging.getLogger("grnn")


# ---------------------------------------------------------------------------
# shared argument groups


def _add_graph_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("graph")
    g.add_argument("--graph-h", dest="graph_h", type=float, help="kernel bandwidth h")
    g.add_argument("--beta", type=float)
    g.add_argument("--sigma-s", type=float)
    g.add_argument("--sigma-l", type=float)
    g.add_argument("--xi", type=int, choices=(4, 8))
    g.add_argument("--n-s", type=int)


def _add_loss_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--lambda-spc", type=float)
    g.add_argument("--lambda-g", type=float)
    g.add_argument("--lambda-v", type=float)
    g.add_argument("--lambda-en", type=float)
    g.add_argument("--n-iter", type=int)
    g.add_argument("--hidden", type=int, nargs=2, metavar=("H1", "H2"))
    g.add_argument("--lr", type=float)
    g.add_argument("--seed", type=int)


def _add_slic_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("superpixels")
    g.add_argument("--n-superpixels", type=int)
    g.add_argument("--compactness", type=float)
    g.add_argument("--max-iters", type=int)


def _graph_config(args, base: GraphConfig | None = None) -> GraphConfig:
    cfg = base or GraphConfig()
    for name, attr in (("graph_h", "h"), ("beta", "beta"), ("sigma_s", "sigma_s"),
                       ("sigma_l", "sigma_l"), ("xi", "xi"), ("n_s", "n_s")):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg, attr, v)
    return cfg


def _loss_weights(args, base: LossWeights | None = None) -> LossWeights:
    w = base or LossWeights()
    for name in ("lambda_spc", "lambda_g", "lambda_v", "lambda_en"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(w, name, v)
    return w


def _slic_config(args, base: SlicConfig | None = None) -> SlicConfig:
    cfg = base or SlicConfig()
    for name in ("n_superpixels", "compactness", "max_iters"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg, name, v)
    return cfg


def _load_reduced(path: str) -> HsiCube:
    return load_cube(path)


def _labels_for(path: str, cube: HsiCube, num_classes: int | None) -> LabelMap:
    return load_labels(path, cube.height, cube.width, num_classes)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    base = SYNTH_PRESETS[args.preset]
    cfg = SynthConfig(**asdict(base))
    for f in fields(SynthConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            setattr(cfg, f.name, v)
    scene = generate_scene(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_cube(scene.cube, out / "cube.json")
    save_labels(scene.truth, out / "truth.csv")
    save_labels(scene.sparse, out / "sparse.csv")
    (out / "synth.json").write_text(json.dumps({**asdict(cfg), "noise_sigma_used": scene.noise_sigma}, indent=2) + "\n")
    print(f"wrote {out}/cube.json ({cfg.h}x{cfg.w}x{cfg.bands}), truth.csv ({len(scene.truth)} px), "
          f"sparse.csv ({len(scene.sparse)} px)")
    return 0


def cmd_preprocess(args) -> int:
    cube = load_cube(args.cube)
    model = fit_pca(cube, args.variance_target)
    save_pca(model, args.out)
    if args.reduced:
        save_cube(apply_pca(model, cube), args.reduced)
    ratio = model.explained_variance_ratio().sum()
    print(f"kept {model.n_components} of {model.n_bands} components ({ratio:.6f} of variance)")
    return 0


def cmd_segment(args) -> int:
    reduced = _load_reduced(args.cube)
    cfg = _slic_config(args)
    image = first_component_image(reduced)
    seg = slic_segment(image, cfg)
    save_segmentation(seg, args.out)
    if args.overlay:
        write_ppm(boundary_overlay(image, seg), args.overlay)
    print(f"{seg.count} superpixels (target {cfg.n_superpixels})")
    return 0


def cmd_graph(args) -> int:
    reduced = _load_reduced(args.cube)
    seg = load_segmentation(args.seg)
    g = build_adjacency(extract_features(reduced, seg), seg, _graph_config(args))
    write_graph(g, args.out)
    print(f"graph with {g.n} nodes and {g.weights.nnz // 2} edges")
    return 0


def cmd_train(args) -> int:
    reduced = _load_reduced(args.cube)
    seg = load_segmentation(args.seg)
    g = read_graph(args.graph)
    labels = _labels_for(args.labels, reduced, args.num_classes)
    hidden = tuple(args.hidden) if args.hidden else (256, 240)
    cfg = TrainConfig(weights=_loss_weights(args), n_iter=args.n_iter if args.n_iter is not None else 500,
                      seed=args.seed or 0, hidden=hidden, lr=args.lr or 1e-3)
    params, history = train(reduced, seg, g, labels, cfg, args.num_classes)
    save_checkpoint(params, args.out)
    if args.history:
        write_history(history, args.history)
    if history:
        print(f"final loss {history[-1]['total']:.6g} after {len(history)} iterations")
    return 0


def cmd_classify(args) -> int:
    reduced = _load_reduced(args.cube)
    seg = load_segmentation(args.seg)
    g = read_graph(args.graph)
    labels = _labels_for(args.labels, reduced, args.num_classes)
    c = args.num_classes or labels.num_classes
    if args.mode == "labelprop-only":
        t_m = label_matrix(labels, seg, c)
    else:
        if not args.model:
            raise ValueError(f"--model is required for mode {args.mode}")
        params = load_checkpoint(args.model)
        if args.mode == "mlp-only":
            _write_map(pixel_map(params, reduced, labels), c, args)
            return 0
        t_m = label_matrix(merge_labels(labels, confident_set(params, reduced, args.tau)), seg, c)
    t_star = propagate(g, t_m, args.alpha)
    cmap = final_labels(t_star, seg, labels)
    if args.t_star:
        write_t_star(t_star, args.t_star)
    _write_map(cmap, c, args)
    return 0


def _write_map(cmap, c: int, args) -> None:
    save_classification(cmap, args.out)
    if args.ppm:
        emit_map(cmap, default_palette(c), args.ppm)
    print(f"wrote {args.out}")


def cmd_eval(args) -> int:
    cmap = load_classification(args.map)
    h, w = cmap.shape
    truth = load_labels(args.truth, h, w, args.num_classes)
    if args.exclude:
        train_l = load_labels(args.exclude, h, w, args.num_classes)
        truth = truth.subset(~np.isin(truth.flat_index(), train_l.flat_index()))
    report = evaluate(cmap, truth, args.num_classes)
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n")
    print(report.to_text())
    return 0


# ---------------------------------------------------------------------------
# full pipeline


def _pipeline_config(args) -> tuple[PipelineConfig, int | None]:
    threads = args.threads
    if getattr(args, "manifest", None):
        cfg, recorded = load_manifest(args.manifest)
        if threads is None:
            threads = recorded
    else:
        cfg = preset_config(args.preset) if args.preset else PipelineConfig()
        if args.config:
            cfg = PipelineConfig.from_dict(json.loads(Path(args.config).read_text()), base=cfg)
    for name in ("cube", "labels", "test_labels", "num_classes", "variance_target", "n_iter", "lr",
                 "tau", "alpha", "seed", "mode"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg, name, v)
    if args.hidden:
        cfg.hidden = tuple(args.hidden)
    if args.train_fraction is not None:
        cfg.split = {"train_fraction": args.train_fraction}
    if args.per_class_count is not None:
        cfg.split = {"per_class_count": args.per_class_count}
    if args.dump_t_star:
        cfg.dump_t_star = True
    if args.no_cache:
        cfg.cache = False
    cfg.slic = _slic_config(args, cfg.slic)
    cfg.graph = _graph_config(args, cfg.graph)
    cfg.loss_weights = _loss_weights(args, cfg.loss_weights)
    cfg.validate()
    return cfg, threads


def cmd_run(args) -> int:
    cfg, threads = _pipeline_config(args)
    result, out = run_pipeline(cfg, threads, args.output)
    if result.report is not None:
        print(f"mode={cfg.mode} OA={result.report.oa:.4f} kappa={result.report.kappa:.4f} "
              f"(n={result.report.n_test})")
    print(f"artifacts in {out}")
    return 0


def cmd_trials(args) -> int:
    cfg, threads = _pipeline_config(args)
    if args.synth:
        summary, _ = synth_trials(cfg, args.n_trials, args.base_seed, SYNTH_PRESETS[args.synth], threads)
    else:
        summary = run_trials(cfg, args.n_trials, args.base_seed, threads)
    d = {"mode": cfg.mode, "config_hash": cfg.config_hash(), **summary.to_dict()}
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(d, indent=2) + "\n")
    print(f"mode={cfg.mode} trials={len(summary.oa)} OA={summary.oa_mean:.4f} ± {summary.oa_sd:.4f} "
          f"kappa={summary.kappa_mean:.4f} ± {summary.kappa_sd:.4f}")
    return 0


def _add_pipeline_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--preset", choices=sorted(PIPELINE_PRESETS), help="base preset (before --config)")
    p.add_argument("--cube")
    p.add_argument("--labels")
    p.add_argument("--test-labels")
    p.add_argument("--output", help="output directory (overrides $GRNN_OUTPUT_DIR and the config)")
    p.add_argument("--num-classes", type=int)
    p.add_argument("--variance-target", type=float)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--tau", type=float)
    p.add_argument("--alpha", type=float)
    split = p.add_mutually_exclusive_group()
    split.add_argument("--train-fraction", type=float)
    split.add_argument("--per-class-count", type=int)
    p.add_argument("--dump-t-star", action="store_true")
    p.add_argument("--no-cache", action="store_true")
    p.add_argument("--threads", type=int, help="BLAS thread count; 1 gives bitwise-reproducible runs")
    _add_slic_args(p)
    _add_graph_args(p)
    _add_loss_args(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="grnn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"grnn {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic crown scene")
    p.add_argument("--preset", default="desk", choices=sorted(SYNTH_PRESETS))
    p.add_argument("--out", required=True, help="output directory")
    for f in fields(SynthConfig):
        if f.name in ("max_retries",):
            continue
        typ = float if f.name in ("noise_sigma", "snr_db", "spectral_separation", "class_contrast",
                                  "crown_variability", "label_fraction") else int
        p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=typ)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="fit PCA and write the reduced cube")
    p.add_argument("--cube", required=True)
    p.add_argument("--out", required=True, help="PCA model header (.json)")
    p.add_argument("--reduced", help="write the reduced cube here")
    p.add_argument("--variance-target", type=float, default=0.999)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("segment", help="SLIC superpixels on the first principal component")
    p.add_argument("--cube", required=True, help="reduced cube")
    p.add_argument("--out", required=True, help="segmentation header (.json)")
    p.add_argument("--overlay", help="boundary overlay PPM")
    _add_slic_args(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("graph", help="build the superpixel graph")
    p.add_argument("--cube", required=True, help="reduced cube")
    p.add_argument("--seg", required=True)
    p.add_argument("--out", required=True, help="edge list CSV")
    _add_graph_args(p)
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("train", help="train the pixel classifier")
    p.add_argument("--cube", required=True, help="reduced cube")
    p.add_argument("--seg", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--num-classes", type=int)
    p.add_argument("--out", required=True, help="checkpoint header (.json)")
    p.add_argument("--history", help="loss history CSV")
    _add_loss_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("classify", help="augment, propagate and label")
    p.add_argument("--cube", required=True, help="reduced cube")
    p.add_argument("--seg", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--model")
    p.add_argument("--num-classes", type=int)
    p.add_argument("--mode", choices=MODES, default="grnn")
    p.add_argument("--tau", type=float, default=0.4)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--out", required=True, help="classification map header (.json)")
    p.add_argument("--ppm")
    p.add_argument("--t-star", help="dump T* as CSV")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("eval", help="score a classification map")
    p.add_argument("--map", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--exclude", help="labels to drop from the truth set (e.g. training pixels)")
    p.add_argument("--num-classes", type=int)
    p.add_argument("--out", help="report JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run", help="full pipeline from a config")
    p.add_argument("--manifest", help="replay a manifest.json written by an earlier run")
    _add_pipeline_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("trials", help="repeat the pipeline over seeds and report mean and SD")
    p.add_argument("--n-trials", type=int, default=10)
    p.add_argument("--base-seed", type=int, default=0)
    p.add_argument("--synth", choices=sorted(SYNTH_PRESETS), help="generate a fresh synthetic scene per seed")
    p.add_argument("--out", help="summary JSON")
    _add_pipeline_args(p)
    p.set_defaults(func=cmd_trials)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = getattr(args, "threads", None)
    try:
        if args.command in ("run", "trials"):
            return args.func(args)
        with threadpool_limits(limits=threads):
            return args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
