#!/usr/bin/env python3
"""Command-line entry point: one subcommand per pipeline, artifacts under the run directory."""
import argparse
import json
import os
import sys

import numpy as np

import tensor_engine as te
from constants import ENVIRONMENT, HOST, PATCH_SIZE_GRID, PCA_COUNT_GRID, PORT
from exceptions import ConfigurationError, CvmError
from hsi_io import (
    CheckpointMeta, default_palette, load_palette, render_map,
    save_checkpoint, write_cube, write_labels,
)
from loaders import echo_config, load_resume, load_scene, load_trained, resolve_config, write_meta
from metrics import ablation_suite, evaluate_patches, predict_scene
from model import complexity_breakdown, count_flops, count_params, forward, init_params
from preprocess import extract_patches, pca_apply, pca_fit, split
from synthetic import make_synthetic
from training import cross_entropy, multi_run, train
from utils import setup_logging

logger = setup_logging()

SUBSETS = ("train", "val", "test", "all")


def emit(payload):
    print(json.dumps(payload, sort_keys=True))


def write_json(output_dir, name, payload):
    os.makedirs(output_dir, exist_ok=True)
    path = os.path.join(output_dir, name)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def class_names_of(labels):
    return list(labels.class_names) if labels.class_names is not None else None


def prepare_splits(config, seed=None, patch_size=None, pca_bands=None):
    """Scene -> PCA -> patches -> (train, val, test), as every training pipeline needs."""
    cube, labels, mask = load_scene(config)
    pca = pca_fit(cube, pca_bands or config.data["pca_bands"], config.data["pca_stride"])
    reduced = pca_apply(cube, pca)
    patch_set = extract_patches(reduced, labels, patch_size or config.data["patch_size"])
    splits = split(patch_set, config.split_spec(seed), mask)
    return labels, pca, reduced, splits


# ---------------------------------------------------------------- subcommands

def cmd_make_synthetic(args, config):
    settings = config.synthetic
    scene = make_synthetic(seed=config.seed, **settings)
    out = config.output_dir
    os.makedirs(out, exist_ok=True)
    paths = {
        "cube": os.path.join(out, "cube.hsi"),
        "labels": os.path.join(out, "labels.lbl"),
        "train_mask": os.path.join(out, "train_mask.lbl"),
        "palette": os.path.join(out, "palette.json"),
    }
    write_cube(scene.cube, paths["cube"])
    write_labels(scene.labels, paths["labels"])
    write_labels(scene.train_mask, paths["train_mask"])
    write_json(out, "palette.json", {str(k): list(v) for k, v in scene.palette.items()})
    emit({"command": "make-synthetic", **paths, "labeled": scene.labels.labeled_count})
    return 0


def cmd_pca_fit(args, config):
    cube, _, _ = load_scene(config)
    pca = pca_fit(cube, config.data["pca_bands"], config.data["pca_stride"])
    out = config.output_dir
    os.makedirs(out, exist_ok=True)
    save_checkpoint(pca.to_params(), CheckpointMeta(extra={"kind": "pca"}), os.path.join(out, "pca.ckpt"))
    ratios = pca.explained_variance_ratio()
    report = {
        "input_bands": pca.input_bands,
        "output_bands": pca.output_bands,
        "eigenvalues": pca.eigenvalues.tolist(),
        "explained_variance_ratio": ratios.tolist(),
        "cumulative_explained_variance": np.cumsum(ratios).tolist(),
    }
    write_json(out, "pca_report.json", report)
    emit({"command": "pca-fit", "output_bands": pca.output_bands,
          "explained_variance": float(ratios.sum())})
    return 0


def cmd_preprocess(args, config):
    labels, _, reduced, (train_set, val_set, test_set) = prepare_splits(config)
    out = config.output_dir
    write_cube(reduced, os.path.join(out, "reduced.hsi"))
    summary = {}
    for name, part in (("train", train_set), ("val", val_set), ("test", test_set)):
        ids, counts = np.unique(part.labels, return_counts=True)
        summary[name] = {"total": len(part), "per_class": {str(int(i)): int(c) for i, c in zip(ids, counts)}}
    write_json(out, "split_summary.json", summary)
    emit({"command": "preprocess", **{k: v["total"] for k, v in summary.items()}})
    return 0


def cmd_train(args, config):
    labels, pca, _, (train_set, val_set, test_set) = prepare_splits(config)
    model_config = config.model_config(labels.num_classes)
    out = config.output_dir
    params = state = None
    if args.resume:
        params, state, _ = load_resume(config, labels.num_classes)
    result = train(model_config, train_set, val_set, config.schedule(), params=params, output_dir=out,
                   extra_arrays=pca.to_params(), optimizer_state=state)
    evaluated = test_set if len(test_set) else val_set
    report = evaluate_patches(result.params, model_config, evaluated, config.eval["batch_size"], class_names_of(labels))
    report.config = config.to_dict()
    write_json(out, "eval_report.json", report.to_dict(include_runtime=False))
    write_meta(out, {"train_runtime": report.runtime})
    emit({"command": "train", "best_epoch": result.best_epoch, "best_val_oa": result.best_val_oa,
          "test_oa": report.oa, "test_aa": report.aa, "test_kappa": report.kappa})
    return 0


def cmd_evaluate(args, config):
    cube, labels, mask = load_scene(config)
    model_config, params, pca, _ = load_trained(config, labels.num_classes, args.checkpoint)
    patch_set = extract_patches(pca_apply(cube, pca), labels, model_config.patch_size)
    if args.subset == "all":
        chosen = patch_set
    else:
        chosen = dict(zip(("train", "val", "test"), split(patch_set, config.split_spec(), mask)))[args.subset]
    report = evaluate_patches(params, model_config, chosen, config.eval["batch_size"], class_names_of(labels))
    report.config = config.to_dict()
    write_json(config.output_dir, f"eval_{args.subset}.json", report.to_dict(include_runtime=False))
    write_meta(config.output_dir, {f"eval_{args.subset}_runtime": report.runtime})
    emit({"command": "evaluate", "subset": args.subset, "samples": len(chosen),
          "oa": report.oa, "aa": report.aa, "kappa": report.kappa})
    return 0


def cmd_predict_map(args, config):
    cube, labels, _ = load_scene(config)
    model_config, params, pca, _ = load_trained(config, labels.num_classes, args.checkpoint)
    prediction, report, timing = predict_scene(
        pca_apply(cube, pca), params, model_config,
        batch_size=config.eval["batch_size"],
        labels=labels,
        labeled_only=not config.eval["full_scene"],
        class_names=class_names_of(labels),
    )
    palette = load_palette(config.eval["palette"]) if config.eval["palette"] else default_palette(model_config.num_classes)
    out = config.output_dir
    with open(os.path.join(out, "prediction_map.ppm"), "wb") as f:
        f.write(render_map(prediction, palette))
    write_labels(prediction, os.path.join(out, "prediction.lbl"))
    if report is not None:
        write_json(out, "scene_report.json", report.to_dict(include_runtime=False))
    write_meta(out, {"predict_timing": timing})
    emit({"command": "predict-map", "pixels": timing["pixels"], "extract_s": timing["extract_s"],
          "forward_s": timing["forward_s"], "oa": report.oa if report else None})
    return 0


def gradcheck_model(model_config, samples=25, step=1e-6, seed=0):
    """Max relative gradient error of the full-model loss on a 2-sample float64 batch."""
    rng = np.random.default_rng(seed)
    s, b = model_config.patch_size, model_config.input_bands
    patches = rng.standard_normal((2, s, s, b))
    targets = rng.integers(1, model_config.num_classes + 1, size=2)
    params = init_params(model_config, seed=seed, dtype=np.float64)

    def loss(named):
        return cross_entropy(forward(patches, named, model_config, mode="eval"), targets)

    return te.gradcheck(loss, params, samples=samples, step=step, seed=seed)


def cmd_gradcheck(args, config):
    num_classes = config.model["num_classes"] or config.synthetic["num_classes"]
    error = gradcheck_model(config.model_config(num_classes), args.samples, args.step, config.seed)
    passed = error < args.tolerance
    emit({"command": "gradcheck", "max_rel_error": error, "passed": passed})
    return 0 if passed else 1


def cmd_params(args, config):
    num_classes = config.model["num_classes"]
    if num_classes is None and config.data["labels"]:
        _, labels, _ = load_scene(config)
        num_classes = labels.num_classes
    model_config = config.model_config(num_classes)
    flops, macs = count_flops(model_config)
    report = {
        "params": count_params(model_config),
        "flops": flops,
        "macs": macs,
        "stages": {k: {"flops": v[0], "macs": v[1]} for k, v in complexity_breakdown(model_config).items()},
        "patch_size": model_config.patch_size,
        "input_bands": model_config.input_bands,
        "num_classes": model_config.num_classes,
    }
    write_json(config.output_dir, "params_report.json", report)
    emit({"command": "params", "params": report["params"], "flops": flops, "macs": macs})
    return 0


def cmd_ablate(args, config):
    labels, _, _, splits = prepare_splits(config)
    table = ablation_suite(config.model_config(labels.num_classes), splits, config.schedule(),
                           config.run["seeds"], workers=config.run["workers"], output_dir=config.output_dir)
    write_json(config.output_dir, "ablation.json", table)
    emit({"command": "ablate", "rows": [{"variant": r["variant"], "toggles": r["toggles"],
                                         "params": r["params"], "oa": r["mean"]["oa"]} for r in table]})
    return 0


def cmd_multi_run(args, config):
    seeds = config.run["seeds"]
    if args.runs:
        seeds = [config.seed + i for i in range(args.runs)]
    labels, _, _, splits = prepare_splits(config)
    stats = multi_run(config.model_config(labels.num_classes), splits, config.schedule(), seeds,
                      workers=config.run["workers"], output_dir=config.output_dir,
                      class_names=class_names_of(labels))
    write_json(config.output_dir, "multi_run.json", stats.to_dict())
    emit({"command": "multi-run", "runs": len(seeds), "mean": stats.mean, "std": stats.std,
          "std_defined": stats.std_defined})
    return 0


def cmd_sweep(args, config):
    patch_sizes = config.run["patch_sizes"]
    pca_counts = config.run["pca_counts"]
    for s in patch_sizes:
        if s not in PATCH_SIZE_GRID:
            raise ConfigurationError(f"patch size {s} is not on the analysis grid {PATCH_SIZE_GRID}")
    for b in pca_counts:
        if b not in PCA_COUNT_GRID:
            raise ConfigurationError(f"PCA count {b} is not on the analysis grid {PCA_COUNT_GRID}")

    cells = []
    for s in patch_sizes:
        for b in pca_counts:
            labels, _, _, (train_set, val_set, test_set) = prepare_splits(config, patch_size=s, pca_bands=b)
            model_config = config.model_config(labels.num_classes)
            model_config.patch_size, model_config.input_bands = s, b
            model_config.validate()
            result = train(model_config, train_set, val_set, config.schedule(),
                           output_dir=os.path.join(config.output_dir, f"S{s}_B{b}"), run_id=f"S{s}_B{b}")
            report = evaluate_patches(result.params, model_config, test_set if len(test_set) else val_set)
            cells.append({"patch_size": s, "pca_bands": b, "oa": report.oa, "aa": report.aa, "kappa": report.kappa})
            logger.info(f"Sweep cell S={s} B={b}: OA {report.oa:.4f}")
    best = max(cells, key=lambda c: c["oa"])
    write_json(config.output_dir, "sweep.json", {"cells": cells, "best": best})
    emit({"command": "sweep", "cells": len(cells), "best": best})
    return 0


def cmd_serve(args, config):
    import uvicorn

    os.environ["SERVE_RUN_DIR"] = config.output_dir
    port = int(PORT)
    if ENVIRONMENT == "production":
        uvicorn.run("app:app", host=HOST, port=port, log_level="info", access_log=True)
    else:
        uvicorn.run("app:app", host=HOST, port=port, reload=True, log_level="debug")
    return 0


COMMANDS = {
    "make-synthetic": (cmd_make_synthetic, "Write a seeded synthetic cube, labels, train mask and palette"),
    "pca-fit": (cmd_pca_fit, "Fit PCA on the scene and report explained variance"),
    "preprocess": (cmd_preprocess, "Reduce the cube, extract patches and summarise the split"),
    "train": (cmd_train, "Train, keep the best-validation checkpoint and evaluate on test"),
    "evaluate": (cmd_evaluate, "Score a trained checkpoint on one split"),
    "predict-map": (cmd_predict_map, "Classify the scene and render a P6 map"),
    "gradcheck": (cmd_gradcheck, "Finite-difference check of the full-model loss gradient"),
    "params": (cmd_params, "Print parameter, FLOPs and MACs counts"),
    "ablate": (cmd_ablate, "Train the four component variants"),
    "multi-run": (cmd_multi_run, "Repeat training over seeds, report mean and std"),
    "sweep": (cmd_sweep, "Patch-size x PCA-count grid search"),
    "serve": (cmd_serve, "Serve predictions over HTTP"),
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON pipeline config")
    common.add_argument("--seed", type=int, help="Overrides run.seeds with a single seed")
    common.add_argument("--out", help="Run directory (run.output_dir)")
    common.add_argument("--workers", type=int, help="Worker pool size for multi-run and ablate")

    parser = argparse.ArgumentParser(prog="convvitmamba", description="Hyperspectral classification pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    parsers = {name: sub.add_parser(name, parents=[common], help=text) for name, (_, text) in COMMANDS.items()}

    for name in ("evaluate", "predict-map"):
        parsers[name].add_argument("--checkpoint", help="Defaults to <out>/best.ckpt")
    parsers["evaluate"].add_argument("--subset", choices=SUBSETS, default="test")
    parsers["train"].add_argument("--resume", action="store_true",
                                  help="Continue from <out>/best.ckpt, with its Adam state when saved")
    parsers["gradcheck"].add_argument("--samples", type=int, default=25)
    parsers["gradcheck"].add_argument("--step", type=float, default=1e-6)
    parsers["gradcheck"].add_argument("--tolerance", type=float, default=1e-3)
    parsers["multi-run"].add_argument("--runs", type=int, help="Use seeds seed..seed+runs-1")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        config = resolve_config(args.config, seed=args.seed, output_dir=args.out, workers=args.workers)
        echo_config(config, command=args.command)
        handler, _ = COMMANDS[args.command]
        return handler(args, config)
    except (CvmError, OSError) as e:
        logger.error(f"{args.command} failed: {type(e).__name__}: {e}")
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
