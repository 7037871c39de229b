"""Command-line entry point.

Subcommands: build-dataset, generate, evaluate, analyze, advtrain, report.
Configuration is a JSON file; flags override file values. Exit codes:
0 success, 1 usage/config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import importlib.util
import json
import os
import sys

import numpy as np
import torch

from . import advtrain as at
from . import dataset as ds
from . import detector as det
from . import evaluation as ev
from . import features as fa
from . import generator as gen
from .patching import TransformSpec


class ConfigError(Exception):
    pass


def load_config(path: str) -> dict:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON in {path}: {e}") from e


def _load_adapter_plugins():
    path = os.environ.get("PATCHLAB_ADAPTER_PATH")
    if not path:
        return
    spec = importlib.util.spec_from_file_location("patchlab_plugin", path)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)  # plugin registers adapters on import


def _require(cfg: dict, key: str):
    if key not in cfg:
        raise ConfigError(f"config missing required key {key!r}")
    return cfg[key]


def _load_manifest(path: str) -> ds.DatasetManifest:
    if not os.path.exists(path):
        raise ConfigError(f"manifest not found: {path}")
    return ds.DatasetManifest.load(path)


def _load_model(cfg: dict) -> det.ModelHandle:
    ckpt = _require(cfg, "checkpoint")
    if not os.path.exists(ckpt):
        raise ConfigError(f"checkpoint not found: {ckpt}")
    adapter = det.get_adapter(cfg.get("adapter", "reference"))
    return adapter.load(ckpt)


def cmd_build_dataset(args) -> int:
    cfg = load_config(args.config)
    dcfg = cfg.get("dataset", {})
    syn = ds.SyntheticConfig(
        num_images=dcfg.get("num_images", 100),
        image_size=dcfg.get("image_size", 128),
        min_objects=dcfg.get("min_objects", 1),
        max_objects=dcfg.get("max_objects", 3),
        seed=dcfg.get("seed", cfg.get("seed", 0)))
    manifest = ds.build_synthetic_dataset(syn, args.out, split=dcfg.get("split", "train"))
    print(f"built {len(manifest)} images, {len(manifest.annotations)} annotations -> {args.out}")
    if args.train_detector:
        hp = det.TrainHyperparams(**cfg.get("detector_train", {}))
        handle = det.train_reference_detector(manifest, hp)
        path = det.save_checkpoint(handle, args.out)
        print(f"trained reference detector -> {path}")
    return 0


def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    gcfg_dict = dict(_require(cfg, "generation"))
    if args.mode:
        gcfg_dict["mode"] = args.mode
    try:
        gcfg = gen.GenerationConfig.from_dict(gcfg_dict)
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"invalid generation config: {e}") from e
    manifest = _load_manifest(_require(cfg, "manifest"))
    handle = _load_model(cfg)
    if gcfg.mode == "baseline":
        run = gen.generate_baseline(manifest, handle, gcfg)
    else:
        run = gen.generate_ipg(manifest, handle, gcfg)
    gen.save_run(run, args.out)
    print(f"{len(run.patches)} patch(es) in {run.wall_time_hours:.4f} h -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    if not gen.is_complete_run(args.run):
        raise ConfigError(f"{args.run} is not a complete run directory")
    run = gen.load_run(args.run)
    if not run.patches:
        raise ConfigError(f"no patches found in {args.run}")
    expected_hash = cfg.get("config_hash")
    if expected_hash and expected_hash != run.config_hash and not args.force:
        raise ConfigError(
            f"config hash mismatch: run={run.config_hash}, expected={expected_hash} "
            "(use --force to override)")
    manifest = _load_manifest(_require(cfg, "test_manifest"))
    handle = _load_model(cfg)
    ecfg = cfg.get("evaluation", {})
    report = ev.build_eval_report(
        run.patches, handle, manifest, run.config.transform,
        config_hash=run.config_hash,
        efficiency=gen.compute_efficiency(run),
        confidence_threshold=ecfg.get("confidence_threshold", 0.25),
        iou_threshold=ecfg.get("iou_threshold", 0.5),
        seed=cfg.get("seed", 0))
    os.makedirs(args.out, exist_ok=True)
    ev.save_eval_report(report, os.path.join(args.out, "eval_report.json"),
                        os.path.join(args.out, "eval_report.csv"))
    print(f"mean ASR {report['aggregate']['mean_asr']:.3f}, "
          f"efficiency {report['efficiency']:.3f} patches/h -> {args.out}")
    return 0


def cmd_analyze(args) -> int:
    cfg = load_config(args.config)
    runs = []
    hashes = set()
    for run_dir in args.run:
        if not gen.is_complete_run(run_dir):
            raise ConfigError(f"{run_dir} is not a complete run directory")
        run = gen.load_run(run_dir)
        runs.append(run)
        hashes.add(run.config_hash)
    if len(hashes) > 1 and not args.force:
        raise ConfigError("runs have mixed config hashes (use --force to combine)")

    manifest = _load_manifest(_require(cfg, "test_manifest"))
    handle = _load_model(cfg)
    probe_ids = manifest.image_ids()[:args.probe_count]
    probes = [ds.load_image(manifest.image_path(i)) for i in probe_ids]
    acfg = cfg.get("analysis", {})
    fixed = TransformSpec(center=tuple(acfg.get("center", (0.5, 0.5))),
                          area_ratio=acfg.get("area_ratio", 0.27),
                          rotation=0.0, brightness_scale=1.0)
    patches = [p for run in runs for p in run.patches]
    feats = fa.collect_features(patches, handle, probes, fixed)
    os.makedirs(args.out, exist_ok=True)
    feats.save_csv(os.path.join(args.out, "features.csv"))
    k = min(acfg.get("pca_dim", 50), feats.vectors.shape[0] - 1, feats.vectors.shape[1])
    proj = fa.pca_project(feats, k)
    fa.dispersion(proj).save(os.path.join(args.out, "dispersion.json"))

    perplexity = acfg.get("perplexity", 30)
    if feats.vectors.shape[0] > 3 * perplexity:
        emb, _ = fa.tsne_embed(proj, perplexity=perplexity, seed=cfg.get("seed", 0))
    else:
        emb = proj.vectors[:, :2]  # too few rows for t-SNE; plot PCA plane
    fa.render_scatter(emb, proj.labels, os.path.join(args.out, "scatter.png"))
    print(f"analyzed {len(patches)} patch(es) x {len(probes)} probes -> {args.out}")
    return 0


def cmd_advtrain(args) -> int:
    cfg = load_config(args.config)
    if not gen.is_complete_run(args.patches):
        raise ConfigError(f"{args.patches} is not a complete run directory")
    run = gen.load_run(args.patches)
    base = _load_model(cfg)
    manifest = _load_manifest(_require(cfg, "manifest"))
    test_manifest = _load_manifest(_require(cfg, "test_manifest"))

    acfg = cfg.get("advtrain", {})
    spec = at.AdvDatasetSpec(
        patches=tuple(run.patches),
        images_per_patch=acfg.get("images_per_patch", 10),
        clean_fraction=acfg.get("clean_fraction", 0.5),
        transform=run.config.transform,
        seed=cfg.get("seed", 0))
    adv_dir = os.path.join(args.out, "adv_dataset")
    adv_manifest = at.build_adv_dataset(manifest, spec, adv_dir)

    hp = det.TrainHyperparams(**acfg.get("train", {}))
    model = at.adversarial_train(base, adv_manifest, hp,
                                 from_scratch=acfg.get("from_scratch", False))
    ckpt = det.save_checkpoint(model, args.out)

    report = at.seen_unseen_eval(model, run.patches, run.config, test_manifest,
                                 gen_manifest=manifest, seed=cfg.get("seed", 0))
    report.save(os.path.join(args.out, "robustness_report.json"))
    with open(os.path.join(args.out, "robustness_report.md"), "w") as f:
        f.write(report.to_markdown() + "\n")
    print(f"adversarially trained model -> {ckpt}")
    print(report.to_markdown())
    return 0


def cmd_report(args) -> int:
    lines = ["# patchlab run report", ""]
    for root, _, files in os.walk(args.run):
        for name in sorted(files):
            if name in ("eval_report.json", "robustness_report.json", "dispersion.json"):
                path = os.path.join(root, name)
                with open(path) as f:
                    content = json.load(f)
                lines.append(f"## {os.path.relpath(path, args.run)}")
                lines.append("```json")
                lines.append(json.dumps(content, indent=2, sort_keys=True))
                lines.append("```")
                lines.append("")
    out = args.out or os.path.join(args.run, "report.md")
    with open(out, "w") as f:
        f.write("\n".join(lines))
    print(f"report -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="patchlab",
                                description="adversarial patch toolkit")
    p.add_argument("--jobs", type=int, default=None,
                   help="cap torch worker threads")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build-dataset", help="render the synthetic shapes dataset")
    b.add_argument("--config", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--train-detector", action="store_true",
                   help="also train and checkpoint the reference detector")
    b.set_defaults(func=cmd_build_dataset)

    g = sub.add_parser("generate", help="optimize adversarial patches")
    g.add_argument("--mode", choices=["baseline", "ipg"], default=None)
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("evaluate", help="evaluate a generation run")
    e.add_argument("--run", required=True)
    e.add_argument("--config", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("analyze", help="feature-space generalization analysis")
    a.add_argument("--run", nargs="+", required=True)
    a.add_argument("--config", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--probe-count", type=int, default=10)
    a.add_argument("--force", action="store_true")
    a.set_defaults(func=cmd_analyze)

    t = sub.add_parser("advtrain", help="adversarial training + robustness eval")
    t.add_argument("--patches", required=True, help="generation run directory")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_advtrain)

    r = sub.add_parser("report", help="collect run reports into markdown")
    r.add_argument("--run", required=True)
    r.add_argument("--out", default=None)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.jobs:
        torch.set_num_threads(args.jobs)
    try:
        _load_adapter_plugins()
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
