"""Patch generation loops.

Two modes: "baseline" optimizes one patch over the full accessible dataset
for a long epoch budget; "ipg" draws Poisson-sampled batches, runs a fixed
epoch budget per batch with the learning-rate schedule reset at every batch
boundary, keeps updating the same patch across batches, and snapshots it
once per batch.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .dataset import DatasetManifest, load_images
from .detector import ModelHandle, config_hash
from .objective import batch_attack_loss
from .patching import (Patch, TransformConfig, load_patch, random_noise_patch,
                       save_patch)
from .sampler import BatchSequence, SamplerConfig, poisson_sample

log = logging.getLogger(__name__)

RUN_MARKER = "run_complete.json"


@dataclass(frozen=True)
class GenerationConfig:
    mode: str = "ipg"  # "baseline" | "ipg"
    patch_size: int = 64
    epochs_per_batch: int = 200
    lr_start: float = 0.2
    lr_end: float = 0.001
    lr_step: int = 10  # epochs between step decays
    adam_betas: tuple = (0.9, 0.999)
    sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(n=64, d=32, T=5))
    transform: TransformConfig = field(default_factory=TransformConfig)
    seed: int = 0
    reset_optimizer_state: bool = False
    num_transform_samples: int = 1

    def __post_init__(self):
        if not (self.lr_start > self.lr_end > 0):
            raise ValueError("need lr_start > lr_end > 0")
        if self.epochs_per_batch < 0:
            raise ValueError("epochs_per_batch must be >= 0")
        if self.mode not in ("baseline", "ipg"):
            raise ValueError(f"unknown mode {self.mode!r}")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["sampler"] = dict(self.sampler.__dict__)
        d["transform"] = {
            "area_ratio_range": list(self.transform.area_ratio_range),
            "rotation_range": list(self.transform.rotation_range),
            "brightness_range": list(self.transform.brightness_range),
            "placement_policy": self.transform.placement_policy,
            "seed": self.transform.seed,
        }
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenerationConfig":
        d = dict(d)
        if "sampler" in d:
            d["sampler"] = SamplerConfig(**d["sampler"])
        if "transform" in d:
            t = d["transform"]
            d["transform"] = TransformConfig(
                area_ratio_range=tuple(t.get("area_ratio_range", (0.25, 0.30))),
                rotation_range=tuple(t.get("rotation_range", (-20, 20))),
                brightness_range=tuple(t.get("brightness_range", (0.8, 1.2))),
                placement_policy=t.get("placement_policy", "uniform"),
                seed=t.get("seed", 0))
        d["adam_betas"] = tuple(d.get("adam_betas", (0.9, 0.999)))
        return cls(**d)


@dataclass
class GenerationRun:
    patches: list  # ordered Patch snapshots
    wall_time_hours: float
    loss_curves: list  # [(batch_idx, epoch, loss, lr)]
    config: GenerationConfig
    batch_sequence: BatchSequence | None = None

    @property
    def config_hash(self) -> str:
        return config_hash(self.config.to_dict())


class GenerationDiverged(RuntimeError):
    """Non-finite loss during patch optimization; carries the last-good patch."""

    def __init__(self, batch_idx, epoch, last_good: Patch):
        super().__init__(f"non-finite loss at batch {batch_idx}, epoch {epoch}")
        self.last_good = last_good


def lr_for_epoch(epoch: int, total_epochs: int, lr_start: float, lr_end: float,
                 step: int = 10) -> float:
    """Step-decay schedule: decay every `step` epochs with the ratio chosen so
    the final epoch's rate equals lr_end. epoch is 1-based."""
    n_decays = max(1, (total_epochs - 1) // step)
    gamma = (lr_end / lr_start) ** (1.0 / n_decays)
    return lr_start * gamma ** ((epoch - 1) // step)


def _optimize_on(images, handle, patch_param, opt, cfg: GenerationConfig,
                 epochs: int, batch_idx: int, curves: list, snapshot_fn,
                 object_boxes=None):
    """Run `epochs` optimizer steps (one pass over `images` per epoch) with
    the per-batch learning-rate schedule. Mutates patch_param in place."""
    for epoch in range(1, epochs + 1):
        lr = lr_for_epoch(epoch, epochs, cfg.lr_start, cfg.lr_end, cfg.lr_step)
        for g in opt.param_groups:
            g["lr"] = lr
        step_seed = batch_idx * 1000003 + epoch
        try:
            report = batch_attack_loss(handle, images, patch_param, cfg.transform,
                                       seed=step_seed,
                                       num_transform_samples=cfg.num_transform_samples,
                                       object_boxes=object_boxes)
        except ValueError as exc:  # non-finite candidate scores
            raise GenerationDiverged(batch_idx, epoch, snapshot_fn(batch_idx)) from exc
        if not np.isfinite(report.value):
            raise GenerationDiverged(batch_idx, epoch, snapshot_fn(batch_idx))
        opt.zero_grad()
        report.tensor.backward()
        opt.step()
        with torch.no_grad():
            patch_param.clamp_(0.0, 1.0)
        curves.append((batch_idx, epoch, report.value, lr))


def _manifest_boxes(manifest: DatasetManifest, config: GenerationConfig):
    """Per-image object boxes, only materialized when the placement policy
    needs them (uniform placement ignores boxes)."""
    if config.transform.placement_policy != "boxes":
        return None
    return [manifest.boxes_for(i) for i in manifest.image_ids()]


def _make_snapshot(patch_param, cfg: GenerationConfig, method: str,
                   batch_idx: int, patch_id: str) -> Patch:
    pixels = patch_param.detach().permute(1, 2, 0).numpy().astype(np.float64)
    pixels = np.clip(pixels, 0.0, 1.0)
    return Patch(pixels=pixels, id=patch_id,
                 provenance={"method": method, "batch_index": batch_idx,
                             "epochs_per_batch": cfg.epochs_per_batch,
                             "seed": cfg.seed})


def generate_baseline(manifest: DatasetManifest, handle: ModelHandle,
                      config: GenerationConfig) -> GenerationRun:
    """Full-dataset single-patch optimization; returns a run with 1 patch."""
    if config.mode != "baseline":
        raise ValueError("config.mode must be 'baseline'")
    t0 = time.perf_counter()
    torch.manual_seed(config.seed)
    init = random_noise_patch(config.patch_size, config.seed)
    patch_param = init.to_tensor().clone().requires_grad_(True)
    opt = torch.optim.Adam([patch_param], lr=config.lr_start, betas=config.adam_betas)
    images = load_images(manifest)
    boxes = _manifest_boxes(manifest, config)

    curves = []
    snap = lambda b: _make_snapshot(patch_param, config, "baseline", b, "baseline_000")
    _optimize_on(images, handle, patch_param, opt, config,
                 config.epochs_per_batch, 0, curves, snap, object_boxes=boxes)
    wall = max(time.perf_counter() - t0, 1e-9) / 3600.0
    if config.epochs_per_batch == 0:
        patch = Patch(pixels=init.pixels, id="baseline_000",
                      provenance={"method": "baseline", "batch_index": 0,
                                  "epochs_per_batch": 0, "seed": config.seed})
    else:
        patch = snap(0)
    return GenerationRun(patches=[patch], wall_time_hours=wall,
                         loss_curves=curves, config=config)


def generate_ipg(manifest: DatasetManifest, handle: ModelHandle,
                 config: GenerationConfig) -> GenerationRun:
    """Incremental generation: one snapshot per Poisson batch, learning rate
    reset to lr_start at every batch, patch state carried across batches."""
    if config.mode != "ipg":
        raise ValueError("config.mode must be 'ipg'")
    if config.sampler.n != len(manifest):
        raise ValueError(
            f"sampler.n={config.sampler.n} does not match manifest size {len(manifest)}")
    t0 = time.perf_counter()
    torch.manual_seed(config.seed)
    init = random_noise_patch(config.patch_size, config.seed)
    patch_param = init.to_tensor().clone().requires_grad_(True)
    opt = torch.optim.Adam([patch_param], lr=config.lr_start, betas=config.adam_betas)

    seq = poisson_sample(config.sampler)
    all_images = load_images(manifest)
    all_boxes = _manifest_boxes(manifest, config)

    patches, curves = [], []
    for t, batch in enumerate(seq.batches, start=1):
        if config.reset_optimizer_state:
            opt = torch.optim.Adam([patch_param], lr=config.lr_start,
                                   betas=config.adam_betas)
        patch_id = f"ipg_{t - 1:03d}"
        if len(batch) == 0:
            log.warning("batch %d is empty; snapshotting unchanged patch", t)
            for epoch in range(1, config.epochs_per_batch + 1):
                curves.append((t, epoch, float("nan"),
                               lr_for_epoch(epoch, config.epochs_per_batch,
                                            config.lr_start, config.lr_end,
                                            config.lr_step)))
        else:
            images = all_images[[i - 1 for i in batch]]  # 1-based indices
            boxes = ([all_boxes[i - 1] for i in batch]
                     if all_boxes is not None else None)
            snap = lambda b, pid=patch_id: _make_snapshot(patch_param, config, "ipg", b, pid)
            _optimize_on(images, handle, patch_param, opt, config,
                         config.epochs_per_batch, t, curves, snap,
                         object_boxes=boxes)
        patches.append(_make_snapshot(patch_param, config, "ipg", t, patch_id))

    wall = max(time.perf_counter() - t0, 1e-9) / 3600.0
    return GenerationRun(patches=patches, wall_time_hours=wall,
                         loss_curves=curves, config=config,
                         batch_sequence=seq)


def compute_efficiency(run: GenerationRun) -> float:
    """Patches generated per hour of generation time."""
    if run.wall_time_hours <= 0:
        raise ValueError("wall_time_hours must be positive")
    return len(run.patches) / run.wall_time_hours


def save_run(run: GenerationRun, out_dir: str) -> None:
    """Persist a run directory: config.json, batches.json, patches/,
    loss_curves.csv, timing.json, and a completion marker (written last so
    partial directories are detectable)."""
    os.makedirs(out_dir, exist_ok=True)
    cfg = run.config.to_dict()
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump({"config": cfg, "config_hash": run.config_hash}, f, indent=2)
    if run.batch_sequence is not None:
        with open(os.path.join(out_dir, "batches.json"), "w") as f:
            f.write(run.batch_sequence.to_json())
    patch_dir = os.path.join(out_dir, "patches")
    os.makedirs(patch_dir, exist_ok=True)
    for i, p in enumerate(run.patches):
        save_patch(p, os.path.join(patch_dir, f"patch_{i:03d}"))
    with open(os.path.join(out_dir, "loss_curves.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["batch", "epoch", "loss", "lr"])
        for row in run.loss_curves:
            w.writerow(row)
    with open(os.path.join(out_dir, "timing.json"), "w") as f:
        json.dump({"wall_time_hours": run.wall_time_hours}, f)
    with open(os.path.join(out_dir, RUN_MARKER), "w") as f:
        json.dump({"complete": True, "config_hash": run.config_hash,
                   "num_patches": len(run.patches)}, f)


def is_complete_run(run_dir: str) -> bool:
    return os.path.exists(os.path.join(run_dir, RUN_MARKER))


def load_run(run_dir: str) -> GenerationRun:
    if not is_complete_run(run_dir):
        raise ValueError(f"{run_dir} is not a complete run directory")
    with open(os.path.join(run_dir, "config.json")) as f:
        cfg = GenerationConfig.from_dict(json.load(f)["config"])
    seq = None
    bpath = os.path.join(run_dir, "batches.json")
    if os.path.exists(bpath):
        with open(bpath) as f:
            seq = BatchSequence.from_json(f.read())
    patch_dir = os.path.join(run_dir, "patches")
    patches = []
    for name in sorted(os.listdir(patch_dir)):
        if name.endswith(".json"):
            patches.append(load_patch(os.path.join(patch_dir, name[:-5])))
    curves = []
    with open(os.path.join(run_dir, "loss_curves.csv")) as f:
        for row in list(csv.reader(f))[1:]:
            curves.append((int(row[0]), int(row[1]), float(row[2]), float(row[3])))
    with open(os.path.join(run_dir, "timing.json")) as f:
        wall = json.load(f)["wall_time_hours"]
    return GenerationRun(patches=patches, wall_time_hours=wall,
                         loss_curves=curves, config=cfg, batch_sequence=seq)
