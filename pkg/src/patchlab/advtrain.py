"""Adversarial training: build patched training datasets (50/50 clean mix by
default), fine-tune the detector on them, and evaluate clean accuracy,
random-noise robustness, and seen/unseen patch robustness."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image

from .dataset import DatasetManifest, load_image
from .detector import ModelHandle, TrainHyperparams, train_reference_detector
from .evaluation import evaluate_patch, mean_asr
from .generator import GenerationConfig, generate_ipg
from .patching import (Patch, TransformConfig, apply_patch, random_noise_patch,
                       sample_transform)


@dataclass(frozen=True)
class AdvDatasetSpec:
    patches: tuple  # Patch objects
    images_per_patch: int
    clean_fraction: float = 0.5
    transform: TransformConfig = field(default_factory=TransformConfig)
    seed: int = 0

    def __post_init__(self):
        if self.images_per_patch < 1:
            raise ValueError("images_per_patch must be >= 1")
        if not (0.0 <= self.clean_fraction <= 1.0):
            raise ValueError("clean_fraction must be in [0, 1]")


@dataclass
class RobustnessReport:
    """Per-condition detection metrics and ASR for conditions clean,
    random_noise, seen_patch, unseen_patch."""

    conditions: dict  # condition -> {"map50", "map50_95", "mar50_95", "asr"}

    def to_dict(self):
        return self.conditions

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.conditions, f, indent=2, sort_keys=True)

    def to_markdown(self) -> str:
        cols = ["map50", "map50_95", "mar50_95", "asr"]
        lines = ["| condition | " + " | ".join(cols) + " |",
                 "|---|" + "---|" * len(cols)]
        for cond in ["clean", "random_noise", "seen_patch", "unseen_patch"]:
            if cond not in self.conditions:
                continue
            vals = self.conditions[cond]
            lines.append("| " + cond + " | " +
                         " | ".join(f"{vals.get(c, float('nan')):.3f}" for c in cols) + " |")
        return "\n".join(lines)


def build_adv_dataset(manifest: DatasetManifest, spec: AdvDatasetSpec,
                      out_dir: str) -> DatasetManifest:
    """Materialize an adversarial training set: per patch, sample source
    images, composite the patch under seeded transforms, keep annotations
    unchanged, and mix in clean images at the configured fraction. Every
    patched image records its patch id, transform, and source image id."""
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    source_ids = manifest.image_ids()

    images, annotations, provenance = [], [], {}
    next_img, next_ann = 1, 1

    def add_entry(arr, anns, fname, width, height, prov=None):
        nonlocal next_img, next_ann
        Image.fromarray((np.clip(arr, 0, 1) * 255).round().astype(np.uint8)).save(
            os.path.join(out_dir, fname))
        images.append({"id": next_img, "file_name": fname,
                       "width": width, "height": height})
        for a in anns:
            annotations.append({"id": next_ann, "image_id": next_img,
                                "bbox": list(a["bbox"]),
                                "category_id": a["category_id"]})
            next_ann += 1
        if prov is not None:
            provenance[next_img] = prov
        next_img += 1

    if spec.clean_fraction < 1.0:
        for patch in spec.patches:
            pt = patch.to_tensor()
            chosen = rng.choice(source_ids, size=spec.images_per_patch,
                                replace=len(source_ids) < spec.images_per_patch)
            for j, src_id in enumerate(chosen):
                src_id = int(src_id)
                rec = manifest.image_record(src_id)
                img = load_image(manifest.image_path(src_id))
                patch_key = int.from_bytes(
                    hashlib.sha256(patch.id.encode()).digest()[:4], "big")
                t_rng = np.random.default_rng([spec.transform.seed, spec.seed, j,
                                               patch_key])
                src_boxes = (manifest.boxes_for(src_id)
                             if spec.transform.placement_policy == "boxes" else None)
                tspec = sample_transform(spec.transform, img.shape[-2:],
                                         object_boxes=src_boxes, rng=t_rng)
                with torch.no_grad():
                    patched = apply_patch(img, pt, tspec)
                arr = patched.permute(1, 2, 0).numpy()
                fname = os.path.join("images", f"adv_{next_img:05d}.png")
                add_entry(arr, manifest.annotations_for(src_id), fname,
                          rec["width"], rec["height"],
                          prov={"patch_id": patch.id, "transform": tspec.to_dict(),
                                "source_image_id": src_id})

    n_adv = next_img - 1
    if spec.clean_fraction >= 1.0:
        n_clean = len(source_ids)
    elif spec.clean_fraction <= 0.0:
        n_clean = 0
    else:
        n_clean = round(n_adv * spec.clean_fraction / (1.0 - spec.clean_fraction))
    clean_ids = rng.choice(source_ids, size=n_clean,
                           replace=len(source_ids) < n_clean)
    for src_id in clean_ids:
        src_id = int(src_id)
        rec = manifest.image_record(src_id)
        img = load_image(manifest.image_path(src_id)).permute(1, 2, 0).numpy()
        fname = os.path.join("images", f"clean_{next_img:05d}.png")
        add_entry(img, manifest.annotations_for(src_id), fname,
                  rec["width"], rec["height"])

    out = DatasetManifest(images=images, annotations=annotations,
                          categories=list(manifest.categories),
                          split="adv_train", source="adversarial_mix",
                          root=out_dir, patch_provenance=provenance)
    out.save(os.path.join(out_dir, "annotations.json"))
    return out


def adversarial_train(base: ModelHandle | None, adv_manifest: DatasetManifest,
                      hp: TrainHyperparams = TrainHyperparams(),
                      from_scratch: bool = False) -> ModelHandle:
    """Train the detector on the mixed adversarial dataset. Fine-tunes from
    `base` unless from_scratch is set."""
    return train_reference_detector(adv_manifest, hp,
                                    base=None if from_scratch else base,
                                    handle_id=(base.id if base else "reference") + "_at")


def random_noise_robustness(handle: ModelHandle, test_manifest: DatasetManifest,
                            transform_config: TransformConfig, seed: int = 0,
                            patch_size: int = 64,
                            confidence_threshold: float = 0.25,
                            iou_threshold: float = 0.5) -> dict:
    """Metrics when a uniform-noise patch runs through the same placement
    pipeline as adversarial patches."""
    noise = random_noise_patch(patch_size, seed)
    attack, detection = evaluate_patch(noise, handle, test_manifest,
                                       transform_config, confidence_threshold,
                                       iou_threshold, seed)
    return {"asr": attack.asr, **detection.to_dict()}


def _condition_metrics(patch, handle, manifest, transform_config, seed=0):
    attack, detection = evaluate_patch(patch, handle, manifest,
                                       transform_config, seed=seed)
    return {"asr": attack.asr, **detection.to_dict()}


def seen_unseen_eval(at_model: ModelHandle, seen_patches,
                     generator_config: GenerationConfig,
                     test_manifest: DatasetManifest,
                     gen_manifest: DatasetManifest,
                     transform_config: TransformConfig | None = None,
                     seed: int = 0) -> RobustnessReport:
    """Full robustness evaluation of an adversarially trained model:
    clean, random-noise, seen patches (used during training), and unseen
    patches freshly generated white-box against the trained model."""
    if transform_config is None:
        transform_config = generator_config.transform

    clean_attack, clean_det = evaluate_patch(None, at_model, test_manifest,
                                             transform_config, seed=seed)
    conditions = {"clean": {"asr": clean_attack.asr, **clean_det.to_dict()}}

    conditions["random_noise"] = random_noise_robustness(
        at_model, test_manifest, transform_config, seed=seed,
        patch_size=generator_config.patch_size)

    seen_vals = [_condition_metrics(p, at_model, test_manifest,
                                    transform_config, seed=seed)
                 for p in seen_patches]
    conditions["seen_patch"] = {
        k: float(np.mean([v[k] for v in seen_vals])) for k in seen_vals[0]}

    fresh = generate_ipg(gen_manifest, at_model, generator_config)
    unseen_vals = [_condition_metrics(p, at_model, test_manifest,
                                      transform_config, seed=seed)
                   for p in fresh.patches]
    conditions["unseen_patch"] = {
        k: float(np.mean([v[k] for v in unseen_vals])) for k in unseen_vals[0]}

    return RobustnessReport(conditions=conditions)
