"""Patched-image evaluation: runs patches over a test manifest and reports
ASR plus detection metrics per patch and in aggregate."""

from __future__ import annotations

import csv
import json

import numpy as np
import torch

from .dataset import DatasetManifest, load_image
from .detector import ModelHandle, detect
from .metrics import (AttackEvalResult, DetectionEvalResult, compute_asr,
                      compute_detection_metrics)
from .patching import Patch, TransformConfig, apply_patch, sample_transform

EVAL_REPORT_SCHEMA = {
    "type": "object",
    "required": ["per_patch", "aggregate", "config_hash"],
    "properties": {
        "config_hash": {"type": "string"},
        "efficiency": {"type": ["number", "null"]},
        "per_patch": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["asr", "map50", "map50_95", "mar50_95",
                             "precision", "recall", "f1"],
                "additionalProperties": {"type": "number"},
            },
        },
        "aggregate": {
            "type": "object",
            "required": ["mean_asr"],
            "additionalProperties": {"type": "number"},
        },
    },
}


def manifest_ground_truth(manifest: DatasetManifest) -> dict:
    """Normalized-coordinate ground truth keyed by image id."""
    gt = {}
    for im in manifest.images:
        w, h = im["width"], im["height"]
        entries = []
        for a in manifest.annotations_for(im["id"]):
            x, y, bw, bh = a["bbox"]
            entries.append({"box": (x / w, y / h, (x + bw) / w, (y + bh) / h),
                            "class_id": a["category_id"]})
        gt[im["id"]] = entries
    return gt


def run_detector(handle: ModelHandle, manifest: DatasetManifest,
                 patch: Patch | None = None,
                 transform_config: TransformConfig | None = None,
                 confidence_threshold: float = 0.25, iou_threshold: float = 0.5,
                 seed: int = 0) -> dict:
    """Detections per image, optionally with a patch composited under seeded
    transforms (one per image, keyed by (transform seed, seed, image index))."""
    dets = {}
    patch_t = patch.to_tensor() if patch is not None else None
    for j, iid in enumerate(manifest.image_ids()):
        img = load_image(manifest.image_path(iid))
        if patch_t is not None:
            rng = np.random.default_rng([transform_config.seed, seed, j])
            boxes = (manifest.boxes_for(iid)
                     if transform_config.placement_policy == "boxes" else None)
            spec = sample_transform(transform_config, img.shape[-2:],
                                    object_boxes=boxes, rng=rng)
            with torch.no_grad():
                img = apply_patch(img, patch_t, spec)
        found = detect(handle, img, confidence_threshold, iou_threshold)
        dets[iid] = [{"box": d.box, "class_id": d.class_id,
                      "confidence": d.confidence} for d in found]
    return dets


def evaluate_patch(patch: Patch | None, handle: ModelHandle,
                   manifest: DatasetManifest,
                   transform_config: TransformConfig | None = None,
                   confidence_threshold: float = 0.25,
                   iou_threshold: float = 0.5, seed: int = 0):
    """ASR and detection metrics for one patch (or the clean condition when
    patch is None)."""
    gt = manifest_ground_truth(manifest)
    dets = run_detector(handle, manifest, patch, transform_config,
                        confidence_threshold, iou_threshold, seed)
    attack = compute_asr(gt, dets, iou_threshold)
    detection = compute_detection_metrics(
        gt, dets, known_class_ids={c["id"] for c in manifest.categories})
    return attack, detection


def mean_asr(patches, handle: ModelHandle, test_manifest: DatasetManifest,
             transform_config: TransformConfig,
             confidence_threshold: float = 0.25, iou_threshold: float = 0.5,
             seed: int = 0) -> float:
    """Arithmetic mean ASR over a patch corpus on the test manifest."""
    if not patches:
        raise ValueError("need at least one patch")
    values = []
    for p in patches:
        attack, _ = evaluate_patch(p, handle, test_manifest, transform_config,
                                   confidence_threshold, iou_threshold, seed)
        values.append(attack.asr)
    return float(np.mean(values))


def build_eval_report(patches, handle: ModelHandle, manifest: DatasetManifest,
                      transform_config: TransformConfig, config_hash: str,
                      efficiency: float | None = None,
                      confidence_threshold: float = 0.25,
                      iou_threshold: float = 0.5, seed: int = 0) -> dict:
    per_patch = {}
    for p in patches:
        attack, detection = evaluate_patch(p, handle, manifest, transform_config,
                                           confidence_threshold, iou_threshold,
                                           seed)
        per_patch[p.id] = {"asr": attack.asr, **detection.to_dict()}
    keys = ["asr", "map50", "map50_95", "mar50_95", "precision", "recall", "f1"]
    aggregate = {f"mean_{k}": float(np.mean([v[k] for v in per_patch.values()]))
                 for k in keys}
    report = {"config_hash": config_hash, "per_patch": per_patch,
              "aggregate": aggregate, "efficiency": efficiency}
    return report


def save_eval_report(report: dict, json_path: str, csv_path: str | None = None) -> None:
    with open(json_path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    if csv_path:
        keys = ["asr", "map50", "map50_95", "mar50_95", "precision", "recall", "f1"]
        with open(csv_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["patch_id"] + keys)
            for pid, vals in sorted(report["per_patch"].items()):
                w.writerow([pid] + [vals[k] for k in keys])
