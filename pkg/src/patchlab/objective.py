"""Hiding-attack objective: suppress the strongest detection by minimizing
max(class_score x objectness), in expectation over images, placements, and
appearance transforms (Monte Carlo, one sampled transform per image per step
by default)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .detector import DetectionCandidates, ModelHandle, forward_raw
from .patching import TransformConfig, composite, sample_transform


@dataclass
class LossReport:
    """Batch loss summary; value is the mean of per_image_values."""

    value: float
    per_image_values: list
    batch_size: int
    tensor: torch.Tensor | None = field(default=None, repr=False, compare=False)

    def to_dict(self):
        return {"value": self.value, "per_image_values": self.per_image_values,
                "batch_size": self.batch_size}


def hiding_loss(candidates: DetectionCandidates) -> torch.Tensor:
    """max over candidates of (best class score x objectness); 0 when empty.

    Differentiable w.r.t. the score tensors. Argmax ties break to the lowest
    candidate index, then the lowest class index (numpy argmax order).
    """
    if candidates.boxes.shape[0] == 0:
        return torch.zeros((), dtype=torch.float32)
    if not (torch.isfinite(candidates.objectness).all()
            and torch.isfinite(candidates.class_scores).all()):
        raise ValueError("non-finite candidate scores")
    cls = candidates.class_scores
    cls_idx = np.argmax(cls.detach().cpu().numpy(), axis=1)
    rows = torch.arange(cls.shape[0])
    best_cls = cls[rows, torch.from_numpy(cls_idx)]
    per_cand = best_cls * candidates.objectness
    top = int(np.argmax(per_cand.detach().cpu().numpy()))
    return per_cand[top]


def batch_attack_loss(handle: ModelHandle, images: torch.Tensor,
                      patch: torch.Tensor, transform_config: TransformConfig,
                      seed: int, num_transform_samples: int = 1,
                      object_boxes=None) -> LossReport:
    """Composite the patch onto each image under a seeded random transform,
    run the detector, and average the per-image hiding losses.

    images: (B, 3, S, S); patch: (3, P, P), may require grad. object_boxes,
    when given, is one pixel-box list per image and enables the "boxes"
    placement policy (patch centered on a random object). Deterministic
    given seed: image j at sample k uses rng key (transform seed, seed, j, k).
    The report's `tensor` field carries the differentiable mean loss.
    """
    if images.dim() == 3:
        images = images.unsqueeze(0)
    b = images.shape[0]
    h, w = images.shape[-2:]
    if object_boxes is not None and len(object_boxes) != b:
        raise ValueError("object_boxes must align with the image batch")

    patched = []
    for k in range(num_transform_samples):
        for j in range(b):
            rng = np.random.default_rng([transform_config.seed, seed, j, k])
            spec = sample_transform(
                transform_config, (h, w),
                object_boxes=object_boxes[j] if object_boxes is not None else None,
                rng=rng)
            out, _ = composite(images[j], patch, spec)
            patched.append(out)
    batch = torch.stack(patched)

    try:
        cands = forward_raw(handle, batch)
    except Exception as e:
        raise RuntimeError(f"detector failure on attack batch of {b} images: {e}") from e

    per_sample = [hiding_loss(c) for c in cands]
    # average transform samples per image, then images
    per_image = []
    for j in range(b):
        vals = [per_sample[k * b + j] for k in range(num_transform_samples)]
        per_image.append(torch.stack(vals).mean())
    mean = torch.stack(per_image).mean()
    return LossReport(value=float(mean.detach()),
                      per_image_values=[float(v.detach()) for v in per_image],
                      batch_size=b, tensor=mean)
