"""Optimizable patch, random placement/appearance transforms, and the
differentiable compositing that pastes a patch onto images.

Images and patches are float tensors/arrays in [0, 1]. Images follow the
(3, H, W) torch layout inside the pipeline; patch pixels are stored (H, W, 3).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image


DEFAULT_PATCH_SIZE = 64


@dataclass
class Patch:
    """A learnable square RGB patch with provenance metadata."""

    pixels: np.ndarray  # (H, W, 3) float in [0, 1]
    id: str
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"patch pixels must be (H, W, 3), got {self.pixels.shape}")
        if self.pixels.shape[0] != self.pixels.shape[1]:
            raise ValueError("patch must be square")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValueError("patch pixels must lie in [0, 1]")

    @property
    def size(self) -> int:
        return self.pixels.shape[0]

    def to_tensor(self) -> torch.Tensor:
        """Patch as a (3, P, P) float32 tensor."""
        return torch.from_numpy(self.pixels.astype(np.float32)).permute(2, 0, 1)


def random_noise_patch(size: int = DEFAULT_PATCH_SIZE, seed: int = 0) -> Patch:
    """Uniform-noise initial patch, deterministic per seed."""
    if size <= 0:
        raise ValueError(f"size must be positive, got {size}")
    rng = np.random.default_rng(seed)
    pixels = rng.random((size, size, 3))
    return Patch(pixels=pixels, id=f"noise_s{size}_seed{seed}",
                 provenance={"method": "random_noise", "seed": seed, "size": size})


def save_patch(patch: Patch, path_base: str, store_float: bool = True) -> None:
    """Persist a patch as <path_base>.png (8-bit preview) plus <path_base>.json.

    With store_float the sidecar carries the exact float pixels so loading
    round-trips losslessly; otherwise the loader falls back to the PNG.
    """
    img = Image.fromarray((np.clip(patch.pixels, 0, 1) * 255.0).round().astype(np.uint8))
    img.save(path_base + ".png")
    sidecar = {
        "id": patch.id,
        "provenance": patch.provenance,
        "size": patch.size,
        "store_float": bool(store_float),
    }
    if store_float:
        sidecar["pixels"] = patch.pixels.ravel().tolist()
    with open(path_base + ".json", "w") as f:
        json.dump(sidecar, f)


def load_patch(path_base: str) -> Patch:
    with open(path_base + ".json") as f:
        sidecar = json.load(f)
    size = sidecar["size"]
    if sidecar.get("store_float") and "pixels" in sidecar:
        pixels = np.asarray(sidecar["pixels"], dtype=np.float64).reshape(size, size, 3)
    else:
        pixels = np.asarray(Image.open(path_base + ".png"), dtype=np.float64)[..., :3] / 255.0
    return Patch(pixels=pixels, id=sidecar["id"], provenance=sidecar.get("provenance", {}))


@dataclass(frozen=True)
class TransformConfig:
    """Sampling ranges for patch placement and appearance."""

    area_ratio_range: tuple = (0.25, 0.30)
    rotation_range: tuple = (-20.0, 20.0)
    brightness_range: tuple = (0.8, 1.2)
    placement_policy: str = "uniform"  # "uniform" | "boxes"
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.area_ratio_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError(f"bad area_ratio_range {self.area_ratio_range}")
        if self.rotation_range[0] > self.rotation_range[1]:
            raise ValueError("rotation_range must be ordered")
        blo, bhi = self.brightness_range
        if not (0.0 < blo <= bhi):
            raise ValueError("brightness_range must be positive and ordered")
        if self.placement_policy not in ("uniform", "boxes"):
            raise ValueError(f"unknown placement_policy {self.placement_policy!r}")


@dataclass(frozen=True)
class TransformSpec:
    """One sampled placement: normalized center, occupied area fraction,
    rotation in degrees (counterclockwise), and brightness multiplier."""

    center: tuple  # normalized (x, y) in [0, 1]
    area_ratio: float
    rotation: float = 0.0
    brightness_scale: float = 1.0

    def __post_init__(self):
        if self.area_ratio <= 0 or self.area_ratio > 1:
            raise ValueError(f"area_ratio must be in (0, 1], got {self.area_ratio}")
        if self.brightness_scale <= 0:
            raise ValueError("brightness_scale must be > 0")

    def footprint_side(self, image_shape) -> float:
        """Side length in pixels of the (unrotated) square footprint."""
        h, w = image_shape
        return math.sqrt(self.area_ratio * h * w)

    def validate(self, image_shape) -> None:
        """Raise if the rotated footprint is not fully inside the image."""
        h, w = image_shape
        s = self.footprint_side(image_shape)
        th = math.radians(self.rotation)
        ext = 0.5 * s * (abs(math.cos(th)) + abs(math.sin(th)))
        cx, cy = self.center[0] * w, self.center[1] * h
        eps = 1e-6
        if cx - ext < -eps or cx + ext > w + eps or cy - ext < -eps or cy + ext > h + eps:
            raise ValueError(
                f"patch footprint exceeds image bounds: center=({cx:.1f},{cy:.1f}), "
                f"half-extent={ext:.1f}, image={w}x{h}")

    def to_dict(self) -> dict:
        return {"center": list(self.center), "area_ratio": self.area_ratio,
                "rotation": self.rotation, "brightness_scale": self.brightness_scale}

    @classmethod
    def from_dict(cls, d) -> "TransformSpec":
        return cls(center=tuple(d["center"]), area_ratio=d["area_ratio"],
                   rotation=d["rotation"], brightness_scale=d["brightness_scale"])


def sample_transform(config: TransformConfig, image_shape, object_boxes=None,
                     call_index: int = 0, rng=None) -> TransformSpec:
    """Sample one TransformSpec. Deterministic given (config.seed, call_index)
    unless an explicit rng is supplied.

    object_boxes: list of (x1, y1, x2, y2) pixel boxes; required for the
    "boxes" placement policy, where the patch is placed over a random box:
    the center is drawn uniformly over the placements that maximize
    patch-object overlap (footprint covering the box when large enough,
    footprint inside the box otherwise), clamped into the image.
    """
    h, w = image_shape
    if h <= 0 or w <= 0:
        raise ValueError("image_shape must be positive")
    if rng is None:
        rng = np.random.default_rng([config.seed, call_index])

    area = rng.uniform(*config.area_ratio_range)
    rot = rng.uniform(*config.rotation_range)
    bright = rng.uniform(*config.brightness_range)

    s = math.sqrt(area * h * w)
    th = math.radians(rot)
    ext = 0.5 * s * (abs(math.cos(th)) + abs(math.sin(th)))
    if 2 * ext > min(h, w):
        raise ValueError("patch footprint cannot fit inside the image at this area_ratio")

    if config.placement_policy == "boxes":
        if not object_boxes:
            raise ValueError("placement_policy 'boxes' requires non-empty object_boxes")
        x1, y1, x2, y2 = object_boxes[rng.integers(len(object_boxes))]
        bcx, bcy = (x1 + x2) / 2, (y1 + y2) / 2
        dx = abs(ext - (x2 - x1) / 2)
        dy = abs(ext - (y2 - y1) / 2)
        cx = rng.uniform(bcx - dx, bcx + dx)
        cy = rng.uniform(bcy - dy, bcy + dy)
        cx = min(max(cx, ext), w - ext)
        cy = min(max(cy, ext), h - ext)
    else:
        cx = rng.uniform(ext, w - ext)
        cy = rng.uniform(ext, h - ext)

    return TransformSpec(center=(cx / w, cy / h), area_ratio=area,
                         rotation=rot, brightness_scale=bright)


def _affine_theta(spec: TransformSpec, image_shape, device, dtype):
    """2x3 affine mapping output-image normalized coords to patch normalized
    coords, for use with F.affine_grid."""
    h, w = image_shape
    s = spec.footprint_side(image_shape)
    th = math.radians(spec.rotation)
    c, sn = math.cos(th), math.sin(th)
    cxn = 2.0 * spec.center[0] - 1.0
    cyn = 2.0 * spec.center[1] - 1.0
    a00 = c * w / s
    a01 = sn * h / s
    a10 = -sn * w / s
    a11 = c * h / s
    theta = torch.tensor(
        [[a00, a01, -a00 * cxn - a01 * cyn],
         [a10, a11, -a10 * cxn - a11 * cyn]], device=device, dtype=dtype)
    return theta


def composite(image: torch.Tensor, patch: torch.Tensor, spec: TransformSpec):
    """Paste `patch` onto `image` under `spec`; returns (output, alpha).

    image: (3, H, W) or (B, 3, H, W); patch: (3, P, P), may require grad.
    Gradients flow through resize, rotation, and brightness scaling (bilinear
    warp). alpha is the warped coverage mask: exactly 0 outside the footprint,
    so non-footprint pixels come out bit-identical to the input.
    """
    squeeze = image.dim() == 3
    if squeeze:
        image = image.unsqueeze(0)
    b, _, h, w = image.shape
    spec.validate((h, w))

    bright = torch.clamp(patch * spec.brightness_scale, 0.0, 1.0)
    ones = torch.ones(1, patch.shape[1], patch.shape[2], device=patch.device, dtype=patch.dtype)
    src = torch.cat([bright, ones], dim=0).unsqueeze(0)

    theta = _affine_theta(spec, (h, w), image.device, image.dtype).unsqueeze(0)
    grid = F.affine_grid(theta, (1, 4, h, w), align_corners=False)
    warped = F.grid_sample(src, grid, mode="bilinear", padding_mode="zeros",
                           align_corners=False)
    rgb = warped[:, :3]
    alpha = warped[:, 3:4]
    # bilinear weights sum to alpha, so rgb <= alpha and the output stays in [0, 1]
    out = image * (1.0 - alpha) + rgb
    if squeeze:
        out = out.squeeze(0)
        alpha = alpha.squeeze(0)
    return out, alpha


def apply_patch(image: torch.Tensor, patch, spec: TransformSpec) -> torch.Tensor:
    """Composite a Patch (or (3, P, P) tensor) onto an image under `spec`."""
    if isinstance(patch, Patch):
        patch = patch.to_tensor().to(image.device, image.dtype)
    out, _ = composite(image, patch, spec)
    return out


def footprint_pixel_count(image_shape, spec: TransformSpec, device=None) -> int:
    """Number of image pixels majority-covered by the warped patch."""
    h, w = image_shape
    dummy = torch.zeros(3, 1, 1)
    theta = _affine_theta(spec, (h, w), dummy.device, torch.float32).unsqueeze(0)
    grid = F.affine_grid(theta, (1, 1, h, w), align_corners=False)
    ones = torch.ones(1, 1, 8, 8)
    alpha = F.grid_sample(ones, grid, mode="bilinear", padding_mode="zeros",
                          align_corners=False)
    return int((alpha > 0.5).sum().item())
