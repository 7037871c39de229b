"""COCO-format dataset manifests and a desk-scale synthetic shapes dataset.

The synthetic generator renders rectangles, circles, and triangles with random
colors on textured backgrounds so the whole pipeline can be exercised without
external data or weights.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image


SHAPE_CLASSES = ("rectangle", "circle", "triangle")


@dataclass
class DatasetManifest:
    """COCO-style manifest: image records, box annotations, categories."""

    images: list  # [{"id", "file_name", "width", "height"}]
    annotations: list  # [{"id", "image_id", "bbox": [x, y, w, h], "category_id"}]
    categories: list  # [{"id", "name"}]
    split: str = "train"
    source: str = "synthetic"
    root: str = "."
    patch_provenance: dict = field(default_factory=dict)  # image_id -> provenance

    def __len__(self):
        return len(self.images)

    def image_ids(self):
        return [im["id"] for im in self.images]

    def image_record(self, image_id):
        for im in self.images:
            if im["id"] == image_id:
                return im
        raise KeyError(image_id)

    def image_path(self, image_id) -> str:
        return os.path.join(self.root, self.image_record(image_id)["file_name"])

    def annotations_for(self, image_id):
        return [a for a in self.annotations if a["image_id"] == image_id]

    def boxes_for(self, image_id):
        """Object boxes of one image as pixel (x1, y1, x2, y2) tuples."""
        return [(a["bbox"][0], a["bbox"][1],
                 a["bbox"][0] + a["bbox"][2], a["bbox"][1] + a["bbox"][3])
                for a in self.annotations_for(image_id)]

    def validate(self) -> None:
        ids = set(self.image_ids())
        for a in self.annotations:
            if a["image_id"] not in ids:
                raise ValueError(f"annotation {a['id']} references missing image {a['image_id']}")
            im = self.image_record(a["image_id"])
            x, y, w, h = a["bbox"]
            if x < 0 or y < 0 or x + w > im["width"] or y + h > im["height"]:
                raise ValueError(f"annotation {a['id']} box out of image bounds")

    def to_dict(self) -> dict:
        d = {
            "images": self.images,
            "annotations": self.annotations,
            "categories": self.categories,
            "info": {"split": self.split, "source": self.source},
        }
        if self.patch_provenance:
            d["patch_provenance"] = {str(k): v for k, v in self.patch_provenance.items()}
        return d

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path: str, root: str | None = None) -> "DatasetManifest":
        with open(path) as f:
            d = json.load(f)
        info = d.get("info", {})
        prov = {int(k): v for k, v in d.get("patch_provenance", {}).items()}
        return cls(images=d["images"], annotations=d["annotations"],
                   categories=d["categories"], split=info.get("split", "train"),
                   source=info.get("source", "unknown"),
                   root=root if root is not None else os.path.dirname(os.path.abspath(path)),
                   patch_provenance=prov)


@dataclass(frozen=True)
class SyntheticConfig:
    num_images: int = 100
    image_size: int = 128
    classes: tuple = SHAPE_CLASSES
    min_objects: int = 1
    max_objects: int = 3
    min_size: int = 28
    max_size: int = 56
    seed: int = 0

    def __post_init__(self):
        if self.num_images <= 0:
            raise ValueError("num_images must be positive")
        if not self.classes:
            raise ValueError("need at least one class")
        if not (1 <= self.min_objects <= self.max_objects):
            raise ValueError("bad object count range")


def _shape_mask(kind: str, size: int) -> np.ndarray:
    """Boolean mask of a filled shape inside a size x size box."""
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "rectangle":
        return np.ones((size, size), dtype=bool)
    if kind == "circle":
        r = size / 2.0
        return (xx + 0.5 - r) ** 2 + (yy + 0.5 - r) ** 2 <= r * r
    if kind == "triangle":
        # upright isoceles triangle: apex top-center, base at the bottom
        half = size / 2.0
        frac = (yy + 0.5) / size
        return np.abs(xx + 0.5 - half) <= frac * half
    raise ValueError(f"unknown shape {kind!r}")


def _render_image(rng: np.random.Generator, cfg: SyntheticConfig):
    s = cfg.image_size
    # smooth low-frequency background texture
    coarse = rng.uniform(0.25, 0.75, size=(4, 4, 3))
    bg = np.array(Image.fromarray((coarse * 255).astype(np.uint8)).resize((s, s), Image.BILINEAR))
    img = bg.astype(np.float64) / 255.0

    n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    anns = []
    placed = []
    for _ in range(n_obj):
        kind = cfg.classes[int(rng.integers(len(cfg.classes)))]
        size = int(rng.integers(cfg.min_size, cfg.max_size + 1))
        # reject placements that occlude an earlier shape
        x = y = None
        for _try in range(20):
            tx = int(rng.integers(0, s - size + 1))
            ty = int(rng.integers(0, s - size + 1))
            ok = True
            for (px, py, ps) in placed:
                ix = max(0, min(tx + size, px + ps) - max(tx, px))
                iy = max(0, min(ty + size, py + ps) - max(ty, py))
                if ix * iy > 0.2 * min(size, ps) ** 2:
                    ok = False
                    break
            if ok:
                x, y = tx, ty
                break
        if x is None:
            continue
        placed.append((x, y, size))
        color = rng.uniform(0.0, 1.0, size=3)
        # keep shapes saturated so they stand off the mid-gray texture
        color = np.where(color > 0.5, 0.75 + 0.25 * color, 0.25 * color)
        mask = _shape_mask(kind, size)
        region = img[y:y + size, x:x + size]
        region[mask] = color
        ys, xs = np.nonzero(mask)
        bx, by = x + xs.min(), y + ys.min()
        bw, bh = xs.max() - xs.min() + 1, ys.max() - ys.min() + 1
        anns.append({"bbox": [int(bx), int(by), int(bw), int(bh)],
                     "category_id": cfg.classes.index(kind)})
    return img, anns


def build_synthetic_dataset(cfg: SyntheticConfig, out_dir: str,
                            split: str = "train") -> DatasetManifest:
    """Render a deterministic synthetic shapes dataset into out_dir and return
    its manifest (also written as annotations.json)."""
    os.makedirs(out_dir, exist_ok=True)
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)

    rng = np.random.default_rng(cfg.seed)
    images, annotations = [], []
    ann_id = 1
    for i in range(cfg.num_images):
        img, anns = _render_image(rng, cfg)
        fname = os.path.join("images", f"{split}_{i:05d}.png")
        Image.fromarray((img * 255).round().astype(np.uint8)).save(os.path.join(out_dir, fname))
        image_id = i + 1
        images.append({"id": image_id, "file_name": fname,
                       "width": cfg.image_size, "height": cfg.image_size})
        for a in anns:
            annotations.append({"id": ann_id, "image_id": image_id, **a})
            ann_id += 1

    manifest = DatasetManifest(
        images=images, annotations=annotations,
        categories=[{"id": i, "name": c} for i, c in enumerate(cfg.classes)],
        split=split, source="synthetic", root=out_dir)
    manifest.save(os.path.join(out_dir, "annotations.json"))
    return manifest


def load_image(path: str) -> torch.Tensor:
    """Load an image file as a (3, H, W) float32 tensor in [0, 1]."""
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1)


def load_images(manifest: DatasetManifest, image_ids=None) -> torch.Tensor:
    """Stack manifest images into a (B, 3, H, W) batch."""
    if image_ids is None:
        image_ids = manifest.image_ids()
    return torch.stack([load_image(manifest.image_path(i)) for i in image_ids])
