"""Target-detector abstraction: a differentiable raw-output interface, a small
single-stage reference detector trainable in minutes, decode + NMS, and a
backbone feature tap for patch generalization analysis.

Adapters must expose raw pre-suppression candidates (boxes, objectness, class
scores) so the attack objective can differentiate through them; adapters that
only provide final detections are rejected at registration.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataset import DatasetManifest, load_image
from .metrics import iou_xyxy


@dataclass
class DetectionCandidates:
    """Raw pre-suppression head output for one image.

    boxes: (M, 4) normalized (cx, cy, w, h); objectness: (M,) in [0, 1];
    class_scores: (M, C) in [0, 1]. All torch tensors, grad-capable.
    """

    boxes: torch.Tensor
    objectness: torch.Tensor
    class_scores: torch.Tensor

    def __post_init__(self):
        m = self.boxes.shape[0]
        if self.objectness.shape[0] != m or self.class_scores.shape[0] != m:
            raise ValueError("candidate field lengths disagree")


@dataclass(frozen=True)
class Detection:
    """Post-suppression detection with a normalized (x1, y1, x2, y2) box."""

    box: tuple
    class_id: int
    confidence: float

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"degenerate box {self.box}")
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence out of range: {self.confidence}")


class ReferenceNet(nn.Module):
    """Anchor-free single-stage detector: 4-stage conv backbone at 128x128
    input, one prediction per 16x16 cell (8x8 grid). GroupNorm keeps behavior
    independent of batch composition."""

    def __init__(self, num_classes: int = 3, width: int = 32):
        super().__init__()
        c = width
        def block(cin, cout):
            return nn.Sequential(
                nn.Conv2d(cin, cout, 3, stride=2, padding=1),
                nn.GroupNorm(8, cout), nn.SiLU())
        self.stage1 = block(3, c)
        self.stage2 = block(c, c * 2)
        self.stage3 = block(c * 2, c * 2)
        self.stage4 = block(c * 2, c * 2)
        self.head = nn.Conv2d(c * 2, 5 + num_classes, 1)
        self.num_classes = num_classes
        self.feature_dim = c * 2

    def backbone(self, x: torch.Tensor) -> torch.Tensor:
        return self.stage4(self.stage3(self.stage2(self.stage1(x))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.backbone(x))


@dataclass
class ModelHandle:
    """A loaded detector plus its metadata; the unit all pipeline operations
    accept. `net` is the torch module; grid is the prediction lattice size."""

    net: ReferenceNet
    input_size: int = 128
    class_names: tuple = ("rectangle", "circle", "triangle")
    id: str = "reference"
    meta: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return self.net.num_classes


def _decode(raw: torch.Tensor, num_classes: int):
    """Map head output (B, 5+C, G, G) to normalized candidate tensors."""
    b, _, g, _ = raw.shape
    device = raw.device
    gx = torch.arange(g, device=device, dtype=raw.dtype)
    cell_x = gx.view(1, 1, g).expand(b, g, g)
    cell_y = gx.view(1, g, 1).expand(b, g, g)
    tx, ty, tw, th = raw[:, 0], raw[:, 1], raw[:, 2], raw[:, 3]
    cx = (cell_x + torch.sigmoid(tx)) / g
    cy = (cell_y + torch.sigmoid(ty)) / g
    w = torch.sigmoid(tw)
    h = torch.sigmoid(th)
    obj = torch.sigmoid(raw[:, 4])
    cls = torch.softmax(raw[:, 5:], dim=1)
    boxes = torch.stack([cx, cy, w, h], dim=-1).reshape(b, -1, 4)
    obj = obj.reshape(b, -1)
    cls = cls.permute(0, 2, 3, 1).reshape(b, -1, num_classes)
    return boxes, obj, cls


def forward_raw(handle: ModelHandle, image_batch: torch.Tensor):
    """Run the detector and return per-image DetectionCandidates.

    image_batch: (B, 3, S, S) in [0, 1] at the handle's input resolution. The
    returned score tensors stay attached to the autograd graph, so gradients
    of any scalar of the candidates flow back to the input images (and through
    patch compositing to patch pixels).
    """
    if hasattr(handle, "forward_raw"):  # plugin / fixture adapters
        return handle.forward_raw(image_batch)
    if image_batch.dim() == 3:
        image_batch = image_batch.unsqueeze(0)
    s = handle.input_size
    if image_batch.shape[-2:] != (s, s):
        raise ValueError(f"expected {s}x{s} input, got {tuple(image_batch.shape[-2:])}")
    raw = handle.net(image_batch)
    boxes, obj, cls = _decode(raw, handle.num_classes)
    return [DetectionCandidates(boxes=boxes[i], objectness=obj[i], class_scores=cls[i])
            for i in range(image_batch.shape[0])]


def _cxcywh_to_xyxy(box):
    cx, cy, w, h = box
    return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def nms(entries, iou_threshold: float):
    """Greedy per-class non-maximum suppression over (box_xyxy, class_id,
    confidence) triples; returns survivors sorted by confidence."""
    entries = sorted(entries, key=lambda e: -e[2])
    keep = []
    for box, cid, conf in entries:
        if any(kcid == cid and iou_xyxy(box, kbox) > iou_threshold
               for kbox, kcid, _ in keep):
            continue
        keep.append((box, cid, conf))
    return keep


def detect(handle: ModelHandle, image: torch.Tensor,
           confidence_threshold: float = 0.25, iou_threshold: float = 0.5):
    """Decode + NMS; returns Detections sorted by descending confidence.

    Confidence is objectness times the best class score; the threshold is
    exclusive so confidence_threshold=1.0 yields nothing.
    """
    if not (0.0 <= confidence_threshold <= 1.0 and 0.0 <= iou_threshold <= 1.0):
        raise ValueError("thresholds must be in [0, 1]")
    with torch.no_grad():
        cands = forward_raw(handle, image)[0]
    cls_conf, cls_id = cands.class_scores.max(dim=1)
    conf = (cands.objectness * cls_conf).numpy()
    entries = []
    for i in range(cands.boxes.shape[0]):
        if conf[i] > confidence_threshold:
            box = _cxcywh_to_xyxy(cands.boxes[i].tolist())
            entries.append((box, int(cls_id[i]), float(conf[i])))
    survivors = nms(entries, iou_threshold)
    out = []
    for box, cid, c in survivors:
        x1, y1, x2, y2 = box
        if x2 <= x1 or y2 <= y1:
            continue
        out.append(Detection(box=(x1, y1, x2, y2), class_id=cid, confidence=c))
    return out


class TrainingDivergence(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"non-finite loss at training step {step}")
        self.step = step


@dataclass(frozen=True)
class TrainHyperparams:
    epochs: int = 60
    batch_size: int = 16
    lr: float = 2e-3
    seed: int = 0
    box_weight: float = 5.0
    noobj_weight: float = 1.0
    ignore_weight: float = 0.2  # objectness weight inside GT boxes off-center


def _build_targets(manifest: DatasetManifest, image_ids, grid: int, num_classes: int,
                   image_size: int):
    """Per-image training targets on the prediction grid.

    The cell holding an object's center is positive for objectness. Cells
    elsewhere inside the object's box get no objectness penalty (ignore zone)
    but still learn the object's box and class, so any stray activations there
    localize well enough for suppression to merge them.
    """
    targets = []
    for iid in image_ids:
        obj = np.zeros((grid, grid), dtype=np.float32)
        ignore = np.zeros((grid, grid), dtype=bool)
        aux = np.zeros((grid, grid), dtype=bool)
        boxes = np.zeros((grid, grid, 4), dtype=np.float32)
        cls = np.zeros((grid, grid), dtype=np.int64)
        for a in manifest.annotations_for(iid):
            x, y, w, h = a["bbox"]
            cx, cy = (x + w / 2) / image_size, (y + h / 2) / image_size
            gx = min(int(cx * grid), grid - 1)
            gy = min(int(cy * grid), grid - 1)
            x0 = max(int(x / image_size * grid), 0)
            x1 = min(int((x + w) / image_size * grid), grid - 1)
            y0 = max(int(y / image_size * grid), 0)
            y1 = min(int((y + h) / image_size * grid), grid - 1)
            for yy in range(y0, y1 + 1):
                for xx in range(x0, x1 + 1):
                    if obj[yy, xx] > 0.5:
                        continue
                    ignore[yy, xx] = True
                    aux[yy, xx] = True
                    boxes[yy, xx] = [cx, cy, w / image_size, h / image_size]
                    cls[yy, xx] = a["category_id"]
            obj[gy, gx] = 1.0
            ignore[gy, gx] = False
            aux[gy, gx] = True
            boxes[gy, gx] = [cx, cy, w / image_size, h / image_size]
            cls[gy, gx] = a["category_id"]
        targets.append((obj, boxes, cls, ignore, aux))
    return targets


def _detection_loss(raw, targets, num_classes, hp: TrainHyperparams):
    b, _, g, _ = raw.shape
    obj_t = torch.stack([torch.from_numpy(t[0]) for t in targets])
    box_t = torch.stack([torch.from_numpy(t[1]) for t in targets])
    cls_t = torch.stack([torch.from_numpy(t[2]) for t in targets])
    ignore = torch.stack([torch.from_numpy(t[3]) for t in targets])
    aux = torch.stack([torch.from_numpy(t[4]) for t in targets])

    boxes, obj, cls = _decode(raw, num_classes)
    boxes = boxes.reshape(b, g, g, 4)
    obj = obj.reshape(b, g, g)
    cls = cls.reshape(b, g, g, num_classes)

    pos = obj_t > 0.5
    obj_loss = F.binary_cross_entropy(obj, obj_t, reduction="none")
    weight = torch.where(pos, torch.ones_like(obj_loss), torch.full_like(obj_loss, hp.noobj_weight))
    weight = torch.where(ignore, torch.full_like(weight, hp.ignore_weight), weight)
    obj_loss = (obj_loss * weight).mean()

    pos = aux  # box/class supervision covers the ignore zone too
    if pos.any():
        # IoU loss localizes much more sharply than coordinate regression
        pb, tb = boxes[pos], box_t[pos]
        px1, py1 = pb[:, 0] - pb[:, 2] / 2, pb[:, 1] - pb[:, 3] / 2
        px2, py2 = pb[:, 0] + pb[:, 2] / 2, pb[:, 1] + pb[:, 3] / 2
        tx1, ty1 = tb[:, 0] - tb[:, 2] / 2, tb[:, 1] - tb[:, 3] / 2
        tx2, ty2 = tb[:, 0] + tb[:, 2] / 2, tb[:, 1] + tb[:, 3] / 2
        iw = (torch.min(px2, tx2) - torch.max(px1, tx1)).clamp(min=0)
        ih = (torch.min(py2, ty2) - torch.max(py1, ty1)).clamp(min=0)
        inter = iw * ih
        union = pb[:, 2] * pb[:, 3] + tb[:, 2] * tb[:, 3] - inter
        iou = inter / (union + 1e-9)
        box_loss = (1.0 - iou).mean() + F.l1_loss(pb, tb)
        cls_loss = F.nll_loss(torch.log(cls[pos] + 1e-9), cls_t[pos])
    else:
        box_loss = raw.sum() * 0.0
        cls_loss = raw.sum() * 0.0
    return obj_loss + hp.box_weight * box_loss + cls_loss


def train_reference_detector(manifest: DatasetManifest,
                             hp: TrainHyperparams = TrainHyperparams(),
                             base: ModelHandle | None = None,
                             handle_id: str = "reference",
                             log=None) -> ModelHandle:
    """Train the reference detector on a manifest. Deterministic per seed in
    single-threaded mode; raises TrainingDivergence on a non-finite loss."""
    if len(manifest) == 0:
        raise ValueError("manifest is empty")
    torch.manual_seed(hp.seed)
    image_size = manifest.images[0]["height"]
    num_classes = len(manifest.categories)
    if base is not None:
        net = ReferenceNet(num_classes=num_classes, width=base.net.feature_dim // 2)
        net.load_state_dict(base.net.state_dict())
    else:
        net = ReferenceNet(num_classes=num_classes)
    net.train()

    image_ids = manifest.image_ids()
    images = torch.stack([load_image(manifest.image_path(i)) for i in image_ids])
    grid = image_size // 16
    targets = _build_targets(manifest, image_ids, grid, num_classes, image_size)

    opt = torch.optim.Adam(net.parameters(), lr=hp.lr)
    sched = torch.optim.lr_scheduler.MultiStepLR(
        opt, milestones=[max(1, hp.epochs // 2), max(2, (3 * hp.epochs) // 4)],
        gamma=0.2)
    rng = np.random.default_rng(hp.seed)
    step = 0
    for epoch in range(hp.epochs):
        order = rng.permutation(len(image_ids))
        for start in range(0, len(order), hp.batch_size):
            idx = order[start:start + hp.batch_size]
            batch = images[idx]
            raw = net(batch)
            loss = _detection_loss(raw, [targets[i] for i in idx], num_classes, hp)
            if not torch.isfinite(loss):
                raise TrainingDivergence(step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
        if log is not None:
            log(epoch, float(loss))

    net.eval()
    handle = ModelHandle(net=net, input_size=image_size,
                         class_names=tuple(c["name"] for c in manifest.categories),
                         id=handle_id,
                         meta={"hyperparams": hp.__dict__, "train_split": manifest.split})
    return handle


def extract_backbone_features(handle: ModelHandle, image: torch.Tensor) -> np.ndarray:
    """Spatially pooled activations of the deepest backbone stage as a fixed
    length vector (length = handle.net.feature_dim)."""
    if image.dim() == 3:
        image = image.unsqueeze(0)
    with torch.no_grad():
        feat = handle.net.backbone(image)
    vec = feat.mean(dim=(2, 3)).squeeze(0).numpy()
    if not np.all(np.isfinite(vec)):
        raise RuntimeError("non-finite backbone features")
    return vec


def config_hash(obj) -> str:
    """Stable short digest of a JSON-serializable config."""
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def save_checkpoint(handle: ModelHandle, out_dir: str) -> str:
    """Persist net weights + metadata under a config-hash name; returns path."""
    os.makedirs(out_dir, exist_ok=True)
    h = config_hash({"meta": handle.meta, "id": handle.id,
                     "classes": list(handle.class_names)})
    path = os.path.join(out_dir, f"{handle.id}_{h}.pt")
    torch.save({"state_dict": handle.net.state_dict(),
                "num_classes": handle.num_classes,
                "width": handle.net.feature_dim // 2,
                "input_size": handle.input_size,
                "class_names": list(handle.class_names),
                "id": handle.id, "meta": handle.meta}, path)
    return path


def load_checkpoint(path: str) -> ModelHandle:
    ckpt = torch.load(path, weights_only=False)
    net = ReferenceNet(num_classes=ckpt["num_classes"], width=ckpt["width"])
    net.load_state_dict(ckpt["state_dict"])
    net.eval()
    return ModelHandle(net=net, input_size=ckpt["input_size"],
                       class_names=tuple(ckpt["class_names"]),
                       id=ckpt["id"], meta=ckpt.get("meta", {}))


_ADAPTERS = {}


class ReferenceAdapter:
    """Built-in adapter for the reference detector; loads checkpoints."""

    exposes_raw_scores = True

    def load(self, checkpoint_path: str) -> ModelHandle:
        return load_checkpoint(checkpoint_path)


def register_adapter(name: str, adapter) -> None:
    """Register a detector adapter. Adapters must declare raw pre-suppression
    score access (exposes_raw_scores); the attack objective differentiates
    through those scores, so final-detections-only adapters are rejected."""
    if not getattr(adapter, "exposes_raw_scores", False):
        raise ValueError(
            f"adapter {name!r} does not expose raw pre-suppression scores; "
            "the attack surface requires them")
    if not hasattr(adapter, "load"):
        raise ValueError(f"adapter {name!r} must provide a load() method")
    _ADAPTERS[name] = adapter


def get_adapter(name: str):
    if name not in _ADAPTERS:
        raise KeyError(f"no adapter registered under {name!r}; known: {sorted(_ADAPTERS)}")
    return _ADAPTERS[name]


register_adapter("reference", ReferenceAdapter())
