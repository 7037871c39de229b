"""Patch generalization analysis in feature space: backbone feature
collection, PCA, a deterministic exact t-SNE, and dispersion statistics that
put numbers on how widely patch groups spread relative to benign inputs."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from .detector import ModelHandle, extract_backbone_features
from .patching import TransformSpec, apply_patch

BENIGN_LABEL = "benign"


@dataclass
class FeatureSet:
    vectors: np.ndarray  # (K, D)
    labels: list  # per-row group tag
    model_id: str = ""
    explained_variance_ratio: np.ndarray | None = None

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ValueError("vectors must be a 2-D matrix")
        if len(self.labels) != self.vectors.shape[0]:
            raise ValueError("labels length must match row count")

    def save_csv(self, path: str) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["label"] + [f"f{i}" for i in range(self.vectors.shape[1])])
            for label, row in zip(self.labels, self.vectors):
                w.writerow([label] + [repr(float(v)) for v in row])

    @classmethod
    def load_csv(cls, path: str, model_id: str = "") -> "FeatureSet":
        with open(path) as f:
            rows = list(csv.reader(f))
        labels = [r[0] for r in rows[1:]]
        vectors = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
        return cls(vectors=vectors, labels=labels, model_id=model_id)


def collect_features(patches, handle: ModelHandle, probe_images,
                     fixed_transform: TransformSpec) -> FeatureSet:
    """Backbone features of the probe images, benign and with each patch
    applied at one shared location (location equality is the control)."""
    vectors, labels = [], []
    for img in probe_images:
        vectors.append(extract_backbone_features(handle, img))
        labels.append(BENIGN_LABEL)
    for p in patches:
        pt = p.to_tensor()
        for img in probe_images:
            with torch.no_grad():
                patched = apply_patch(img, pt, fixed_transform)
            vectors.append(extract_backbone_features(handle, patched))
            labels.append(p.id)
    return FeatureSet(vectors=np.stack(vectors), labels=labels, model_id=handle.id)


def pca_project(features: FeatureSet, k: int) -> FeatureSet:
    """Project rows onto the top-k principal components of the mean-centered
    matrix. Components are orthonormal; explained-variance ratios come back
    non-increasing on the result."""
    x = features.vectors
    K, D = x.shape
    if K < 2:
        raise ValueError("need at least 2 rows for PCA")
    if k > min(K, D):
        raise ValueError(f"k={k} exceeds min(K, D)={min(K, D)}")
    centered = x - x.mean(axis=0, keepdims=True)
    if np.allclose(centered, 0.0):
        raise ValueError("all rows identical: zero variance, PCA undefined")
    u, s, vt = np.linalg.svd(centered, full_matrices=False)
    proj = centered @ vt[:k].T
    var = s ** 2
    evr = var[:k] / var.sum()
    return FeatureSet(vectors=proj, labels=list(features.labels),
                      model_id=features.model_id, explained_variance_ratio=evr)


def _perplexity_probs(d2: np.ndarray, perplexity: float) -> np.ndarray:
    """Row-wise conditional affinities with per-point bandwidth found by
    binary search so each row's entropy matches log(perplexity)."""
    K = d2.shape[0]
    target = np.log(perplexity)
    P = np.zeros((K, K))
    for i in range(K):
        di = np.delete(d2[i], i)
        lo, hi = 1e-20, 1e20
        beta = 1.0
        for _ in range(64):
            p = np.exp(-di * beta)
            sp = p.sum()
            if sp <= 0:
                beta = lo = beta / 10
                continue
            p = p / sp
            h = -np.sum(p * np.log(np.maximum(p, 1e-300)))
            if abs(h - target) < 1e-7:
                break
            if h > target:
                lo = beta
                beta = beta * 2 if hi >= 1e20 else (beta + hi) / 2
            else:
                hi = beta
                beta = (beta + lo) / 2
        row = np.insert(p, i, 0.0)
        P[i] = row
    return P


def tsne_embed(features: FeatureSet, perplexity: float = 30.0, seed: int = 0,
               n_iter: int = 1000):
    """Exact 2-D t-SNE (no tree approximation; fine at desk scale).

    Returns (embedding (K, 2), kl_trace). Deterministic per seed.
    """
    x = features.vectors
    K = x.shape[0]
    if K <= 3 * perplexity:
        raise ValueError(f"need K > 3*perplexity; K={K}, perplexity={perplexity}")

    d2 = np.square(x[:, None, :] - x[None, :, :]).sum(-1)
    P = _perplexity_probs(d2, perplexity)
    P = (P + P.T) / (2.0 * K)
    P = np.maximum(P, 1e-12)

    rng = np.random.default_rng(seed)
    y = rng.normal(0.0, 1e-4, size=(K, 2))
    dy = np.zeros_like(y)
    gains = np.ones_like(y)
    lr = 50.0
    exaggeration_until = 100
    kl_trace = []

    for it in range(n_iter):
        Pe = P * 12.0 if it < exaggeration_until else P
        diff = y[:, None, :] - y[None, :, :]
        num = 1.0 / (1.0 + np.square(diff).sum(-1))
        np.fill_diagonal(num, 0.0)
        Q = np.maximum(num / num.sum(), 1e-12)
        pq = (Pe - Q) * num
        grad = 4.0 * (pq[:, :, None] * diff).sum(axis=1)

        momentum = 0.5 if it < exaggeration_until else 0.8
        gains = np.where(np.sign(grad) != np.sign(dy), gains + 0.2, gains * 0.8)
        gains = np.maximum(gains, 0.01)
        dy = momentum * dy - lr * gains * grad
        y = y + dy
        y = y - y.mean(axis=0, keepdims=True)
        kl_trace.append(float(np.sum(P * np.log(P / Q))))

    return y, kl_trace


@dataclass
class DispersionReport:
    mean_pairwise_distance: dict  # group -> mean pairwise Euclidean distance
    covariance_trace: dict  # group -> trace of the sample covariance
    centroid_distance: dict  # "a|b" -> distance between group centroids
    skipped_groups: list = field(default_factory=list)

    def to_dict(self):
        return {"mean_pairwise_distance": self.mean_pairwise_distance,
                "covariance_trace": self.covariance_trace,
                "centroid_distance": self.centroid_distance,
                "skipped_groups": self.skipped_groups}

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)


def dispersion(features: FeatureSet) -> DispersionReport:
    """Per-group spread plus inter-group centroid distances. Groups with a
    single row are skipped (with notice) for the pairwise statistics."""
    groups = {}
    for label, row in zip(features.labels, features.vectors):
        groups.setdefault(label, []).append(row)
    groups = {k: np.stack(v) for k, v in groups.items()}

    mpd, trace, skipped = {}, {}, []
    centroids = {}
    for name, rows in groups.items():
        centroids[name] = rows.mean(axis=0)
        if rows.shape[0] < 2:
            skipped.append(name)
            continue
        dists = [np.linalg.norm(rows[i] - rows[j])
                 for i in range(len(rows)) for j in range(i + 1, len(rows))]
        mpd[name] = float(np.mean(dists))
        trace[name] = float(np.trace(np.cov(rows, rowvar=False, ddof=1)))

    centroid_distance = {}
    names = sorted(groups)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            centroid_distance[f"{a}|{b}"] = float(
                np.linalg.norm(centroids[a] - centroids[b]))
    return DispersionReport(mean_pairwise_distance=mpd, covariance_trace=trace,
                            centroid_distance=centroid_distance,
                            skipped_groups=skipped)


def render_scatter(embedding: np.ndarray, labels, out_path: str,
                   title: str = "feature embedding") -> list:
    """2-D scatter with one color per group and a legend; returns the legend
    entries (sorted group names)."""
    embedding = np.asarray(embedding)
    if embedding.size == 0:
        raise ValueError("empty embedding")
    if embedding.shape[0] != len(labels):
        raise ValueError("embedding and labels misaligned")
    groups = sorted(set(labels))
    fig, ax = plt.subplots(figsize=(7, 6))
    for name in groups:
        mask = np.array([l == name for l in labels])
        ax.scatter(embedding[mask, 0], embedding[mask, 1], s=18, label=name)
    ax.legend(fontsize=8)
    ax.set_title(title)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return groups
