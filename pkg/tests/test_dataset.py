import json
import os

import numpy as np
import pytest

from patchlab.dataset import (DatasetManifest, SyntheticConfig,
                              build_synthetic_dataset, load_image)


def test_single_object_manifest(tmp_path):
    cfg = SyntheticConfig(num_images=1, min_objects=1, max_objects=1, seed=0)
    m = build_synthetic_dataset(cfg, str(tmp_path / "ds"))
    assert len(m) == 1
    assert len(m.annotations) == 1
    m.validate()
    a = m.annotations[0]
    x, y, w, h = a["bbox"]
    assert x >= 0 and y >= 0 and x + w <= 128 and y + h <= 128


def test_deterministic_per_seed(tmp_path):
    cfg = SyntheticConfig(num_images=5, seed=11)
    m1 = build_synthetic_dataset(cfg, str(tmp_path / "a"))
    m2 = build_synthetic_dataset(cfg, str(tmp_path / "b"))
    j1 = open(tmp_path / "a" / "annotations.json", "rb").read()
    j2 = open(tmp_path / "b" / "annotations.json", "rb").read()
    assert j1 == j2
    i1 = open(m1.image_path(1), "rb").read()
    i2 = open(m2.image_path(1), "rb").read()
    assert i1 == i2


def test_annotation_count_range(tmp_path):
    cfg = SyntheticConfig(num_images=100, min_objects=1, max_objects=4, seed=3)
    m = build_synthetic_dataset(cfg, str(tmp_path / "ds"))
    n = len(m.annotations)
    # recount from the manifest itself
    assert n == sum(len(m.annotations_for(i)) for i in m.image_ids())
    assert 100 <= n <= 400


def test_invalid_configs():
    with pytest.raises(ValueError):
        SyntheticConfig(num_images=0)
    with pytest.raises(ValueError):
        SyntheticConfig(classes=())
    with pytest.raises(ValueError):
        SyntheticConfig(min_objects=3, max_objects=1)


def test_validate_catches_out_of_bounds(tmp_path):
    cfg = SyntheticConfig(num_images=1, seed=0)
    m = build_synthetic_dataset(cfg, str(tmp_path / "ds"))
    m.annotations.append({"id": 99, "image_id": 1, "bbox": [120, 120, 20, 20],
                          "category_id": 0})
    with pytest.raises(ValueError):
        m.validate()
    m.annotations[-1] = {"id": 99, "image_id": 777, "bbox": [0, 0, 5, 5],
                         "category_id": 0}
    with pytest.raises(ValueError):
        m.validate()


def test_manifest_round_trip(tmp_path):
    cfg = SyntheticConfig(num_images=3, seed=2)
    m = build_synthetic_dataset(cfg, str(tmp_path / "ds"))
    loaded = DatasetManifest.load(os.path.join(str(tmp_path / "ds"), "annotations.json"))
    assert loaded.images == m.images
    assert loaded.annotations == m.annotations
    assert loaded.categories == m.categories
    assert os.path.samefile(loaded.root, m.root)


def test_coco_format_fields(tmp_path):
    cfg = SyntheticConfig(num_images=2, seed=5)
    build_synthetic_dataset(cfg, str(tmp_path / "ds"))
    with open(tmp_path / "ds" / "annotations.json") as f:
        d = json.load(f)
    assert {"images", "annotations", "categories"} <= set(d)
    assert all({"id", "file_name", "width", "height"} <= set(im) for im in d["images"])
    assert all({"id", "image_id", "bbox", "category_id"} <= set(a)
               for a in d["annotations"])


def test_load_image(tmp_path):
    cfg = SyntheticConfig(num_images=1, seed=0)
    m = build_synthetic_dataset(cfg, str(tmp_path / "ds"))
    img = load_image(m.image_path(1))
    assert img.shape == (3, 128, 128)
    assert float(img.min()) >= 0.0 and float(img.max()) <= 1.0
