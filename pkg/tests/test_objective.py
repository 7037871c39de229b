import numpy as np
import pytest
import torch

from patchlab.detector import DetectionCandidates
from patchlab.objective import batch_attack_loss, hiding_loss
from patchlab.patching import TransformConfig


def make_candidates(pairs):
    """pairs: list of (max_class_score, objectness)."""
    m = len(pairs)
    boxes = torch.full((m, 4), 0.5)
    obj = torch.tensor([o for _, o in pairs])
    cls = torch.tensor([[c] for c, _ in pairs])
    return DetectionCandidates(boxes=boxes, objectness=obj, class_scores=cls)


class TestHidingLoss:
    def test_upper_bound_candidate(self):
        assert float(hiding_loss(make_candidates([(1.0, 1.0)]))) == 1.0

    def test_zero_objectness_annihilates(self):
        loss = hiding_loss(make_candidates([(0.9, 0.0), (0.7, 0.0)]))
        assert float(loss) == 0.0

    def test_three_candidate_fixture(self):
        # products: 0.45, 0.48, 0.49 -> max 0.49
        loss = hiding_loss(make_candidates([(0.9, 0.5), (0.6, 0.8), (0.7, 0.7)]))
        assert float(loss) == pytest.approx(0.49)

    def test_empty_candidates(self):
        empty = DetectionCandidates(boxes=torch.zeros(0, 4),
                                    objectness=torch.zeros(0),
                                    class_scores=torch.zeros(0, 2))
        assert float(hiding_loss(empty)) == 0.0

    def test_non_finite_rejected(self):
        cands = make_candidates([(0.5, 0.5)])
        cands.objectness[0] = float("nan")
        with pytest.raises(ValueError):
            hiding_loss(cands)

    def test_bounds(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            pairs = [(rng.uniform(), rng.uniform()) for _ in range(5)]
            v = float(hiding_loss(make_candidates(pairs)))
            assert 0.0 <= v <= 1.0

    def test_monotone_under_score_increase(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            pairs = [(rng.uniform(0, 0.9), rng.uniform(0, 0.9)) for _ in range(4)]
            base = float(hiding_loss(make_candidates(pairs)))
            i = int(rng.integers(4))
            bumped = list(pairs)
            bumped[i] = (pairs[i][0], pairs[i][1] + 0.1)
            assert float(hiding_loss(make_candidates(bumped))) >= base

    def test_gradient_matches_finite_differences(self):
        obj0 = torch.tensor([0.5, 0.8, 0.7], dtype=torch.float64)
        cls0 = torch.tensor([[0.9, 0.1], [0.6, 0.2], [0.7, 0.3]], dtype=torch.float64)
        obj = obj0.clone().requires_grad_(True)
        cls = cls0.clone().requires_grad_(True)
        cands = DetectionCandidates(boxes=torch.zeros(3, 4), objectness=obj,
                                    class_scores=cls)
        hiding_loss(cands).backward()
        eps = 1e-6
        for tensor, grad, base in ((obj, obj.grad, obj0), (cls, cls.grad, cls0)):
            flat_base = base.flatten()
            for idx in range(flat_base.numel()):
                bumped = flat_base.clone()
                bumped[idx] += eps
                o = bumped[:3] if tensor is obj else obj0
                c = bumped.reshape(3, 2) if tensor is cls else cls0
                fd = (float(hiding_loss(DetectionCandidates(
                    boxes=torch.zeros(3, 4), objectness=o, class_scores=c)))
                    - 0.49) / eps
                an = float(grad.flatten()[idx])
                denom = max(abs(fd), abs(an))
                if denom > 1e-9:
                    assert abs(fd - an) / denom < 1e-4

    def test_tie_break_lowest_index(self):
        obj = torch.tensor([0.7, 0.7], requires_grad=True)
        cls = torch.tensor([[1.0], [1.0]])
        cands = DetectionCandidates(boxes=torch.zeros(2, 4), objectness=obj,
                                    class_scores=cls)
        hiding_loss(cands).backward()
        assert float(obj.grad[0]) == 1.0 and float(obj.grad[1]) == 0.0


class FixtureAdapter:
    """Returns candidates whose hiding loss is a prescribed per-image value,
    ignoring pixel content."""

    input_size = 128

    def __init__(self, values):
        self.values = values

    def forward_raw(self, image_batch):
        out = []
        for i in range(image_batch.shape[0]):
            v = self.values[i % len(self.values)]
            out.append(DetectionCandidates(
                boxes=torch.full((1, 4), 0.5),
                objectness=torch.tensor([v]),
                class_scores=torch.tensor([[1.0]])))
        return out


class TestBatchAttackLoss:
    def test_mean_of_one(self):
        handle = FixtureAdapter([0.37])
        images = torch.rand(1, 3, 128, 128)
        patch = torch.rand(3, 64, 64)
        report = batch_attack_loss(handle, images, patch, TransformConfig(), seed=0)
        assert report.value == pytest.approx(0.37)
        assert report.batch_size == 1

    def test_fixture_mean(self):
        handle = FixtureAdapter([0.2, 0.4, 0.6, 0.8])
        images = torch.rand(4, 3, 128, 128)
        patch = torch.rand(3, 64, 64)
        report = batch_attack_loss(handle, images, patch, TransformConfig(), seed=1)
        assert report.value == pytest.approx(0.5)
        assert report.per_image_values == pytest.approx([0.2, 0.4, 0.6, 0.8])

    def test_determinism(self):
        from patchlab.detector import ReferenceNet, ModelHandle
        torch.manual_seed(0)
        handle = ModelHandle(net=ReferenceNet(num_classes=3))
        handle.net.eval()
        images = torch.rand(2, 3, 128, 128)
        patch = torch.rand(3, 64, 64)
        r1 = batch_attack_loss(handle, images, patch, TransformConfig(seed=5), seed=9)
        r2 = batch_attack_loss(handle, images, patch, TransformConfig(seed=5), seed=9)
        assert r1.value == r2.value
        assert r1.per_image_values == r2.per_image_values

    def test_report_invariant(self):
        handle = FixtureAdapter([0.1, 0.9])
        images = torch.rand(2, 3, 128, 128)
        patch = torch.rand(3, 64, 64)
        report = batch_attack_loss(handle, images, patch, TransformConfig(), seed=0)
        assert report.value == pytest.approx(np.mean(report.per_image_values))
        assert np.all(np.isfinite(report.per_image_values))
