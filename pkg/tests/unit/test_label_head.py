""" Unit tests for the detection losses and the label-synthesis head """

import math

import pytest
import torch

from labelfactory.configuration import ConfigurationError
from labelfactory.evaluation import iou
from labelfactory.labels import (
    BoxLabel,
    DetectionLossParts,
    LabelHead,
    PredictionTriplet,
    detection_loss,
    keypoint_focal_loss,
    load_label_head,
    offset_and_size_losses,
    predict_labels,
    save_label_head,
    splat_targets,
    train_label_head,
)
from labelfactory.labels.head import feature_channels, synthesize_with_features
from labelfactory.losses import TrainingDivergedError
from labelfactory.networks.generator import LatentCode


class TestFocalLoss:
    """Tests for the penalty-reduced keypoint focal loss"""

    def test_no_keypoints_normalizes_by_one(self):
        pred = torch.full((1, 1, 2), 0.5, dtype=torch.float64)
        target = torch.zeros(1, 1, 2, dtype=torch.float64)

        loss = keypoint_focal_loss(pred, target)

        assert loss.item() == pytest.approx(-0.5 * math.log(0.5))

    def test_perfect_prediction_is_near_zero(self, sample_boxes):
        target = splat_targets(sample_boxes, 16, 16, 2, 3)
        pred = torch.where(target.heatmap == 1, torch.ones_like(target.heatmap), torch.zeros_like(target.heatmap))

        assert keypoint_focal_loss(pred, target.heatmap).item() < 1e-6

    def test_gradcheck(self, sample_boxes):
        """Analytic gradients match finite differences in float64"""
        target = splat_targets(sample_boxes, 16, 16, 4, 3).heatmap
        rng = torch.Generator().manual_seed(0)
        pred = (torch.rand(target.shape, generator=rng, dtype=torch.float64) * 0.8 + 0.1).requires_grad_(True)

        assert torch.autograd.gradcheck(lambda p: keypoint_focal_loss(p, target), (pred,))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="does not match"):
            keypoint_focal_loss(torch.zeros(1, 4, 4), torch.zeros(2, 4, 4))

    def test_single_keypoint_value(self):
        """One keypoint cell predicted at 0.5 costs (1 - 0.5)^2 * ln 2"""
        pred = torch.full((1, 1, 1), 0.5, dtype=torch.float64)
        target = torch.ones(1, 1, 1, dtype=torch.float64)

        assert keypoint_focal_loss(pred, target).item() == pytest.approx(0.25 * math.log(2))


class TestRegressionLosses:
    """Tests for the masked offset and size losses"""

    def test_only_keypoint_cells_count(self, sample_boxes):
        target = splat_targets(sample_boxes, 16, 16, 2, 3)
        pred = PredictionTriplet(
            heatmap=target.heatmap,
            offsets=target.offsets + 0.5,
            sizes=target.sizes + (~target.mask).to(torch.float64) * 100.0,
        )

        offset, size = offset_and_size_losses(pred, target)

        assert offset.item() == pytest.approx(1.0)
        assert size.item() == pytest.approx(0.0)

    def test_empty_mask_gives_zero_with_gradient(self):
        target = splat_targets([], 16, 16, 4, 3)
        offsets = torch.randn(2, 4, 4, dtype=torch.float64, requires_grad=True)
        pred = PredictionTriplet(target.heatmap, offsets, torch.zeros(2, 4, 4, dtype=torch.float64))

        offset, size = offset_and_size_losses(pred, target)
        (offset + size).backward()

        assert offset.item() == 0.0 and size.item() == 0.0
        assert torch.equal(offsets.grad, torch.zeros_like(offsets))

    def test_weighted_total(self, sample_boxes):
        target = splat_targets(sample_boxes, 16, 16, 2, 3)
        pred = PredictionTriplet(target.heatmap.clamp(0.2, 0.8), target.offsets + 0.5, target.sizes + 1.0)

        total = detection_loss(pred, target, lambda_off=1.0, lambda_size=0.5)
        expected = keypoint_focal_loss(pred.heatmap, target.heatmap) + 1.0 + 0.5 * 2.0

        assert total.item() == pytest.approx(expected.item())

    def test_non_finite_component(self):
        parts = DetectionLossParts(torch.tensor(1.0), torch.tensor(float("inf")), torch.tensor(0.0))

        with pytest.raises(TrainingDivergedError) as exc_info:
            parts.total(iteration=4)

        assert exc_info.value.component == "offset"

    def test_offset_error_sums_coordinates(self):
        target = splat_targets([BoxLabel(0, 2.0, 2.0, 6.0, 6.0)], 16, 16, 2, 3)
        shift = torch.tensor([0.1, -0.2], dtype=torch.float64)[:, None, None]
        pred = PredictionTriplet(target.heatmap, target.offsets + shift, target.sizes)

        offset, size = offset_and_size_losses(pred, target)

        assert offset.item() == pytest.approx(0.3)
        assert size.item() == pytest.approx(0.0)

    def test_regression_gradcheck(self, sample_boxes):
        """Analytic gradients match finite differences in float64"""
        target = splat_targets(sample_boxes, 16, 16, 2, 3)
        rng = torch.Generator().manual_seed(1)
        offsets = (target.offsets + torch.rand(target.offsets.shape, generator=rng, dtype=torch.float64) + 0.1)
        sizes = (target.sizes - torch.rand(target.sizes.shape, generator=rng, dtype=torch.float64) - 0.1)

        assert torch.autograd.gradcheck(
            lambda o, s: offset_and_size_losses(PredictionTriplet(target.heatmap, o, s), target),
            (offsets.requires_grad_(True), sizes.requires_grad_(True)),
        )

    def test_total_gradcheck(self, sample_boxes):
        target = splat_targets(sample_boxes, 16, 16, 4, 3)
        rng = torch.Generator().manual_seed(2)
        logits = torch.randn(target.heatmap.shape, generator=rng, dtype=torch.float64)
        offsets = target.offsets + 0.3 + torch.rand(target.offsets.shape, generator=rng, dtype=torch.float64)
        sizes = target.sizes + 0.3 + torch.rand(target.sizes.shape, generator=rng, dtype=torch.float64)

        def total(heatmap_logits, pred_offsets, pred_sizes):
            pred = PredictionTriplet(torch.sigmoid(heatmap_logits), pred_offsets, pred_sizes)
            return detection_loss(pred, target, lambda_off=1.0, lambda_size=0.5)

        assert torch.autograd.gradcheck(
            total, (logits.requires_grad_(True), offsets.requires_grad_(True), sizes.requires_grad_(True))
        )


class TestLabelHead:
    """Tests for the head over captured generator features"""

    def test_synthesize_with_features(self, tiny_generator):
        """Capture layers 1 and 2 give 16 + 8 channels on the 8x8 grid"""
        images, features = synthesize_with_features(tiny_generator, torch.randn(2, 16), [1, 2], stride=2)

        assert images.shape == (2, 3, 16, 16)
        assert features.shape == (2, 24, 8, 8)
        assert feature_channels(tiny_generator, [1, 2]) == 24

    def test_images_match_plain_synthesis(self, tiny_generator):
        z = torch.randn(2, 16, generator=torch.Generator().manual_seed(2))

        images, _ = synthesize_with_features(tiny_generator, z, [1, 2], stride=2, psi=0.7)

        assert torch.allclose(images, tiny_generator(z, psi=0.7))

    @pytest.mark.parametrize("layers", [[], [4], [0, 1]])
    def test_unavailable_capture_layers(self, tiny_generator, layers):
        with pytest.raises(ConfigurationError) as exc_info:
            synthesize_with_features(tiny_generator, torch.randn(1, 16), layers)

        assert exc_info.value.key == "label.capture_layers"

    def test_forward_shapes(self):
        head = LabelHead(24, 3, hidden=8, stride=2, capture_layers=[1, 2])

        pred = head(torch.randn(2, 24, 8, 8))

        assert pred.heatmap.shape == (2, 3, 8, 8)
        assert pred.offsets.shape == (2, 2, 8, 8)
        assert pred.sizes.shape == (2, 2, 8, 8)
        assert ((pred.heatmap > 0) & (pred.heatmap < 1)).all()
        assert pred[1].heatmap.shape == (3, 8, 8)

    def test_training_reduces_loss(self, tiny_config, tiny_generator, sample_boxes):
        config = tiny_config.with_overrides(["label.iters=30", "label.lr=0.01"])
        annotated = [(LatentCode.from_seed(seed, 16), sample_boxes) for seed in range(2)]

        result = train_label_head(tiny_generator, annotated, config, seed=0)

        assert len(result.trace) == 30
        assert result.trace[-1] < result.trace[0]
        assert result.head.capture_layers == [1, 2]
        assert not result.head.training

    def test_training_is_deterministic(self, tiny_config, tiny_generator, sample_boxes):
        annotated = [(LatentCode.from_seed(0, 16), sample_boxes)]

        first = train_label_head(tiny_generator, annotated, tiny_config, seed=5)
        second = train_label_head(tiny_generator, annotated, tiny_config, seed=5)

        assert first.trace == second.trace

    def test_overfits_one_sample(self, tiny_config, tiny_generator, sample_boxes):
        """Every annotated box is recovered with IoU >= 0.9 after fitting a single sample"""
        config = tiny_config.with_overrides(
            ["label.iters=500", "label.lr=0.01", "label.hidden_channels=32", "label.optimizer=adam"]
        )
        code = LatentCode.from_seed(0, 16)

        head = train_label_head(tiny_generator, [(code, sample_boxes)], config, seed=0).head
        predicted = predict_labels(tiny_generator, head, [code], psi=config.psi, score_thresh=0.3, max_dets=16)[0]

        for box in sample_boxes:
            same_class = [iou(box, p) for p in predicted if p.class_id == box.class_id]
            assert max(same_class, default=0.0) >= 0.9

    def test_training_rejects_bad_annotations(self, tiny_config, tiny_generator, sample_boxes):
        with pytest.raises(ValueError, match="at least one annotated"):
            train_label_head(tiny_generator, [], tiny_config)

        bad = [(LatentCode.from_seed(9, 16), [BoxLabel(7, 1.0, 1.0, 4.0, 4.0)])]
        with pytest.raises(ValueError, match="seed 9"):
            train_label_head(tiny_generator, bad, tiny_config)

    def test_predict_and_reload(self, tmp_path, tiny_config, tiny_generator, sample_boxes):
        """A saved head predicts the same labels after reloading"""
        annotated = [(LatentCode.from_seed(0, 16), sample_boxes)]
        head = train_label_head(tiny_generator, annotated, tiny_config, seed=0).head
        path = tmp_path / "label_head.lfck"

        save_label_head(head, path)
        loaded = load_label_head(path)

        codes = [LatentCode.from_seed(seed, 16) for seed in range(3)]
        labels = predict_labels(tiny_generator, head, codes, psi=0.7, score_thresh=0.0, max_dets=4)
        assert len(labels) == 3
        assert all(len(label_set) <= 4 for label_set in labels)
        assert labels == predict_labels(tiny_generator, loaded, codes, psi=0.7, score_thresh=0.0, max_dets=4)
