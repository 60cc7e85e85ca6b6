""" Unit tests for box labels, heatmap targets and peak decoding """

import math

import pytest
import torch

from hypothesis import assume, given, settings
from hypothesis import strategies as st

from labelfactory.labels.decode import decode, decode_labels, local_maxima
from labelfactory.labels.losses import PredictionTriplet
from labelfactory.labels.targets import BoxLabel, gaussian_radius, gaussian_sigma, splat_targets, stack_targets

SIDE = 16
NUM_CLASSES = 3
# Only cells with a heatmap of exactly 1 survive this threshold
KEYPOINTS_ONLY = 1 - 1e-9


@st.composite
def boxes_in_image(draw, max_boxes: int = 4):
    """ Up to ``max_boxes`` valid boxes inside a SIDE x SIDE image """
    count = draw(st.integers(min_value=1, max_value=max_boxes))
    boxes = []
    for _ in range(count):
        class_id = draw(st.integers(min_value=0, max_value=NUM_CLASSES - 1))
        x_min = draw(st.floats(min_value=0.0, max_value=SIDE - 1.0))
        y_min = draw(st.floats(min_value=0.0, max_value=SIDE - 1.0))
        width = draw(st.floats(min_value=0.5, max_value=SIDE - x_min))
        height = draw(st.floats(min_value=0.5, max_value=SIDE - y_min))
        boxes.append(BoxLabel(class_id, x_min, y_min, x_min + width, y_min + height))
    return boxes


def _keypoint_cell(box: BoxLabel, stride: int) -> tuple[int, int]:
    grid = SIDE // stride
    cx, cy = box.center
    return min(int(math.floor(cx / stride)), grid - 1), min(int(math.floor(cy / stride)), grid - 1)


def _as_prediction(boxes, stride: int) -> PredictionTriplet:
    target = splat_targets(boxes, SIDE, SIDE, stride, NUM_CLASSES)
    return PredictionTriplet(target.heatmap, target.offsets, target.sizes)


class TestBoxLabel:
    """Tests for the box value type"""

    def test_xywh_conversion(self):
        box = BoxLabel.from_xywh(1, [2.0, 3.0, 4.0, 5.0])

        assert box.to_xyxy() == (2.0, 3.0, 6.0, 8.0)
        assert box.to_xywh() == [2.0, 3.0, 4.0, 5.0]
        assert box.center == (4.0, 5.5)

    @pytest.mark.parametrize("box", [
        BoxLabel(0, 3.0, 3.0, 3.0, 8.0),
        BoxLabel(0, -1.0, 0.0, 4.0, 4.0),
        BoxLabel(0, 0.0, 0.0, 17.0, 4.0),
        BoxLabel(3, 0.0, 0.0, 4.0, 4.0),
    ])
    def test_invalid_boxes(self, box):
        with pytest.raises(ValueError):
            box.check(SIDE, SIDE, NUM_CLASSES)


class TestGaussianRadius:
    """Tests for the overlap-preserving radius"""

    def test_square_box(self):
        """For a 10x10 box at overlap 0.7 the two-corners-outward case is tightest"""
        assert gaussian_radius(10.0, 10.0, 0.7) == pytest.approx((40 - math.sqrt(1120)) / 8)

    @settings(derandomize=True, max_examples=50)
    @given(
        st.floats(min_value=0.1, max_value=200.0),
        st.floats(min_value=0.1, max_value=200.0),
        st.floats(min_value=1.01, max_value=4.0),
    )
    def test_grows_with_box(self, box_w, box_h, scale):
        """Scaling a box scales its radius"""
        small = gaussian_radius(box_w, box_h)
        large = gaussian_radius(box_w * scale, box_h * scale)

        assert large == pytest.approx(small * scale, rel=1e-6)

    def test_invalid_inputs(self):
        with pytest.raises(ValueError, match="positive"):
            gaussian_radius(0.0, 4.0)
        with pytest.raises(ValueError, match="min_overlap"):
            gaussian_radius(4.0, 4.0, 1.0)

    def test_sigma_floor(self):
        """Tiny boxes still get a one-cell Gaussian"""
        assert gaussian_sigma(0.2) == pytest.approx(1 / 3)
        assert gaussian_sigma(6.0) == pytest.approx(2.0)


class TestSplatTargets:
    """Tests for encoding boxes as dense targets"""

    def test_sample_boxes(self, sample_boxes):
        target = splat_targets(sample_boxes, SIDE, SIDE, 2, NUM_CLASSES)

        assert target.heatmap.shape == (3, 8, 8)
        assert target.heatmap.dtype == torch.float64
        assert target.num_keypoints == 3
        assert target.heatmap[0, 2, 2] == 1.0
        assert target.heatmap[1, 2, 6] == 1.0
        assert target.heatmap[2, 6, 4] == 1.0
        assert target.offsets[:, 6, 4].tolist() == [0.0, 0.5]
        assert target.sizes[:, 2, 6].tolist() == [3.0, 2.0]
        assert int((target.heatmap == 1.0).sum()) == 3

    def test_empty_image(self):
        target = splat_targets([], SIDE, SIDE, 4, NUM_CLASSES)

        assert target.num_keypoints == 0
        assert float(target.heatmap.sum()) == 0.0

    def test_collision_keeps_larger_box(self):
        """Two objects on one keypoint cell: the larger box owns offset and size"""
        small = BoxLabel(0, 6.0, 6.0, 9.0, 9.0)
        large = BoxLabel(1, 2.0, 2.0, 13.0, 13.0)

        for order in ([small, large], [large, small]):
            target = splat_targets(order, SIDE, SIDE, 4, NUM_CLASSES)
            assert target.num_keypoints == 1
            assert target.sizes[:, 1, 1].tolist() == [11 / 4, 11 / 4]
            assert target.heatmap[0, 1, 1] == 1.0 and target.heatmap[1, 1, 1] == 1.0

    def test_stride_must_divide(self, sample_boxes):
        with pytest.raises(ValueError, match="not divisible"):
            splat_targets(sample_boxes, SIDE, SIDE, 3, NUM_CLASSES)

    def test_stack(self, sample_boxes):
        batch = stack_targets([splat_targets(sample_boxes, SIDE, SIDE, 2, NUM_CLASSES)] * 2)

        assert batch.heatmap.shape == (2, 3, 8, 8)
        assert batch.mask.shape == (2, 8, 8)

    @settings(derandomize=True, max_examples=60, deadline=None)
    @given(boxes_in_image(), st.sampled_from([1, 2, 4]))
    def test_heatmap_is_max_of_gaussians(self, boxes, stride):
        """Every heatmap cell equals the brute-force max over per-object Gaussians"""
        target = splat_targets(boxes, SIDE, SIDE, stride, NUM_CLASSES)
        grid = SIDE // stride

        expected = torch.zeros(NUM_CLASSES, grid, grid, dtype=torch.float64)
        for box in boxes:
            cell_x, cell_y = _keypoint_cell(box, stride)
            sigma = gaussian_sigma(gaussian_radius(box.width / stride, box.height / stride))
            for y in range(grid):
                for x in range(grid):
                    value = math.exp(-((x - cell_x) ** 2 + (y - cell_y) ** 2) / (2 * sigma ** 2))
                    expected[box.class_id, y, x] = max(float(expected[box.class_id, y, x]), value)

        assert torch.allclose(target.heatmap, expected, atol=1e-12)
        assert target.num_keypoints == len({_keypoint_cell(box, stride) for box in boxes})
        assert float(target.heatmap.max()) <= 1.0


class TestDecode:
    """Tests for turning heatmap peaks back into boxes"""

    def test_local_maxima_keeps_plateaus(self):
        heatmap = torch.tensor([[[0.5, 0.5, 0.1], [0.1, 0.2, 0.1], [0.1, 0.1, 0.3]]])

        peaks = local_maxima(heatmap)

        assert peaks[0].tolist() == [[True, True, False], [False, False, False], [False, False, True]]

    def test_sample_boxes_round_trip(self, sample_boxes):
        """Decoding exact targets recovers the boxes"""
        detections = decode(_as_prediction(sample_boxes, 2), 2, score_thresh=KEYPOINTS_ONLY)

        assert len(detections) == 3
        assert all(score == 1.0 for _, score in detections)
        for expected in sample_boxes:
            match = [box for box, _ in detections if box.class_id == expected.class_id][0]
            assert match.to_xyxy() == pytest.approx(expected.to_xyxy(), abs=1e-6)

    @settings(derandomize=True, max_examples=60, deadline=None)
    @given(boxes_in_image(), st.sampled_from([1, 2, 4]))
    def test_round_trip(self, boxes, stride):
        """Boxes on distinct keypoint cells survive splat then decode"""
        cells = [_keypoint_cell(box, stride) for box in boxes]
        assume(len(set(cells)) == len(cells))

        decoded = decode_labels(_as_prediction(boxes, stride), stride, max_dets=32, score_thresh=KEYPOINTS_ONLY)

        assert len(decoded) == len(boxes)
        remaining = list(decoded)
        for box in boxes:
            match = next(d for d in remaining if d.class_id == box.class_id
                         and all(abs(a - b) <= 1e-6 for a, b in zip(d.to_xyxy(), box.to_xyxy())))
            remaining.remove(match)

    def test_scores_sorted_and_capped(self):
        heatmap = torch.zeros(2, 8, 8)
        heatmap[0, 1, 1] = 0.7
        heatmap[1, 5, 5] = 0.9
        heatmap[0, 6, 1] = 0.8
        pred = PredictionTriplet(heatmap, torch.zeros(2, 8, 8), torch.ones(2, 8, 8))

        detections = decode(pred, stride=2, max_dets=2, score_thresh=0.5)

        assert [score for _, score in detections] == pytest.approx([0.9, 0.8])
        assert [box.class_id for box, _ in detections] == [1, 0]
        assert detections[0][0].to_xyxy() == (9.0, 9.0, 11.0, 11.0)

    def test_threshold_is_strict(self):
        heatmap = torch.zeros(1, 4, 4, dtype=torch.float64)
        heatmap[0, 2, 2] = 0.6
        pred = PredictionTriplet(heatmap, torch.zeros(2, 4, 4), torch.ones(2, 4, 4))

        assert decode(pred, stride=1, score_thresh=0.6) == []

    def test_boxes_clamped_to_image(self):
        heatmap = torch.zeros(1, 4, 4)
        heatmap[0, 0, 3] = 0.9
        pred = PredictionTriplet(heatmap, torch.zeros(2, 4, 4), torch.full((2, 4, 4), 4.0))

        (box, _), = decode(pred, stride=4, score_thresh=0.5)

        assert box.to_xyxy() == (4.0, 0.0, 16.0, 8.0)
