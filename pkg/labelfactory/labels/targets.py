""" Box labels and their keypoint-heatmap encoding """

import logging
import math

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from torch import Tensor

LOG = logging.getLogger(__name__)

# Slack for box edges that went through an x, y, w, h float round trip
BOUNDS_TOLERANCE = 1e-6


@dataclass(frozen=True)
class BoxLabel:
    """ Axis-aligned box in pixels, top-left origin """
    class_id: int
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @classmethod
    def from_xywh(cls, class_id: int, bbox: Sequence[float]) -> "BoxLabel":
        x, y, w, h = bbox
        return cls(class_id, x, y, x + w, y + h)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def center(self) -> tuple[float, float]:
        return (self.x_min + self.x_max) / 2, (self.y_min + self.y_max) / 2

    def to_xywh(self) -> list[float]:
        return [self.x_min, self.y_min, self.width, self.height]

    def to_xyxy(self) -> tuple[float, float, float, float]:
        return self.x_min, self.y_min, self.x_max, self.y_max

    def check(self, width: int, height: int, num_classes: Optional[int] = None) -> None:
        """ Raise ValueError unless the box is non-degenerate and inside a width x height image """
        if num_classes is not None and not 0 <= self.class_id < num_classes:
            raise ValueError(f"class_id {self.class_id} outside [0, {num_classes})")
        if not (0 <= self.x_min < self.x_max <= width + BOUNDS_TOLERANCE
                and 0 <= self.y_min < self.y_max <= height + BOUNDS_TOLERANCE):
            raise ValueError(f"Box {self.to_xyxy()} is degenerate or outside a {width}x{height} image")


LabelSet = list[BoxLabel]


@dataclass
class TargetTriplet:
    """
    Dense training targets on the (H/r) x (W/r) grid, float64:

    - heatmap: [C, h, w], 1 exactly at each keypoint cell
    - offsets: [2, h, w], sub-cell position p/r - floor(p/r) as (x, y)
    - sizes:   [2, h, w], box (w, h) in grid units
    - mask:    [h, w] bool, True at keypoint cells

    A leading batch dimension is allowed on every field (see ``stack_targets``).
    """
    heatmap: Tensor
    offsets: Tensor
    sizes: Tensor
    mask: Tensor

    @property
    def num_keypoints(self) -> int:
        return int(self.mask.sum())


def stack_targets(targets: Sequence[TargetTriplet]) -> TargetTriplet:
    return TargetTriplet(
        heatmap=torch.stack([t.heatmap for t in targets]),
        offsets=torch.stack([t.offsets for t in targets]),
        sizes=torch.stack([t.sizes for t in targets]),
        mask=torch.stack([t.mask for t in targets]),
    )


def gaussian_radius(box_w: float, box_h: float, min_overlap: float = 0.7) -> float:
    """
    Largest center shift (same units as the box) that still keeps IoU >= ``min_overlap``
    in the worst of three cases: both corners shifted inward, both outward, or one of each.
    Each case is a quadratic in the radius; the smallest relevant root wins.
    """
    if box_w <= 0 or box_h <= 0:
        raise ValueError(f"Box sides must be positive, got {box_w}x{box_h}")
    if not 0.0 < min_overlap < 1.0:
        raise ValueError(f"min_overlap must lie in (0, 1), got {min_overlap}")

    perimeter = box_h + box_w
    area = box_w * box_h

    b1 = perimeter
    c1 = area * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 - math.sqrt(b1 ** 2 - 4 * c1)) / 2

    a2 = 4
    b2 = 2 * perimeter
    c2 = (1 - min_overlap) * area
    r2 = (b2 - math.sqrt(b2 ** 2 - 4 * a2 * c2)) / (2 * a2)

    a3 = 4 * min_overlap
    b3 = -2 * min_overlap * perimeter
    c3 = (min_overlap - 1) * area
    r3 = (-b3 + math.sqrt(b3 ** 2 - 4 * a3 * c3)) / (2 * a3)

    return max(0.0, min(r1, r2, r3))


def gaussian_sigma(radius: float) -> float:
    return max(radius, 1.0) / 3.0


def splat_targets(boxes: Sequence[BoxLabel], width: int, height: int, stride: int,
                  num_classes: int, min_overlap: float = 0.7) -> TargetTriplet:
    """
    Encode boxes as keypoint heatmap, offset and size targets.

    Every object writes a full-grid Gaussian around its keypoint cell
    floor(center / stride) into its class channel; overlapping Gaussians
    combine by elementwise max. When two objects share a keypoint cell,
    the larger box keeps the offset and size.

    Raises:
        ValueError: If the image side is not divisible by ``stride`` or a box is invalid
    """
    if width % stride or height % stride:
        raise ValueError(f"Image {width}x{height} not divisible by stride {stride}")
    grid_w, grid_h = width // stride, height // stride

    heatmap = np.zeros((num_classes, grid_h, grid_w), dtype=np.float64)
    offsets = np.zeros((2, grid_h, grid_w), dtype=np.float64)
    sizes = np.zeros((2, grid_h, grid_w), dtype=np.float64)
    mask = np.zeros((grid_h, grid_w), dtype=bool)
    owner_area = np.zeros((grid_h, grid_w), dtype=np.float64)

    ys, xs = np.mgrid[0:grid_h, 0:grid_w].astype(np.float64)

    for box in boxes:
        box.check(width, height, num_classes)
        cx, cy = box.center
        px, py = cx / stride, cy / stride
        cell_x = min(int(math.floor(px)), grid_w - 1)
        cell_y = min(int(math.floor(py)), grid_h - 1)
        box_w, box_h = box.width / stride, box.height / stride

        sigma = gaussian_sigma(gaussian_radius(box_w, box_h, min_overlap))
        bump = np.exp(-((xs - cell_x) ** 2 + (ys - cell_y) ** 2) / (2 * sigma ** 2))
        np.maximum(heatmap[box.class_id], bump, out=heatmap[box.class_id])

        area = box.width * box.height
        if mask[cell_y, cell_x]:
            LOG.debug("Keypoint collision at cell (%d, %d)", cell_x, cell_y)
            if area <= owner_area[cell_y, cell_x]:
                continue
        mask[cell_y, cell_x] = True
        owner_area[cell_y, cell_x] = area
        offsets[:, cell_y, cell_x] = (px - cell_x, py - cell_y)
        sizes[:, cell_y, cell_x] = (box_w, box_h)

    return TargetTriplet(
        heatmap=torch.from_numpy(heatmap),
        offsets=torch.from_numpy(offsets),
        sizes=torch.from_numpy(sizes),
        mask=torch.from_numpy(mask),
    )
