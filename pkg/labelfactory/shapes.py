"""
Procedural "shapes" domains with analytically known boxes.

Every style draws the same scene layout (1-3 non-overlapping circles,
squares or triangles); only the appearance differs:

- source:  light gray filled shapes on gray noise
- outline: colored outlines on a warm tinted background
- pastel:  pastel filled shapes on a flat light background
"""

import colorsys
import logging

from typing import Sequence

import numpy as np
import torch

from scipy import ndimage
from torch import Tensor

from labelfactory.datasets import Dataset
from labelfactory.labels.targets import BoxLabel, LabelSet

LOG = logging.getLogger(__name__)

STYLES = ("source", "outline", "pastel")
SHAPE_CLASSES = ("circle", "square", "triangle")

# Object sides as fractions of the image side (10-24 px at 64 px)
MIN_OBJECT_FRACTION = 10 / 64
MAX_OBJECT_FRACTION = 24 / 64
MAX_OBJECTS = 3
PLACEMENT_ATTEMPTS = 50
OUTLINE_WIDTH = 2

# Fill ratio of the tight box: square 1.0, circle ~0.79, triangle ~0.5
SQUARE_FILL = 0.9
CIRCLE_FILL = 0.65
MIN_COMPONENT_FRACTION = 0.01


def shape_mask(kind: str, x0: int, y0: int, size: int, side: int) -> np.ndarray:
    """ Boolean [side, side] mask of one shape inside the box (x0, y0, size, size), sampled at pixel centers """
    ys, xs = np.mgrid[0:side, 0:side].astype(np.float64) + 0.5
    if kind == "circle":
        r = size / 2
        return (xs - (x0 + r)) ** 2 + (ys - (y0 + r)) ** 2 <= r ** 2
    if kind == "square":
        return (xs >= x0) & (xs <= x0 + size) & (ys >= y0) & (ys <= y0 + size)
    if kind == "triangle":
        depth = (ys - y0) / size
        half = depth * size / 2
        return (depth >= 0) & (depth <= 1) & (np.abs(xs - (x0 + size / 2)) <= half)
    raise ValueError(f"Unknown shape '{kind}'")


def _place(rng: np.random.Generator, side: int, count: int) -> list[tuple[int, int, int]]:
    low = max(4, int(round(side * MIN_OBJECT_FRACTION)))
    high = max(low + 1, int(round(side * MAX_OBJECT_FRACTION)))
    placed = []
    for _ in range(count):
        for _ in range(PLACEMENT_ATTEMPTS):
            size = int(rng.integers(low, high + 1))
            x0 = int(rng.integers(0, side - size + 1))
            y0 = int(rng.integers(0, side - size + 1))
            if all(x0 + size + 2 <= px or px + ps + 2 <= x0 or y0 + size + 2 <= py or py + ps + 2 <= y0
                   for px, py, ps in placed):
                placed.append((x0, y0, size))
                break
    return placed


def _background(rng: np.random.Generator, style: str, side: int) -> np.ndarray:
    if style == "source":
        noise = rng.normal(0.0, 0.08, size=(side, side))
        return np.repeat((0.45 + noise)[:, :, None], 3, axis=2)
    if style == "outline":
        tint = np.array([0.96, 0.86, 0.70]) + rng.normal(0.0, 0.02, size=3)
        return np.broadcast_to(tint, (side, side, 3)) + rng.normal(0.0, 0.02, size=(side, side, 3))
    if style == "pastel":
        return np.full((side, side, 3), 0.97)
    raise ValueError(f"Unknown style '{style}', expected one of {STYLES}")


def _paint(rng: np.random.Generator, canvas: np.ndarray, mask: np.ndarray, style: str) -> None:
    if style == "source":
        canvas[mask] = 0.85 + rng.normal(0.0, 0.03)
    elif style == "outline":
        interior = ndimage.binary_erosion(mask, iterations=OUTLINE_WIDTH)
        color = colorsys.hsv_to_rgb(rng.uniform(0.0, 1.0), 0.9, 0.8)
        canvas[mask & ~interior] = color
    else:
        color = np.array(colorsys.hsv_to_rgb(rng.uniform(0.0, 1.0), 0.6, 0.9))
        canvas[mask] = 0.5 * color + 0.5


def render_scene(rng: np.random.Generator, style: str, side: int = 64,
                 class_names: Sequence[str] = SHAPE_CLASSES) -> tuple[Tensor, LabelSet]:
    """
    Draw one scene.

    Returns:
        (image [3, side, side] float32 in [-1, 1], exact boxes)
    """
    if style not in STYLES:
        raise ValueError(f"Unknown style '{style}', expected one of {STYLES}")
    unknown = [name for name in class_names if name not in SHAPE_CLASSES]
    if unknown:
        raise ValueError(f"Shapes domain cannot draw classes {unknown}")

    # layout draws come first so every style shares it
    placements = _place(rng, side, int(rng.integers(1, MAX_OBJECTS + 1)))
    class_ids = [int(rng.integers(0, len(class_names))) for _ in placements]

    canvas = _background(rng, style, side).copy()
    boxes = []
    for (x0, y0, size), class_id in zip(placements, class_ids):
        _paint(rng, canvas, shape_mask(class_names[class_id], x0, y0, size, side), style)
        boxes.append(BoxLabel(class_id, float(x0), float(y0), float(x0 + size), float(y0 + size)))

    image = torch.from_numpy(np.clip(canvas, 0.0, 1.0).astype(np.float32) * 2 - 1).permute(2, 0, 1)
    return image.contiguous(), boxes


def scene_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def make_split(style: str, n: int, seed: int, side: int = 64,
               class_names: Sequence[str] = SHAPE_CLASSES) -> Dataset:
    """ ``n`` labelled scenes of one style; scene i depends only on (seed, i) """
    images, label_sets = [], []
    for index in range(n):
        image, boxes = render_scene(scene_rng(seed, index), style, side, class_names)
        images.append(image)
        label_sets.append(boxes)
    LOG.debug("Rendered %d '%s' scenes at %dpx (seed %d)", n, style, side, seed)
    pixels = torch.stack(images) if images else torch.zeros(0, 3, side, side)
    return Dataset.from_labels(pixels, label_sets, class_names)


def annotate_by_inspection(image: Tensor, class_names: Sequence[str] = SHAPE_CLASSES,
                           threshold: float = 0.25) -> LabelSet:
    """
    Label a shapes image by looking at it: foreground = pixels far from the
    border colour, holes filled, one box per connected component, class
    from how much of its box the component fills.
    """
    array = ((image.detach().cpu().to(torch.float64) + 1) / 2).permute(1, 2, 0).numpy()
    side_h, side_w = array.shape[:2]
    border = np.concatenate([array[0], array[-1], array[:, 0], array[:, -1]])
    background = np.median(border, axis=0)

    foreground = np.linalg.norm(array - background, axis=2) > threshold
    foreground = ndimage.binary_fill_holes(foreground)
    components, count = ndimage.label(foreground)
    min_area = MIN_COMPONENT_FRACTION * side_h * side_w

    boxes = []
    for index, slices in enumerate(ndimage.find_objects(components), start=1):
        if slices is None:
            continue
        rows, cols = slices
        area = int((components[slices] == index).sum())
        if area < min_area:
            continue
        box_area = (rows.stop - rows.start) * (cols.stop - cols.start)
        fill = area / box_area
        if fill > SQUARE_FILL:
            kind = "square"
        elif fill > CIRCLE_FILL:
            kind = "circle"
        else:
            kind = "triangle"
        if kind not in class_names:
            continue
        boxes.append(BoxLabel(list(class_names).index(kind), float(cols.start), float(rows.start),
                              float(cols.stop), float(rows.stop)))
    LOG.debug("Inspection found %d of %d components", len(boxes), count)
    return boxes
