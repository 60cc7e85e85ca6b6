""" Peak extraction from predicted heatmaps back to boxes """

import logging

from typing import Optional

import torch
import torch.nn.functional as F

from labelfactory.labels.losses import PredictionTriplet
from labelfactory.labels.targets import BoxLabel, LabelSet

LOG = logging.getLogger(__name__)

Detection = tuple[BoxLabel, float]


def local_maxima(heatmap: torch.Tensor) -> torch.Tensor:
    """ Boolean mask of cells not exceeded by any 3x3 neighbour in the same channel (plateaus count) """
    pooled = F.max_pool2d(heatmap.unsqueeze(0), kernel_size=3, stride=1, padding=1).squeeze(0)
    return heatmap >= pooled


def decode(pred: PredictionTriplet, stride: int, max_dets: int = 32, score_thresh: float = 0.6,
           image_size: Optional[tuple[int, int]] = None) -> list[Detection]:
    """
    Turn one sample's prediction into scored boxes.

    Args:
        pred: Unbatched prediction, heatmap [C, h, w], offsets/sizes [2, h, w]
        stride: Pixels per grid cell
        max_dets: Keep at most this many detections, highest scores first
        score_thresh: Peaks must score strictly above this value
        image_size: (width, height) to clamp to; defaults to grid size * stride

    Returns:
        List of (BoxLabel, score), sorted by descending score
    """
    heatmap = pred.heatmap.detach().to(torch.float64)
    offsets = pred.offsets.detach().to(torch.float64)
    sizes = pred.sizes.detach().to(torch.float64)
    _, grid_h, grid_w = heatmap.shape
    width, height = image_size or (grid_w * stride, grid_h * stride)

    candidates = local_maxima(heatmap) & (heatmap > score_thresh)
    flat_scores = torch.where(candidates, heatmap, torch.full_like(heatmap, -1.0)).flatten()
    n_candidates = int(candidates.sum())
    if n_candidates == 0:
        return []

    scores, order = torch.sort(flat_scores, descending=True, stable=True)
    detections = []
    for score, index in zip(scores[:n_candidates].tolist(), order[:n_candidates].tolist()):
        if len(detections) >= max_dets:
            break
        class_id, rest = divmod(index, grid_h * grid_w)
        cell_y, cell_x = divmod(rest, grid_w)

        cx = (cell_x + float(offsets[0, cell_y, cell_x])) * stride
        cy = (cell_y + float(offsets[1, cell_y, cell_x])) * stride
        half_w = float(sizes[0, cell_y, cell_x]) * stride / 2
        half_h = float(sizes[1, cell_y, cell_x]) * stride / 2

        x_min, x_max = max(cx - half_w, 0.0), min(cx + half_w, float(width))
        y_min, y_max = max(cy - half_h, 0.0), min(cy + half_h, float(height))
        if x_max <= x_min or y_max <= y_min:
            continue
        detections.append((BoxLabel(class_id, x_min, y_min, x_max, y_max), score))

    return detections


def decode_labels(pred: PredictionTriplet, stride: int, max_dets: int = 32,
                  score_thresh: float = 0.6) -> LabelSet:
    return [box for box, _ in decode(pred, stride, max_dets, score_thresh)]
