""" Detection metrics and the sample-diversity metric """

import logging
import math

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
import torch

from torch import Tensor

from labelfactory.embedding import Embedder
from labelfactory.labels.decode import Detection
from labelfactory.labels.targets import BoxLabel, LabelSet

LOG = logging.getLogger(__name__)

BoxLike = Union[BoxLabel, Sequence[float]]


def _xyxy(box: BoxLike) -> tuple[float, float, float, float]:
    if isinstance(box, BoxLabel):
        return box.to_xyxy()
    x_min, y_min, x_max, y_max = box
    return x_min, y_min, x_max, y_max


def iou(a: BoxLike, b: BoxLike) -> float:
    """ Intersection over union of two [x_min, y_min, x_max, y_max] boxes """
    ax0, ay0, ax1, ay1 = _xyxy(a)
    bx0, by0, bx1, by1 = _xyxy(b)
    inter_w = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    inter_h = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = inter_w * inter_h
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    if union <= 0:
        return 0.0
    return inter / union


@dataclass
class MatchResult:
    """ Score-ordered matching outcome and all-point AP for one class """
    class_id: int
    n_ground_truth: int
    scores: np.ndarray = field(repr=False)
    true_positive: np.ndarray = field(repr=False)
    precision: np.ndarray = field(repr=False)
    recall: np.ndarray = field(repr=False)
    ap: float = 0.0


def all_point_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """ Area under the monotone precision envelope, summed where recall changes """
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    changes = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[changes + 1] - mrec[changes]) * mpre[changes + 1]))


def match_class(class_id: int, preds: Sequence[Sequence[Detection]], gts: Sequence[LabelSet],
                iou_thresh: float = 0.5) -> MatchResult:
    """
    Greedy matching for one class: detections in descending score order
    (stable for ties) claim the ground truth they overlap most in their
    image. A detection whose best ground truth is taken or below
    ``iou_thresh`` is a false positive.
    """
    gt_boxes = [[box for box in labels if box.class_id == class_id] for labels in gts]
    n_ground_truth = sum(len(boxes) for boxes in gt_boxes)

    entries = [
        (score, image_index, box)
        for image_index, detections in enumerate(preds)
        for box, score in detections
        if box.class_id == class_id
    ]
    scores = np.array([entry[0] for entry in entries], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")

    claimed = [np.zeros(len(boxes), dtype=bool) for boxes in gt_boxes]
    true_positive = np.zeros(len(entries), dtype=bool)
    for rank, index in enumerate(order):
        _, image_index, box = entries[index]
        candidates = gt_boxes[image_index]
        if not candidates:
            continue
        overlaps = [iou(box, gt) for gt in candidates]
        best = int(np.argmax(overlaps))
        if overlaps[best] >= iou_thresh and not claimed[image_index][best]:
            claimed[image_index][best] = True
            true_positive[rank] = True

    tp = np.cumsum(true_positive)
    fp = np.cumsum(~true_positive)
    recall = tp / max(n_ground_truth, 1)
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
    return MatchResult(
        class_id=class_id,
        n_ground_truth=n_ground_truth,
        scores=scores[order],
        true_positive=true_positive,
        precision=precision,
        recall=recall,
        ap=all_point_ap(recall, precision),
    )


def average_precision(preds: Sequence[Sequence[Detection]], gts: Sequence[LabelSet],
                      iou_thresh: float = 0.5) -> dict[int, MatchResult]:
    """
    Per-class AP over a set of images.

    Args:
        preds: Scored detections per image
        gts: Ground-truth LabelSet per image, same order as ``preds``

    Returns:
        class_id -> MatchResult; classes without ground truth are absent
    """
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} prediction lists for {len(gts)} images")
    classes = sorted({box.class_id for labels in gts for box in labels})
    return {class_id: match_class(class_id, preds, gts, iou_thresh) for class_id in classes}


def mean_average_precision(results: dict[int, MatchResult]) -> float:
    """ Mean AP over classes with ground truth; NaN when there are none """
    if not results:
        return math.nan
    return float(np.mean([result.ap for result in results.values()]))


def pairwise_diversity(images: Tensor, embedder: Embedder) -> float:
    """ Mean over unordered pairs of 1 - cosine similarity between image embeddings """
    if images.shape[0] < 2:
        raise ValueError(f"Diversity needs at least 2 images, got {images.shape[0]}")
    with torch.no_grad():
        embeddings = embedder.embed_image(images).to(torch.float64)
    return diversity_of_embeddings(embeddings)


def diversity_of_embeddings(embeddings: Tensor) -> float:
    unit = embeddings / embeddings.norm(dim=1, keepdim=True).clamp_min(1e-12)
    cosine = unit @ unit.T
    rows, cols = torch.triu_indices(unit.shape[0], unit.shape[0], offset=1)
    distances = (1.0 - cosine[rows, cols]).clamp(0.0, 2.0)
    return float(distances.mean())
