""" Keypoint focal loss, offset/size regression losses and their weighted sum """

import logging

from dataclasses import dataclass
from typing import Optional

import torch

from torch import Tensor

from labelfactory.labels.targets import TargetTriplet
from labelfactory.losses import TrainingDivergedError

LOG = logging.getLogger(__name__)

# Predicted heatmaps are kept this far from 0 and 1 before taking logs
HEATMAP_EPS = 1e-4


@dataclass
class PredictionTriplet:
    """ Head outputs on the target grid: heatmap in (0, 1), offsets and sizes unconstrained """
    heatmap: Tensor
    offsets: Tensor
    sizes: Tensor

    def detach(self) -> "PredictionTriplet":
        return PredictionTriplet(self.heatmap.detach(), self.offsets.detach(), self.sizes.detach())

    def __getitem__(self, index: int) -> "PredictionTriplet":
        """ One sample out of a batched prediction """
        return PredictionTriplet(self.heatmap[index], self.offsets[index], self.sizes[index])


@dataclass
class DetectionLossParts:
    heatmap: Tensor
    offset: Tensor
    size: Tensor

    def total(self, lambda_off: float = 1.0, lambda_size: float = 0.5, iteration: Optional[int] = None) -> Tensor:
        """ L_k + lambda_off * L_off + lambda_size * L_size, refusing non-finite components """
        for name, value in (("heatmap", self.heatmap), ("offset", self.offset), ("size", self.size)):
            if not torch.isfinite(torch.as_tensor(value)).all():
                raise TrainingDivergedError(name, iteration, float(torch.as_tensor(value).detach()))
        return self.heatmap + lambda_off * self.offset + lambda_size * self.size


def keypoint_focal_loss(pred: Tensor, target: Tensor, alpha: float = 2.0, beta: float = 4.0) -> Tensor:
    """
    Penalty-reduced pixelwise focal loss, normalized by the keypoint count
    (cells where the target is exactly 1); no keypoints normalizes by 1.
    """
    if pred.shape != target.shape:
        raise ValueError(f"Prediction shape {list(pred.shape)} does not match target {list(target.shape)}")
    target = target.to(pred.dtype)
    pred = pred.clamp(HEATMAP_EPS, 1 - HEATMAP_EPS)

    positive = target == 1
    pos_term = (1 - pred).pow(alpha) * torch.log(pred)
    neg_term = (1 - target).pow(beta) * pred.pow(alpha) * torch.log(1 - pred)
    summed = torch.where(positive, pos_term, neg_term).sum()

    n_keypoints = max(int(positive.sum()), 1)
    return -summed / n_keypoints


def offset_and_size_losses(pred: PredictionTriplet, target: TargetTriplet) -> tuple[Tensor, Tensor]:
    """
    L1 losses at keypoint cells only, summed over the two coordinates and
    averaged over keypoints. An empty mask gives (0, 0).
    """
    if pred.offsets.shape != target.offsets.shape or pred.sizes.shape != target.sizes.shape:
        raise ValueError("Offset/size prediction shapes do not match the targets")

    mask = target.mask.unsqueeze(-3).to(pred.offsets.dtype)
    n_keypoints = int(target.mask.sum())
    if n_keypoints == 0:
        zero = (pred.offsets.sum() + pred.sizes.sum()) * 0.0
        return zero, zero

    target_offsets = target.offsets.to(pred.offsets.dtype)
    target_sizes = target.sizes.to(pred.sizes.dtype)
    offset_loss = ((pred.offsets - target_offsets).abs() * mask).sum() / n_keypoints
    size_loss = ((pred.sizes - target_sizes).abs() * mask).sum() / n_keypoints
    return offset_loss, size_loss


def detection_loss_parts(pred: PredictionTriplet, target: TargetTriplet,
                         alpha: float = 2.0, beta: float = 4.0) -> DetectionLossParts:
    offset, size = offset_and_size_losses(pred, target)
    return DetectionLossParts(
        heatmap=keypoint_focal_loss(pred.heatmap, target.heatmap, alpha, beta),
        offset=offset,
        size=size,
    )


def detection_loss(pred: PredictionTriplet, target: TargetTriplet, lambda_off: float = 1.0,
                   lambda_size: float = 0.5, alpha: float = 2.0, beta: float = 4.0,
                   iteration: Optional[int] = None) -> Tensor:
    return detection_loss_parts(pred, target, alpha, beta).total(lambda_off, lambda_size, iteration)
