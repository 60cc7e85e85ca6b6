"""
Compact keypoint detector: a small convolutional backbone feeding the same
heads, losses and decoder as the label-synthesis branch.
"""

import copy
import logging

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

from torch import Tensor, nn

from labelfactory.configuration import FactoryConfig
from labelfactory.labels.decode import Detection, decode
from labelfactory.labels.head import LabelHead, concat_upsampled
from labelfactory.labels.losses import PredictionTriplet, detection_loss_parts
from labelfactory.labels.targets import LabelSet, TargetTriplet, splat_targets, stack_targets
from labelfactory.networks.checkpoint import load_checkpoint, save_checkpoint

LOG = logging.getLogger(__name__)


def _conv(in_channels: int, out_channels: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, kernel_size=3, stride=stride, padding=1),
        nn.ReLU(inplace=True),
    )


class KeypointDetector(nn.Module):
    """
    Four-level backbone (full, 1/2, 1/4 and 1/8 resolution), every level
    resized to the heatmap grid and concatenated before the heads.
    """

    def __init__(self, num_classes: int, width: int = 32, stride: int = 1, resolution: int = 64):
        super().__init__()
        self.num_classes = num_classes
        self.width = width
        self.stride = stride
        self.resolution = resolution

        self.stem = nn.Sequential(_conv(3, width), _conv(width, width))
        self.down1 = _conv(width, 2 * width, stride=2)
        self.down2 = _conv(2 * width, 4 * width, stride=2)
        self.down3 = _conv(4 * width, 4 * width, stride=2)
        self.head = LabelHead(11 * width, num_classes, hidden=2 * width, stride=stride)

    @classmethod
    def from_config(cls, config: FactoryConfig) -> "KeypointDetector":
        return cls(config.num_classes, config.detector.width, config.label.stride, config.generator.resolution)

    def architecture(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "width": self.width,
            "stride": self.stride,
            "resolution": self.resolution,
        }

    def forward(self, images: Tensor) -> PredictionTriplet:
        if images.dim() != 4 or tuple(images.shape[-2:]) != (self.resolution, self.resolution):
            raise ValueError(f"Expected images [batch, 3, {self.resolution}, {self.resolution}], "
                             f"got {list(images.shape)}")
        x0 = self.stem(images)
        x1 = self.down1(x0)
        x2 = self.down2(x1)
        x3 = self.down3(x2)
        features = concat_upsampled([x0, x1, x2, x3], self.resolution // self.stride)
        return self.head(features)


@dataclass
class DetectorResult:
    detector: KeypointDetector
    trace: list[float] = field(default_factory=list)


def encode_labels(label_sets: Sequence[LabelSet], config: FactoryConfig) -> TargetTriplet:
    side = config.generator.resolution
    return stack_targets([
        splat_targets(labels, side, side, config.label.stride, config.num_classes, config.label.min_overlap)
        for labels in label_sets
    ])


def train_detector(detector: KeypointDetector, images: Tensor, label_sets: Sequence[LabelSet],
                   config: FactoryConfig, iters: int, lr: float, seed: int = 0) -> list[float]:
    """ Minibatch Adam on the detection loss; mutates ``detector`` and returns the loss trace """
    if images.shape[0] == 0:
        raise ValueError("Detector training needs a non-empty dataset")
    if images.shape[0] != len(label_sets):
        raise ValueError(f"{images.shape[0]} images but {len(label_sets)} label sets")

    label = config.label
    targets = encode_labels(label_sets, config)
    optimizer = torch.optim.Adam(detector.parameters(), lr=lr, weight_decay=config.detector.weight_decay)
    rng = torch.Generator().manual_seed(seed)
    batch_size = min(config.detector.batch_size, images.shape[0])

    detector.train()
    trace = []
    for iteration in range(iters):
        picks = torch.randperm(images.shape[0], generator=rng)[:batch_size]
        batch_targets = TargetTriplet(
            heatmap=targets.heatmap[picks],
            offsets=targets.offsets[picks],
            sizes=targets.sizes[picks],
            mask=targets.mask[picks],
        )
        parts = detection_loss_parts(detector(images[picks]), batch_targets, label.focal_alpha, label.focal_beta)
        loss = parts.total(label.lambda_off, label.lambda_size, iteration)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        trace.append(float(loss.detach()))
        if config.adapt.log_every and iteration % config.adapt.log_every == 0:
            LOG.debug("detector %d/%d loss=%.4f", iteration, iters, trace[-1])
    detector.eval()
    return trace


def pretrain_source_detector(images: Tensor, label_sets: Sequence[LabelSet], config: FactoryConfig,
                             seed: int = 0) -> DetectorResult:
    """ Train a fresh detector on the labelled source dataset """
    if images.shape[0] == 0:
        raise ValueError("Source dataset is empty")
    torch.manual_seed(seed)
    detector = KeypointDetector.from_config(config)
    LOG.info("Pretraining source detector on %d images for %d iterations",
             images.shape[0], config.detector.pretrain_iters)
    trace = train_detector(detector, images, label_sets, config, config.detector.pretrain_iters,
                           config.detector.lr, seed)
    return DetectorResult(detector=detector, trace=trace)


def finetune_detector(source_detector: KeypointDetector, images: Tensor, label_sets: Sequence[LabelSet],
                      config: FactoryConfig, seed: int = 0, iters: Optional[int] = None) -> DetectorResult:
    """ Fine-tune a copy of ``source_detector``; the original is left untouched """
    if images.shape[0] == 0:
        raise ValueError("Fine-tuning dataset is empty")
    detector = copy.deepcopy(source_detector)
    iters = config.detector.finetune_iters if iters is None else iters
    LOG.info("Fine-tuning detector on %d images for %d iterations", images.shape[0], iters)
    trace = train_detector(detector, images, label_sets, config, iters, config.detector.finetune_lr, seed)
    return DetectorResult(detector=detector, trace=trace)


def detect(detector: KeypointDetector, images: Tensor, score_thresh: float = 0.0,
           max_dets: int = 32, batch_size: int = 32) -> list[list[Detection]]:
    """ Scored detections per image; a low threshold suits AP evaluation """
    detector.eval()
    results = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            pred = detector(images[start:start + batch_size])
            for i in range(pred.heatmap.shape[0]):
                results.append(decode(pred[i], detector.stride, max_dets, score_thresh,
                                      image_size=(detector.resolution, detector.resolution)))
    return results


def save_detector(detector: KeypointDetector, path: Path) -> None:
    save_checkpoint(path, dict(detector.state_dict()), "detector", detector.architecture())


def load_detector(path: Path) -> KeypointDetector:
    meta, state = load_checkpoint(path, kind="detector")
    detector = KeypointDetector(meta["num_classes"], meta["width"], meta["stride"], meta["resolution"])
    detector.load_state_dict(state)
    detector.eval()
    return detector
