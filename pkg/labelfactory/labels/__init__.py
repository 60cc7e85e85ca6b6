from .targets import BoxLabel, LabelSet, TargetTriplet, gaussian_radius, splat_targets, stack_targets
from .losses import (
    DetectionLossParts,
    PredictionTriplet,
    detection_loss,
    keypoint_focal_loss,
    offset_and_size_losses,
)
from .decode import Detection, decode, decode_labels
from .head import (
    LabelHead,
    LabelHeadResult,
    extract_features,
    load_label_head,
    predict_labels,
    save_label_head,
    train_label_head,
)
