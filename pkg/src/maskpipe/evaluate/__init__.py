"""Evaluation: Hungarian matching, mean IoU, and COCO-style mask AP."""

from .assignment import assignment_profit, hungarian_match
from .instseg import (
    CLASS_MODES,
    IOU_THRESHOLDS,
    PROTOCOLS,
    bbox_iou,
    cluster_class_assignment,
    mask_ap,
    mask_iou,
)
from .semseg import (
    ConfusionMatrix,
    SemsegReport,
    confusion_matrix,
    evaluate_semseg,
    match_clusters,
    miou,
)

__all__ = [
    "CLASS_MODES",
    "ConfusionMatrix",
    "IOU_THRESHOLDS",
    "PROTOCOLS",
    "SemsegReport",
    "assignment_profit",
    "bbox_iou",
    "cluster_class_assignment",
    "confusion_matrix",
    "evaluate_semseg",
    "hungarian_match",
    "mask_ap",
    "mask_iou",
    "match_clusters",
    "miou",
]
