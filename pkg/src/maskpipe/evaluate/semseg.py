"""Hungarian-matched clustering evaluation: confusion matrix and mean IoU."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..errors import ValidationError
from .assignment import hungarian_match


@dataclass
class ConfusionMatrix:
    """Pixel co-occurrence counts: rows are prediction values, columns GT."""

    counts: np.ndarray

    @property
    def pred_totals(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def gt_totals(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class SemsegReport:
    """Per-class IoU after optimal cluster-to-class matching."""

    per_class_iou: dict[int, float]
    miou: float
    assignment: dict[int, int]
    excluded_classes: list[int] = field(default_factory=list)
    unmatched_gt_classes: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "miou": self.miou,
            "per_class_iou": {str(k): v for k, v in sorted(self.per_class_iou.items())},
            "assignment": {str(k): v for k, v in sorted(self.assignment.items())},
            "excluded_classes": self.excluded_classes,
            "unmatched_gt_classes": self.unmatched_gt_classes,
        }


def _paired_maps(pred_maps: Mapping[str, np.ndarray],
                 gt_maps: Mapping[str, np.ndarray]):
    if set(pred_maps) != set(gt_maps):
        missing = sorted(set(gt_maps) ^ set(pred_maps))
        raise ValidationError(f"prediction / ground-truth image ids differ: {missing}")
    for image_id in sorted(pred_maps):
        pred = np.asarray(pred_maps[image_id])
        gt = np.asarray(gt_maps[image_id])
        if pred.shape != gt.shape:
            raise ValidationError(
                f"map shapes differ for {image_id!r}: {pred.shape} vs {gt.shape}"
            )
        yield pred, gt


def confusion_matrix(pred_maps: Mapping[str, np.ndarray],
                     gt_maps: Mapping[str, np.ndarray]) -> ConfusionMatrix:
    """Joint pixel histogram over all images, aligned by image id."""
    pairs = list(_paired_maps(pred_maps, gt_maps))
    if not pairs:
        raise ValidationError("no maps to evaluate")
    n_pred = max(int(p.max()) for p, _ in pairs) + 1
    n_gt = max(int(g.max()) for _, g in pairs) + 1
    counts = np.zeros((n_pred, n_gt), dtype=np.int64)
    for pred, gt in pairs:
        joint = pred.astype(np.int64).ravel() * n_gt + gt.astype(np.int64).ravel()
        counts += np.bincount(joint, minlength=n_pred * n_gt).reshape(n_pred, n_gt)
    return ConfusionMatrix(counts=counts)


def match_clusters(confusion: ConfusionMatrix) -> dict[int, int]:
    """Optimal prediction-value to GT-class map; unmatched values go to -1."""
    assignment = hungarian_match(confusion.counts)
    return {row: int(col) for row, col in enumerate(assignment)}


def miou(pred_maps: Mapping[str, np.ndarray], gt_maps: Mapping[str, np.ndarray],
         assignment: Mapping[int, int]) -> SemsegReport:
    """Mean IoU over ground-truth classes after relabeling predictions.

    Unmatched prediction values map to background (0). Classes with no
    pixels on either side are excluded and flagged; GT classes that no
    prediction cluster matched score 0 and are flagged.
    """
    confusion = confusion_matrix(pred_maps, gt_maps)
    counts = confusion.counts
    n_pred, n_gt = counts.shape

    remapped = np.zeros((n_gt, n_gt), dtype=np.int64)
    for pred_value in range(n_pred):
        target = assignment.get(pred_value, -1)
        if target < 0 or target >= n_gt:
            target = 0
        remapped[target] += counts[pred_value]

    per_class: dict[int, float] = {}
    excluded: list[int] = []
    matched_targets = {v for v in assignment.values() if v is not None and v >= 0}
    unmatched_gt: list[int] = []
    for cls in range(n_gt):
        tp = int(remapped[cls, cls])
        fp = int(remapped[cls].sum()) - tp
        fn = int(remapped[:, cls].sum()) - tp
        denom = tp + fp + fn
        if denom == 0:
            excluded.append(cls)
            continue
        per_class[cls] = tp / denom
        if cls not in matched_targets:
            unmatched_gt.append(cls)
    if not per_class:
        raise ValidationError("every class is empty on both sides")
    mean = sum(per_class.values()) / len(per_class)
    return SemsegReport(per_class_iou=per_class, miou=mean,
                        assignment=dict(assignment), excluded_classes=excluded,
                        unmatched_gt_classes=unmatched_gt)


def evaluate_semseg(pred_maps: Mapping[str, np.ndarray],
                    gt_maps: Mapping[str, np.ndarray]) -> SemsegReport:
    """Match clusters optimally by pixel intersection, then score IoU."""
    confusion = confusion_matrix(pred_maps, gt_maps)
    return miou(pred_maps, gt_maps, match_clusters(confusion))
