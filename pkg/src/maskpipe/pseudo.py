"""Aggregate labeled mask candidates into per-image semantic maps.

Per image: drop candidates at or below the confidence threshold (keeping
the single best one when everything falls below it), then resolve
overlaps per pixel so the most confident mask owns every contested
pixel. Uncovered pixels stay background (label 0).

Per-pixel resolution deliberately preserves the non-overlapping part of
weaker masks; classic whole-mask suppression is available behind the
``nms_iou`` knob for ablations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError
from .formats import ObjectCandidate, candidate_from_mask
from .validation import check_fraction, check_unit_interval


@dataclass
class SegmentationMap:
    """Per-pixel cluster labels for one image; 0 is background."""

    image_id: str
    labels: np.ndarray
    n_clusters: int

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int32)
        if self.labels.ndim != 2:
            raise ValidationError("labels must be a 2-D image")
        if self.labels.min(initial=0) < 0 or self.labels.max(initial=0) > self.n_clusters:
            raise ValidationError(
                f"label values must lie in [0, {self.n_clusters}]"
            )


@dataclass
class PipelineConfig:
    """Knobs shared by the distill / cluster / aggregate stages."""

    tau: float = 0.9
    k_fraction: float = 0.4
    kmeans_k: int = 20
    component_mode: str = "source-component"
    seed: int = 0
    top_fraction: float = 0.2
    restarts: int = 10
    max_iter: int = 300
    normalize_embeddings: bool = False
    nms_iou: float | None = None

    def __post_init__(self):
        check_unit_interval(self.tau, "tau")
        check_fraction(self.k_fraction, "k_fraction")
        check_fraction(self.top_fraction, "top_fraction")
        if self.nms_iou is not None:
            check_unit_interval(self.nms_iou, "nms_iou")


def filter_by_confidence(records: Sequence[ObjectCandidate],
                         tau: float) -> list[ObjectCandidate]:
    """Keep records scoring strictly above tau.

    When none qualify, fall back to the single highest-scoring record
    (first in manifest order on ties) so every image keeps a mask.
    """
    check_unit_interval(tau, "tau")
    kept = [r for r in records if r.score > tau]
    if kept or not records:
        return kept
    best = max(range(len(records)), key=lambda i: (records[i].score, -i))
    return [records[best]]


def _mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = int(np.logical_and(a, b).sum())
    union = int(np.logical_or(a, b).sum())
    return inter / union if union else 0.0


def suppress_overlapping_masks(records: Sequence[ObjectCandidate],
                               iou_threshold: float) -> list[ObjectCandidate]:
    """Greedy whole-mask NMS by descending score (manifest order on ties)."""
    order = sorted(range(len(records)), key=lambda i: (-records[i].score, i))
    kept: list[int] = []
    masks: list[np.ndarray] = []
    for i in order:
        mask = records[i].decode()
        if all(_mask_iou(mask, m) <= iou_threshold for m in masks):
            kept.append(i)
            masks.append(mask)
    return [records[i] for i in sorted(kept)]


def resolve_overlaps(records: Sequence[ObjectCandidate]) -> SegmentationMap:
    """Per-pixel winner-take-all by confidence.

    Masks are painted in ascending score order so the highest score owns
    every contested pixel; on equal scores the record earlier in
    manifest order wins. Pixels covered by no mask stay 0.
    """
    if not records:
        raise ValidationError("resolve_overlaps needs at least one record")
    shape = tuple(records[0].rle["size"])
    image_id = records[0].image_id
    for record in records:
        if tuple(record.rle["size"]) != shape:
            raise ValidationError(
                f"mask shapes differ within image {image_id!r}: "
                f"{tuple(record.rle['size'])} vs {shape}"
            )
        if record.label is None:
            raise ValidationError(
                f"record for image {image_id!r} has no cluster label"
            )
    labels = np.zeros(shape, dtype=np.int32)
    # ascending score; among equal scores paint later records first so
    # the earlier record overwrites them on contested pixels
    order = sorted(range(len(records)), key=lambda i: (records[i].score, -i))
    for i in order:
        labels[records[i].decode() == 1] = records[i].label
    return SegmentationMap(image_id=image_id, labels=labels,
                           n_clusters=max(r.label for r in records))


def group_by_image(records: Iterable[ObjectCandidate]) -> dict[str, list[ObjectCandidate]]:
    """Group records by image id, preserving manifest order within each."""
    groups: dict[str, list[ObjectCandidate]] = {}
    for record in records:
        groups.setdefault(record.image_id, []).append(record)
    return dict(sorted(groups.items()))


def build_pseudo_ground_truth(records: Sequence[ObjectCandidate],
                              config: PipelineConfig) -> list[SegmentationMap]:
    """Filter and aggregate a labeled manifest into one map per image."""
    maps = []
    for image_id, group in group_by_image(records).items():
        kept = filter_by_confidence(group, config.tau)
        if config.nms_iou is not None:
            kept = suppress_overlapping_masks(kept, config.nms_iou)
        seg = resolve_overlaps(kept)
        seg.n_clusters = max(seg.n_clusters, config.kmeans_k)
        maps.append(seg)
    return maps


def decompose_map(seg: SegmentationMap, score: float = 1.0) -> list[ObjectCandidate]:
    """One record per nonzero label present, in ascending label order."""
    records = []
    for value in np.unique(seg.labels):
        if value == 0:
            continue
        records.append(candidate_from_mask(
            seg.image_id, seg.labels == value, score=score, label=int(value)))
    return records
