"""COCO-style mask average precision under single- and multi-object protocols.

Matching follows the usual COCO semantics: per image, predictions are
taken in descending score order and greedily matched to the unmatched
ground-truth mask with the highest IoU, counting as true positives at
IoU >= threshold; the precision-recall curve gets a monotone envelope
and is sampled at 101 recall points; the headline AP averages the ten
thresholds 0.50:0.05:0.95. Ties (equal scores, equal IoUs) resolve in
manifest order.

The single-object protocol first reduces every image to its single most
confident prediction and to the one ground-truth object with the
largest bounding-box IoU against it.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from ..errors import ParameterError, ValidationError
from ..formats import ObjectCandidate
from .assignment import hungarian_match

IOU_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))
# i/100 rounds differently from linspace in the last ulp; the division
# form matches how recall ratios themselves are computed
RECALL_POINTS = np.array([i / 100.0 for i in range(101)])
MAX_DETECTIONS = 100

PROTOCOLS = ("multi", "single")
CLASS_MODES = ("agnostic", "semantic")


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Exact IoU from integer intersection and union counts."""
    if a.shape != b.shape:
        raise ValidationError(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = int(np.logical_and(a, b).sum())
    union = int(np.logical_or(a, b).sum())
    return inter / union if union else 0.0


def bbox_iou(a: Sequence[int], b: Sequence[int]) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = max(0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return inter / union if union else 0.0


class _Det:
    __slots__ = ("record", "order", "mask", "category")

    def __init__(self, record: ObjectCandidate, order: int, category):
        self.record = record
        self.order = order
        self.mask = record.decode()
        self.category = category


def _index_records(records: Sequence[ObjectCandidate], categories) -> dict[str, list[_Det]]:
    grouped: dict[str, list[_Det]] = {}
    for order, record in enumerate(records):
        grouped.setdefault(record.image_id, []).append(
            _Det(record, order, categories[order]))
    return grouped


def _reduce_single(preds: dict[str, list[_Det]],
                   gts: dict[str, list[_Det]]):
    """Keep the top-scoring prediction per image and its best-box GT."""
    new_preds: dict[str, list[_Det]] = {}
    new_gts: dict[str, list[_Det]] = {}
    for image_id, dets in preds.items():
        best = min(dets, key=lambda d: (-d.record.score, d.order))
        new_preds[image_id] = [best]
        candidates = gts.get(image_id, [])
        if candidates:
            chosen = max(candidates,
                         key=lambda g: (bbox_iou(g.record.bbox, best.record.bbox), -g.order))
            new_gts[image_id] = [chosen]
    return new_preds, new_gts


def _greedy_tp_flags(iou: np.ndarray, threshold: float) -> list[bool]:
    """Rows are score-ordered detections; first GT wins exact IoU ties."""
    n_det, n_gt = iou.shape
    taken = np.zeros(n_gt, dtype=bool)
    flags = []
    for d in range(n_det):
        best_g = -1
        best_iou = threshold
        for g in range(n_gt):
            if taken[g]:
                continue
            value = iou[d, g]
            if best_g < 0:
                if value >= threshold:
                    best_g, best_iou = g, value
            elif value > best_iou:
                best_g, best_iou = g, value
        if best_g >= 0:
            taken[best_g] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def _ap_from_curve(flags: Sequence[bool], n_gt: int) -> float:
    """101-point interpolated AP with a monotone precision envelope."""
    if n_gt == 0:
        raise ValidationError("AP undefined without ground truth")
    if not flags:
        return 0.0
    tp = np.cumsum(flags, dtype=np.float64)
    fp = np.cumsum([not f for f in flags], dtype=np.float64)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    for i in range(len(precision) - 1, 0, -1):
        precision[i - 1] = max(precision[i - 1], precision[i])
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = [precision[i] if i < len(precision) else 0.0 for i in idx]
    return float(np.mean(sampled))


def mask_ap(pred_records: Sequence[ObjectCandidate],
            gt_records: Sequence[ObjectCandidate],
            protocol: str = "multi",
            class_mode: str = "agnostic",
            assignment: Mapping[int, int] | None = None,
            with_per_class: bool = False) -> dict:
    """AP triple (ap, ap50, ap75) for one protocol / class-mode combination.

    In semantic mode every prediction needs a cluster label and
    ``assignment`` maps cluster labels to ground-truth class labels;
    predictions of unassigned clusters can never match and are dropped.
    ``with_per_class`` adds a per-class AP50 breakdown to the result.
    """
    if protocol not in PROTOCOLS:
        raise ParameterError(f"protocol must be one of {PROTOCOLS}, got {protocol!r}")
    if class_mode not in CLASS_MODES:
        raise ParameterError(f"class_mode must be one of {CLASS_MODES}, got {class_mode!r}")

    if class_mode == "semantic":
        if assignment is None:
            raise ValidationError("semantic evaluation requires a cluster-to-class assignment")
        for record in pred_records:
            if record.label is None:
                raise ValidationError(
                    f"prediction for image {record.image_id!r} has no cluster label"
                )
        pred_cats = [assignment.get(r.label, -1) for r in pred_records]
        gt_cats = []
        for record in gt_records:
            if record.label is None:
                raise ValidationError(
                    f"ground truth for image {record.image_id!r} has no class label"
                )
            gt_cats.append(record.label)
    else:
        pred_cats = [0] * len(pred_records)
        gt_cats = [0] * len(gt_records)

    preds = _index_records(pred_records, pred_cats)
    gts = _index_records(gt_records, gt_cats)
    if protocol == "single":
        preds, gts = _reduce_single(preds, gts)

    categories = sorted({d.category for dets in gts.values() for d in dets})
    if not categories:
        result = {"ap": 0.0, "ap50": 0.0, "ap75": 0.0}
        if with_per_class:
            result["per_class_ap50"] = {}
        return result

    # per (category, image): score-ordered detections capped at MAX_DETECTIONS,
    # their GT list, and the IoU matrix computed once
    scenes: dict[object, list[tuple[list[_Det], list[_Det], np.ndarray]]] = {
        category: [] for category in categories
    }
    image_ids = sorted(set(preds) | set(gts))
    for image_id in image_ids:
        for category in categories:
            dets = [d for d in preds.get(image_id, []) if d.category == category]
            dets.sort(key=lambda d: (-d.record.score, d.order))
            dets = dets[:MAX_DETECTIONS]
            gt_dets = [g for g in gts.get(image_id, []) if g.category == category]
            if not dets and not gt_dets:
                continue
            iou = np.zeros((len(dets), len(gt_dets)), dtype=np.float64)
            for di, det in enumerate(dets):
                for gi, gt in enumerate(gt_dets):
                    iou[di, gi] = mask_iou(det.mask, gt.mask)
            scenes[category].append((dets, gt_dets, iou))

    per_threshold: list[float] = []
    ap50 = ap75 = 0.0
    per_class_ap50: dict = {}
    for threshold in IOU_THRESHOLDS:
        class_aps = []
        for category in categories:
            entries: list[tuple[float, int, bool]] = []
            n_gt = 0
            for dets, gt_dets, iou in scenes[category]:
                flags = _greedy_tp_flags(iou, threshold)
                for det, flag in zip(dets, flags):
                    entries.append((det.record.score, det.order, flag))
                n_gt += len(gt_dets)
            if n_gt == 0:
                continue
            entries.sort(key=lambda e: (-e[0], e[1]))
            class_ap = _ap_from_curve([e[2] for e in entries], n_gt)
            class_aps.append(class_ap)
            if threshold == 0.50:
                per_class_ap50[category] = class_ap
        value = float(np.mean(class_aps)) if class_aps else 0.0
        per_threshold.append(value)
        if threshold == 0.50:
            ap50 = value
        elif threshold == 0.75:
            ap75 = value
    result = {"ap": float(np.mean(per_threshold)), "ap50": ap50, "ap75": ap75}
    if with_per_class:
        result["per_class_ap50"] = per_class_ap50
    return result


def cluster_class_assignment(pred_records: Sequence[ObjectCandidate],
                             gt_records: Sequence[ObjectCandidate]) -> dict[int, int]:
    """Match cluster labels to GT classes by total mask-pixel intersection."""
    pred_labels = sorted({r.label for r in pred_records if r.label is not None})
    gt_labels = sorted({r.label for r in gt_records if r.label is not None})
    if not pred_labels or not gt_labels:
        raise ValidationError("both manifests need labels to match clusters to classes")
    pred_idx = {lbl: i for i, lbl in enumerate(pred_labels)}
    gt_idx = {lbl: j for j, lbl in enumerate(gt_labels)}
    profit = np.zeros((len(pred_labels), len(gt_labels)), dtype=np.float64)
    gt_by_image: dict[str, list[ObjectCandidate]] = {}
    for record in gt_records:
        gt_by_image.setdefault(record.image_id, []).append(record)
    for pred in pred_records:
        pred_mask = pred.decode()
        for gt in gt_by_image.get(pred.image_id, []):
            inter = int(np.logical_and(pred_mask, gt.decode()).sum())
            profit[pred_idx[pred.label], gt_idx[gt.label]] += inter
    matched = hungarian_match(profit)
    return {
        pred_labels[i]: gt_labels[j] if j >= 0 else -1
        for i, j in enumerate(matched)
    }
