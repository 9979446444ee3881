"""Convert an external detector's instance dump into a candidate manifest.

Input: a JSON file holding a list of records, each with ``image_id``,
``score``, an optional class (``category_id`` or ``label``), and the
mask either as uncompressed column-major RLE (``segmentation`` with
``size``/``counts``) or as a nested binary array (``mask``). Scores are
passed through unmodified; bounding boxes are recomputed as the tight
box of the decoded mask, which the manifest format requires.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .export import ConversionError, _atomic_bytes


def _decode_segmentation(record: dict) -> np.ndarray:
    if "segmentation" in record:
        seg = record["segmentation"]
        h, w = (int(v) for v in seg["size"])
        counts = [int(c) for c in seg["counts"]]
        if any(c < 0 for c in counts) or sum(counts) != h * w:
            raise ConversionError("RLE counts do not cover the mask area")
        values = np.arange(len(counts)) % 2
        return np.repeat(values, counts).reshape((h, w), order="F").astype(np.uint8)
    if "mask" in record:
        mask = np.asarray(record["mask"], dtype=np.uint8)
        if mask.ndim != 2:
            raise ConversionError("mask must be a 2-D array")
        return (mask != 0).astype(np.uint8)
    raise ConversionError("record has neither 'segmentation' nor 'mask'")


def _encode_rle(mask: np.ndarray) -> dict:
    h, w = mask.shape
    flat = mask.ravel(order="F")
    counts: list[int] = []
    if flat.size:
        boundaries = np.flatnonzero(np.diff(flat)) + 1
        runs = np.diff(np.concatenate(([0], boundaries, [flat.size])))
        if flat[0] == 1:
            counts.append(0)
        counts.extend(int(r) for r in runs)
    else:
        counts.append(0)
    return {"size": [h, w], "counts": counts}


def _tight_bbox(mask: np.ndarray) -> list[int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ConversionError("instance mask is empty")
    return [int(cols[0]), int(rows[0]),
            int(cols[-1] - cols[0] + 1), int(rows[-1] - rows[0] + 1)]


def convert_record(record: dict) -> dict:
    image_id = str(record["image_id"])
    score = float(record["score"])
    if not (0.0 <= score <= 1.0):
        raise ConversionError(f"score {score} outside [0, 1]")
    label = record.get("category_id", record.get("label"))
    if label is not None:
        label = int(label)
        if label < 1:
            raise ConversionError(f"class id must be >= 1, got {label}")
    mask = _decode_segmentation(record)
    return {
        "image_id": image_id,
        "score": score,
        "label": label,
        "bbox": _tight_bbox(mask),
        "rle": _encode_rle(mask),
    }


def convert_detections(dump_path: str | Path, manifest_path: str | Path) -> int:
    """Convert a whole dump; returns the number of records written."""
    try:
        records = json.loads(Path(dump_path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConversionError(f"{dump_path}: not valid JSON: {exc}") from exc
    if not isinstance(records, list):
        raise ConversionError(f"{dump_path}: expected a JSON list of instances")
    converted = []
    for index, record in enumerate(records):
        try:
            converted.append(convert_record(record))
        except (ConversionError, KeyError, TypeError, ValueError) as exc:
            raise ConversionError(f"record {index}: {exc}") from exc
    converted.sort(key=lambda r: r["image_id"])
    lines = "".join(json.dumps(r, separators=(",", ":")) + "\n" for r in converted)
    _atomic_bytes(Path(manifest_path), lines.encode("utf-8"))
    return len(converted)
