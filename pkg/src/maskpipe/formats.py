"""File formats that decouple the pipeline from any neural-network runtime.

Implemented here:

* ``MDFP`` v1 feature packs - per-image transformer features (binary).
* Candidate manifests - one JSON object per line, streamable.
* Uncompressed RLE masks - column-major, zero-run first (COCO convention).
* 8-bit binary PGM (P5) label maps plus a JSON index file.
* ``MDKM`` k-means model sidecars and ``MDLC`` logits/targets containers.

All writers validate first and write through a temp file + rename, so a
failed write never leaves a partial file behind.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import (
    CorruptionError,
    EmptyMaskError,
    FormatError,
    ValidationError,
)

PACK_MAGIC = b"MDFP"
PACK_VERSION = 1
KMEANS_MAGIC = b"MDKM"
LOSS_MAGIC = b"MDLC"
LOSS_VERSION = 1

_U32 = struct.Struct("<I")


def _atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write bytes to ``path`` via a temp file in the same directory."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


# ---------------------------------------------------------------------------
# Feature packs
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class FeaturePack:
    """Per-image transformer features captured at the final attention block.

    Arrays are stored float32, matching the on-disk payload:

    * ``q_cls``: query vectors of the classification token, ``[heads, head_dim]``.
    * ``k_patch``: key vectors of the patch tokens, ``[heads, N, head_dim]``;
      patch ``j`` sits at grid position ``(j // grid_w, j % grid_w)``.
    * ``cls_embed``: optional output embedding of the (masked) image.
    """

    image_id: str
    img_h: int
    img_w: int
    patch_size: int
    grid_h: int
    grid_w: int
    q_cls: np.ndarray
    k_patch: np.ndarray
    cls_embed: np.ndarray | None = None

    def __post_init__(self):
        self.q_cls = np.ascontiguousarray(self.q_cls, dtype=np.float32)
        self.k_patch = np.ascontiguousarray(self.k_patch, dtype=np.float32)
        if self.cls_embed is not None:
            self.cls_embed = np.ascontiguousarray(self.cls_embed, dtype=np.float32)
        self.validate()

    @property
    def n_patches(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def heads(self) -> int:
        return self.q_cls.shape[0]

    @property
    def head_dim(self) -> int:
        return self.q_cls.shape[1]

    @property
    def embed_dim(self) -> int:
        return 0 if self.cls_embed is None else self.cls_embed.shape[0]

    def validate(self) -> None:
        if self.grid_h < 1 or self.grid_w < 1 or self.patch_size < 1:
            raise ValidationError("grid_h, grid_w and patch_size must be >= 1")
        if self.img_h != self.grid_h * self.patch_size or self.img_w != self.grid_w * self.patch_size:
            raise ValidationError(
                f"image size ({self.img_h}x{self.img_w}) does not equal "
                f"grid ({self.grid_h}x{self.grid_w}) times patch size {self.patch_size}"
            )
        if self.q_cls.ndim != 2:
            raise ValidationError("q_cls must be [heads, head_dim]")
        heads, head_dim = self.q_cls.shape
        if heads < 1 or head_dim < 1:
            raise ValidationError("heads and head_dim must be >= 1")
        if self.k_patch.shape != (heads, self.n_patches, head_dim):
            raise ValidationError(
                f"k_patch shape {self.k_patch.shape} does not match "
                f"(heads={heads}, N={self.n_patches}, head_dim={head_dim})"
            )
        if self.cls_embed is not None:
            if self.cls_embed.ndim != 1 or self.cls_embed.shape[0] < 1:
                raise ValidationError("cls_embed must be a non-empty vector")
        for name, arr in (("q_cls", self.q_cls), ("k_patch", self.k_patch), ("cls_embed", self.cls_embed)):
            if arr is not None and not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} contains non-finite values")

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeaturePack):
            return NotImplemented
        if (self.image_id, self.img_h, self.img_w, self.patch_size, self.grid_h, self.grid_w) != \
           (other.image_id, other.img_h, other.img_w, other.patch_size, other.grid_h, other.grid_w):
            return False
        if not np.array_equal(self.q_cls, other.q_cls) or not np.array_equal(self.k_patch, other.k_patch):
            return False
        if (self.cls_embed is None) != (other.cls_embed is None):
            return False
        return self.cls_embed is None or np.array_equal(self.cls_embed, other.cls_embed)


def write_feature_pack(pack: FeaturePack, path: str | Path) -> None:
    """Serialize a pack to the MDFP v1 byte layout (little-endian, no padding)."""
    pack.validate()
    header = PACK_MAGIC + _U32.pack(PACK_VERSION)
    for value in (pack.img_h, pack.img_w, pack.patch_size, pack.grid_h,
                  pack.grid_w, pack.heads, pack.head_dim, pack.embed_dim):
        header += _U32.pack(value)
    payload = pack.q_cls.astype("<f4").tobytes() + pack.k_patch.astype("<f4").tobytes()
    if pack.cls_embed is not None:
        payload += pack.cls_embed.astype("<f4").tobytes()
    _atomic_write_bytes(path, header + payload)


def read_feature_pack(path: str | Path) -> FeaturePack:
    """Read an MDFP v1 pack; the image id is the file stem."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 8 or data[:4] != PACK_MAGIC:
        raise FormatError(f"{path}: not an MDFP file")
    version = _U32.unpack_from(data, 4)[0]
    if version != PACK_VERSION:
        raise FormatError(f"{path}: unsupported MDFP version {version}")
    if len(data) < 8 + 8 * 4:
        raise CorruptionError(f"{path}: truncated header")
    fields = struct.unpack_from("<8I", data, 8)
    img_h, img_w, patch_size, grid_h, grid_w, heads, head_dim, embed_dim = fields
    n = grid_h * grid_w
    n_floats = heads * head_dim + heads * n * head_dim + embed_dim
    expected = 8 + 8 * 4 + 4 * n_floats
    if len(data) != expected:
        raise CorruptionError(
            f"{path}: payload length mismatch (expected {expected} bytes, got {len(data)})"
        )
    floats = np.frombuffer(data, dtype="<f4", offset=8 + 8 * 4)
    q_end = heads * head_dim
    k_end = q_end + heads * n * head_dim
    q_cls = floats[:q_end].reshape(heads, head_dim)
    k_patch = floats[q_end:k_end].reshape(heads, n, head_dim)
    cls_embed = floats[k_end:] if embed_dim else None
    try:
        return FeaturePack(
            image_id=path.stem,
            img_h=img_h, img_w=img_w, patch_size=patch_size,
            grid_h=grid_h, grid_w=grid_w,
            q_cls=q_cls, k_patch=k_patch, cls_embed=cls_embed,
        )
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from exc


def iter_pack_paths(packs_dir: str | Path) -> list[Path]:
    """All ``*.mdfp`` files under a directory, sorted by file name."""
    return sorted(Path(packs_dir).glob("*.mdfp"))


# ---------------------------------------------------------------------------
# Run-length encoded masks (COCO uncompressed convention)
# ---------------------------------------------------------------------------

def encode_rle(mask) -> dict:
    """Encode a binary mask column-major; counts start with the zero run."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValidationError(f"mask must be 2-D, got {arr.ndim}-D")
    h, w = arr.shape
    flat = (np.asarray(arr, dtype=np.uint8) != 0).ravel(order="F")
    counts: list[int] = []
    if flat.size == 0:
        return {"size": [h, w], "counts": [0]}
    boundaries = np.flatnonzero(np.diff(flat)) + 1
    runs = np.diff(np.concatenate(([0], boundaries, [flat.size])))
    if flat[0] == 1:
        counts.append(0)
    counts.extend(int(r) for r in runs)
    return {"size": [h, w], "counts": counts}


def _check_rle(rle) -> tuple[int, int, list[int]]:
    try:
        h, w = (int(v) for v in rle["size"])
        counts = [int(c) for c in rle["counts"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed RLE object: {exc}") from exc
    if h < 1 or w < 1:
        raise FormatError(f"RLE size must be positive, got ({h}, {w})")
    if any(c < 0 for c in counts):
        raise FormatError("RLE counts must be non-negative")
    if sum(counts) != h * w:
        raise FormatError(f"RLE counts sum to {sum(counts)}, expected {h * w}")
    return h, w, counts


def decode_rle(rle) -> np.ndarray:
    """Decode to a uint8 mask of shape ``size``; inverse of :func:`encode_rle`."""
    h, w, counts = _check_rle(rle)
    values = np.arange(len(counts), dtype=np.uint8) % 2
    flat = np.repeat(values, counts)
    return flat.reshape((h, w), order="F")


def rle_area(rle) -> int:
    """Number of set pixels, straight from the one-runs."""
    _, _, counts = _check_rle(rle)
    return sum(counts[1::2])


def rle_bbox(rle) -> tuple[int, int, int, int]:
    """Tight (x, y, w, h) box computed from the runs without decoding."""
    h, _, counts = _check_rle(rle)
    min_row = min_col = None
    max_row = max_col = None
    pos = 0
    for idx, count in enumerate(counts):
        if idx % 2 == 1 and count > 0:
            start, end = pos, pos + count - 1
            col_a, col_b = start // h, end // h
            if col_a == col_b:
                row_a, row_b = start % h, end % h
            else:
                row_a, row_b = 0, h - 1
            min_col = col_a if min_col is None else min(min_col, col_a)
            max_col = col_b if max_col is None else max(max_col, col_b)
            min_row = row_a if min_row is None else min(min_row, row_a)
            max_row = row_b if max_row is None else max(max_row, row_b)
        pos += count
    if min_row is None:
        raise EmptyMaskError("mask has no set pixels")
    return (min_col, min_row, max_col - min_col + 1, max_row - min_row + 1)


# ---------------------------------------------------------------------------
# Candidate manifests
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class ObjectCandidate:
    """A pixel-level object mask with confidence and optional cluster label."""

    image_id: str
    score: float
    bbox: tuple[int, int, int, int]
    rle: dict = field(repr=False)
    label: int | None = None

    def __post_init__(self):
        self.score = float(self.score)
        self.bbox = tuple(int(v) for v in self.bbox)
        if self.label is not None:
            self.label = int(self.label)
        self.validate()

    def validate(self) -> None:
        if not (0.0 <= self.score <= 1.0):
            raise ValidationError(f"score must lie in [0, 1], got {self.score}")
        if self.label is not None and self.label < 1:
            raise ValidationError(f"label must be >= 1 when set, got {self.label}")
        if len(self.bbox) != 4:
            raise ValidationError("bbox must be (x, y, w, h)")
        tight = rle_bbox(self.rle)
        if tuple(self.bbox) != tight:
            raise ValidationError(f"bbox {self.bbox} is not the tight box {tight} of the mask")

    def decode(self) -> np.ndarray:
        return decode_rle(self.rle)

    @property
    def area(self) -> int:
        return rle_area(self.rle)

    def to_json(self) -> str:
        obj = {
            "image_id": self.image_id,
            "score": self.score,
            "label": self.label,
            "bbox": list(self.bbox),
            "rle": {"size": list(self.rle["size"]), "counts": list(self.rle["counts"])},
        }
        return json.dumps(obj, separators=(",", ":"))

    def __eq__(self, other) -> bool:
        if not isinstance(other, ObjectCandidate):
            return NotImplemented
        return self.to_json() == other.to_json()


def candidate_from_mask(image_id: str, mask, score: float = 1.0,
                        label: int | None = None) -> ObjectCandidate:
    """Build a record from a binary pixel mask; bbox derived from the mask."""
    rle = encode_rle(mask)
    return ObjectCandidate(image_id=image_id, score=score, bbox=rle_bbox(rle), rle=rle, label=label)


def write_manifest(records: Iterable[ObjectCandidate], path: str | Path) -> None:
    """Write records sorted by image id (stable), one JSON object per line."""
    ordered = sorted(records, key=lambda r: r.image_id)
    for record in ordered:
        record.validate()
    data = "".join(record.to_json() + "\n" for record in ordered)
    _atomic_write_bytes(path, data.encode("utf-8"))


def read_manifest(path: str | Path) -> list[ObjectCandidate]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                record = ObjectCandidate(
                    image_id=str(obj["image_id"]),
                    score=obj["score"],
                    bbox=tuple(obj["bbox"]),
                    rle=obj["rle"],
                    label=obj["label"],
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{path}:{lineno}: malformed manifest record: {exc}") from exc
            records.append(record)
    return records


# ---------------------------------------------------------------------------
# PGM label maps
# ---------------------------------------------------------------------------

def write_pgm(labels, path: str | Path) -> None:
    """Write a label image as binary PGM (P5, maxval 255)."""
    arr = np.asarray(labels)
    if arr.ndim != 2:
        raise ValidationError(f"label map must be 2-D, got {arr.ndim}-D")
    if arr.min() < 0 or arr.max() > 255:
        raise ValidationError("PGM label values must lie in [0, 255]")
    h, w = arr.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    _atomic_write_bytes(path, header + arr.astype(np.uint8).tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (P5) file")
    tokens: list[bytes] = []
    pos = 2
    while len(tokens) < 3 and pos < len(data):
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if pos > start:
            tokens.append(data[start:pos])
    if len(tokens) < 3:
        raise FormatError(f"{path}: truncated PGM header")
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric PGM header") from exc
    if w < 1 or h < 1 or maxval != 255:
        raise FormatError(f"{path}: unsupported PGM header ({w} {h} {maxval})")
    pos += 1  # single whitespace byte after maxval
    if len(data) - pos != w * h:
        raise CorruptionError(f"{path}: expected {w * h} pixel bytes, got {len(data) - pos}")
    return np.frombuffer(data, dtype=np.uint8, offset=pos).reshape(h, w).copy()


def write_map_index(index: dict[str, str], path: str | Path) -> None:
    """JSON object mapping image_id -> PGM path (relative to the index file)."""
    payload = json.dumps(dict(sorted(index.items())), indent=2) + "\n"
    _atomic_write_bytes(path, payload.encode("utf-8"))


def read_map_index(path: str | Path) -> dict[str, str]:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid index file: {exc}") from exc
    if not isinstance(obj, dict) or not all(isinstance(v, str) for v in obj.values()):
        raise FormatError(f"{path}: index must map image_id to path")
    return obj


def load_label_maps(index_path: str | Path) -> dict[str, np.ndarray]:
    """Read every PGM referenced by an index file, keyed by image id."""
    index_path = Path(index_path)
    index = read_map_index(index_path)
    return {
        image_id: read_pgm(index_path.parent / rel)
        for image_id, rel in index.items()
    }


# ---------------------------------------------------------------------------
# Model sidecars and loss containers
# ---------------------------------------------------------------------------

def write_kmeans_sidecar(centroids, path: str | Path) -> None:
    """Persist centroids as MDKM: magic, u32 k, u32 d, f32 row-major payload."""
    arr = np.ascontiguousarray(centroids, dtype=np.float32)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValidationError("centroids must be a non-empty [k, d] matrix")
    data = KMEANS_MAGIC + _U32.pack(arr.shape[0]) + _U32.pack(arr.shape[1]) + arr.astype("<f4").tobytes()
    _atomic_write_bytes(path, data)


def read_kmeans_sidecar(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != KMEANS_MAGIC:
        raise FormatError(f"{path}: not an MDKM file")
    if len(data) < 12:
        raise CorruptionError(f"{path}: truncated MDKM header")
    k, d = struct.unpack_from("<2I", data, 4)
    if len(data) != 12 + 4 * k * d:
        raise CorruptionError(f"{path}: MDKM payload length mismatch")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(k, d).copy()


def write_loss_container(logits, targets, path: str | Path) -> None:
    """Persist a logits/targets pair as MDLC for the loss-check subcommand."""
    logits = np.ascontiguousarray(logits, dtype=np.float32)
    targets = np.ascontiguousarray(targets, dtype=np.int64)
    if logits.ndim != 2:
        raise ValidationError("logits must be [n_pixels, n_classes]")
    n, c = logits.shape
    if targets.shape != (n,):
        raise ValidationError("targets must be a vector matching the logits rows")
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= c:
        raise ValidationError("targets out of range for the logits width")
    data = (LOSS_MAGIC + _U32.pack(LOSS_VERSION) + _U32.pack(n) + _U32.pack(c)
            + logits.astype("<f4").tobytes() + targets.astype("<u4").tobytes())
    _atomic_write_bytes(path, data)


def read_loss_container(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != LOSS_MAGIC:
        raise FormatError(f"{path}: not an MDLC file")
    version = _U32.unpack_from(data, 4)[0]
    if version != LOSS_VERSION:
        raise FormatError(f"{path}: unsupported MDLC version {version}")
    n, c = struct.unpack_from("<2I", data, 8)
    expected = 16 + 4 * n * c + 4 * n
    if len(data) != expected:
        raise CorruptionError(f"{path}: MDLC payload length mismatch")
    logits = np.frombuffer(data, dtype="<f4", offset=16, count=n * c).reshape(n, c).astype(np.float64)
    targets = np.frombuffer(data, dtype="<u4", offset=16 + 4 * n * c, count=n).astype(np.int64)
    return logits, targets
