"""Export MDFP feature packs and masked-image embeddings.

The pack writer here is independent of the consumer package on purpose:
the byte format is the contract. Every pack gets a JSON sidecar
(``<name>.meta.json``) recording the model reference, preprocessing and
the masking policy whenever an embedding is present.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .vit import VisionTransformer, build_model

log = logging.getLogger("mdfp_extractor")

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

MASKING_POLICIES = ("crop-meanfill", "zerofill-nocrop")
QK_CAPTURE = "final-block-preprojection-unscaled"


class ExtractorError(Exception):
    pass


class ConfigError(ExtractorError):
    pass


class ConversionError(ExtractorError):
    pass


@dataclass
class ExtractorConfig:
    weights: str | None = None          # checkpoint path, "hub:dino_vits16", or None
    patch_size: int = 16
    resize_short_side: int | None = 640
    masked_input_size: int = 224
    masking_policy: str = "crop-meanfill"
    seed: int = 0
    embed_dim: int = 384
    depth: int = 12
    num_heads: int = 6
    deterministic: bool = True
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.patch_size < 1:
            raise ConfigError("patch_size must be >= 1")
        if self.masking_policy not in MASKING_POLICIES:
            raise ConfigError(f"masking policy must be one of {MASKING_POLICIES}")
        if self.masked_input_size % self.patch_size != 0:
            raise ConfigError("masked_input_size must be a multiple of patch_size")


def load_model(config: ExtractorConfig) -> VisionTransformer:
    if config.deterministic:
        torch.set_num_threads(1)
    model = build_model(weights=config.weights, patch_size=config.patch_size,
                        embed_dim=config.embed_dim, depth=config.depth,
                        num_heads=config.num_heads, seed=config.seed)
    if model.patch_size != config.patch_size:
        raise ConfigError(
            f"model patch size {model.patch_size} != configured {config.patch_size}"
        )
    return model


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def _resize_short_side(image: Image.Image, target: int) -> Image.Image:
    w, h = image.size
    short = min(w, h)
    scale = target / short
    return image.resize((max(1, round(w * scale)), max(1, round(h * scale))),
                        Image.BILINEAR)


def _crop_to_patch_multiple(image: Image.Image, patch: int) -> Image.Image:
    w, h = image.size
    w2, h2 = (w // patch) * patch, (h // patch) * patch
    if w2 < patch or h2 < patch:
        raise ExtractorError(f"image {w}x{h} smaller than one {patch}px patch")
    left = (w - w2) // 2
    top = (h - h2) // 2
    return image.crop((left, top, left + w2, top + h2))


def processed_image(image: Image.Image, config: ExtractorConfig) -> Image.Image:
    """The geometry the backbone sees: RGB, short-side resize, patch-aligned crop.

    Candidate masks emitted downstream live in this coordinate space, so
    mask-consuming operations must transform images through here first.
    """
    image = image.convert("RGB")
    if config.resize_short_side:
        image = _resize_short_side(image, config.resize_short_side)
    return _crop_to_patch_multiple(image, config.patch_size)


def preprocess(image: Image.Image, config: ExtractorConfig) -> torch.Tensor:
    """RGB image -> normalized [1, 3, H, W] with H, W multiples of the patch."""
    image = processed_image(image, config)
    array = np.asarray(image, dtype=np.float32) / 255.0
    array = (array - np.array(IMAGENET_MEAN, dtype=np.float32)) \
        / np.array(IMAGENET_STD, dtype=np.float32)
    return torch.from_numpy(array).permute(2, 0, 1).unsqueeze(0)


# ---------------------------------------------------------------------------
# MDFP writing (format contract, implemented independently of the consumer)
# ---------------------------------------------------------------------------

def _atomic_bytes(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
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


def write_pack_bytes(path: Path, img_h: int, img_w: int, patch_size: int,
                     grid_h: int, grid_w: int, q_cls: np.ndarray,
                     k_patch: np.ndarray, cls_embed: np.ndarray | None) -> None:
    heads, head_dim = q_cls.shape
    embed_dim = 0 if cls_embed is None else cls_embed.shape[0]
    header = b"MDFP" + struct.pack("<9I", 1, img_h, img_w, patch_size,
                                   grid_h, grid_w, heads, head_dim, embed_dim)
    payload = q_cls.astype("<f4").tobytes() + k_patch.astype("<f4").tobytes()
    if cls_embed is not None:
        payload += cls_embed.astype("<f4").tobytes()
    _atomic_bytes(path, header + payload)


def write_sidecar(path: Path, config: ExtractorConfig, policy: str | None,
                  source: str) -> None:
    meta = {
        "source": source,
        "model": config.weights or f"random-init(seed={config.seed})",
        "patch_size": config.patch_size,
        "resize_short_side": config.resize_short_side,
        "qk_capture": QK_CAPTURE,
        "masking_policy": policy,
    }
    _atomic_bytes(path.with_name(path.name + ".meta.json"),
                  (json.dumps(meta, sort_keys=True, indent=2) + "\n").encode())


# ---------------------------------------------------------------------------
# Pack export
# ---------------------------------------------------------------------------

@torch.no_grad()
def extract_pack_arrays(model: VisionTransformer, pixels: torch.Tensor):
    """Run the backbone once; return (q_cls, k_patch, cls_out) numpy arrays."""
    tokens, q, k = model.forward_with_qk(pixels)
    q_cls = q[0, :, 0, :].numpy()
    k_patch = k[0, :, 1:, :].numpy()
    cls_out = tokens[0, 0, :].numpy()
    return q_cls, k_patch, cls_out


def export_pack(model: VisionTransformer, image: Image.Image, image_id: str,
                out_dir: Path, config: ExtractorConfig,
                include_plain_embed: bool = False) -> Path:
    pixels = preprocess(image, config)
    _, _, img_h, img_w = pixels.shape
    q_cls, k_patch, cls_out = extract_pack_arrays(model, pixels)
    grid_h, grid_w = img_h // config.patch_size, img_w // config.patch_size
    path = out_dir / f"{image_id}.mdfp"
    write_pack_bytes(path, img_h, img_w, config.patch_size, grid_h, grid_w,
                     q_cls, k_patch, cls_out if include_plain_embed else None)
    write_sidecar(path, config,
                  policy="plain-image" if include_plain_embed else None,
                  source=image_id)
    return path


def export_packs(images: list[tuple[str, Path]], out_dir: Path,
                 config: ExtractorConfig,
                 include_plain_embed: bool = False) -> tuple[list[Path], list[dict]]:
    """One pack per decodable image; undecodable ones are skipped and logged."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = load_model(config)
    written: list[Path] = []
    errors: list[dict] = []
    for image_id, path in images:
        try:
            with Image.open(path) as image:
                written.append(export_pack(model, image, image_id, out_dir, config,
                                           include_plain_embed=include_plain_embed))
        except (UnidentifiedImageError, OSError, ExtractorError) as exc:
            log.warning("skipping %s: %s", image_id, exc)
            errors.append({"image_id": image_id, "error": str(exc)})
    return written, errors


# ---------------------------------------------------------------------------
# Masked-image embeddings
# ---------------------------------------------------------------------------

def _mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ExtractorError("candidate mask has no set pixels")
    return int(cols[0]), int(rows[0]), int(cols[-1] + 1), int(rows[-1] + 1)


def masked_input(image: Image.Image, mask: np.ndarray,
                 config: ExtractorConfig) -> Image.Image:
    """Apply the masking policy and resize to the model input size."""
    image = image.convert("RGB")
    if mask.shape != (image.height, image.width):
        raise ExtractorError(
            f"mask shape {mask.shape} does not match image "
            f"{(image.height, image.width)}"
        )
    pixels = np.asarray(image, dtype=np.float32)
    fill = np.array(IMAGENET_MEAN, dtype=np.float32) * 255.0
    if config.masking_policy == "crop-meanfill":
        x0, y0, x1, y1 = _mask_bbox(mask)
        pixels = pixels[y0:y1, x0:x1].copy()
        region = mask[y0:y1, x0:x1]
        pixels[region == 0] = fill
    else:  # zerofill-nocrop
        if not mask.any():
            raise ExtractorError("candidate mask has no set pixels")
        pixels = pixels.copy()
        pixels[mask == 0] = 0.0
    size = config.masked_input_size
    return Image.fromarray(pixels.astype(np.uint8)).resize((size, size), Image.BILINEAR)


def export_masked_cls(model: VisionTransformer, image: Image.Image,
                      mask: np.ndarray, pack_name: str, out_dir: Path,
                      config: ExtractorConfig) -> Path:
    """Write a pack of the masked image whose embedding is its CLS output."""
    crop = masked_input(image, mask, config)
    pixels = preprocess(crop, ExtractorConfig(
        weights=config.weights, patch_size=config.patch_size,
        resize_short_side=None, masked_input_size=config.masked_input_size,
        masking_policy=config.masking_policy, seed=config.seed,
        embed_dim=config.embed_dim, depth=config.depth,
        num_heads=config.num_heads, deterministic=config.deterministic))
    _, _, img_h, img_w = pixels.shape
    q_cls, k_patch, cls_out = extract_pack_arrays(model, pixels)
    path = Path(out_dir) / f"{pack_name}.mdfp"
    write_pack_bytes(path, img_h, img_w, config.patch_size,
                     img_h // config.patch_size, img_w // config.patch_size,
                     q_cls, k_patch, cls_out)
    write_sidecar(path, config, policy=config.masking_policy, source=pack_name)
    return path
