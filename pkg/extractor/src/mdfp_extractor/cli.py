"""Extractor CLI: export-packs, export-masked-cls, convert-detections."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .convert import convert_detections
from .export import (
    ConfigError,
    ConversionError,
    ExtractorConfig,
    ExtractorError,
    export_masked_cls,
    export_packs,
    load_model,
    processed_image,
)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".ppm")


def _find_images(images_dir: Path) -> list[tuple[str, Path]]:
    return [(p.stem, p) for p in sorted(images_dir.iterdir())
            if p.suffix.lower() in IMAGE_SUFFIXES]


def _config_from(args) -> ExtractorConfig:
    return ExtractorConfig(
        weights=args.weights,
        patch_size=args.patch_size,
        resize_short_side=args.resize if args.resize > 0 else None,
        masking_policy=args.masking_policy,
        seed=args.seed,
    )


def cmd_export_packs(args) -> int:
    config = _config_from(args)
    images = _find_images(Path(args.images))
    written, errors = export_packs(images, Path(args.out), config,
                                   include_plain_embed=args.plain_embed)
    print(json.dumps({"written": len(written), "errors": errors}), file=sys.stderr)
    return 1 if errors else 0


def cmd_export_masked_cls(args) -> int:
    config = _config_from(args)
    model = load_model(config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    errors = []
    ordinals: dict[str, int] = {}
    with open(args.manifest, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            image_id = str(record["image_id"])
            ordinal = ordinals.get(image_id, 0)
            ordinals[image_id] = ordinal + 1
            try:
                counts = [int(c) for c in record["rle"]["counts"]]
                h, w = (int(v) for v in record["rle"]["size"])
                mask = np.repeat(np.arange(len(counts)) % 2, counts) \
                    .reshape((h, w), order="F").astype(np.uint8)
                with Image.open(Path(args.images) / f"{image_id}{args.suffix}") as img:
                    # candidate masks live in the processed coordinate space
                    export_masked_cls(model, processed_image(img, config), mask,
                                      f"{image_id}#{ordinal}", out_dir, config)
            except (ExtractorError, OSError, KeyError, ValueError) as exc:
                errors.append({"image_id": image_id, "error": str(exc)})
    print(json.dumps({"errors": errors}), file=sys.stderr)
    return 1 if errors else 0


def cmd_convert_detections(args) -> int:
    count = convert_detections(args.dump, args.out)
    print(json.dumps({"converted": count}), file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mdfp-extract",
        description="Export transformer feature packs and convert detector dumps.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--weights", default=None,
                       help="checkpoint path or hub:<name>; default random init")
        p.add_argument("--patch-size", type=int, default=16, dest="patch_size")
        p.add_argument("--resize", type=int, default=640,
                       help="short-side resize in px; 0 disables")
        p.add_argument("--masking-policy", default="crop-meanfill",
                       choices=("crop-meanfill", "zerofill-nocrop"),
                       dest="masking_policy")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("export-packs", help="one MDFP pack per image")
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--plain-embed", action="store_true", dest="plain_embed",
                   help="also store the plain-image CLS embedding")
    common(p)
    p.set_defaults(func=cmd_export_packs)

    p = sub.add_parser("export-masked-cls",
                       help="masked-image embedding packs for every candidate")
    p.add_argument("--images", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--suffix", default=".png", help="image file suffix")
    common(p)
    p.set_defaults(func=cmd_export_masked_cls)

    p = sub.add_parser("convert-detections",
                       help="detector JSON dump -> candidate manifest")
    p.add_argument("--dump", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_convert_detections)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ConversionError, ExtractorError) as exc:
        print(json.dumps({"errors": [{"error": str(exc)}]}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
