#!/usr/bin/env python3
"""Regenerate the committed 5-image synthetic fixture.

Deterministic by construction: integer-valued features (exact in f32
and f64), a fixed legacy random stream, and crafted object blocks whose
affinity signs are unambiguous. Inputs land in tests/fixtures/, golden
pipeline outputs in tests/fixtures/golden/ (produced by running the CLI
subcommands in-process).
"""

from __future__ import annotations

import shutil
import sys
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "src"))

from maskpipe.cli import main as cli_main  # noqa: E402
from maskpipe.formats import (  # noqa: E402
    FeaturePack,
    candidate_from_mask,
    write_feature_pack,
    write_manifest,
    write_map_index,
    write_pgm,
)

FIXTURES = ROOT / "tests" / "fixtures"

GRID = 4
PATCH = 4
SIDE = GRID * PATCH  # 16 px images

# object blocks in patch coordinates: (row0, row1, col0, col1), end-exclusive
OBJECT_BLOCKS = {
    "img00": (0, 2, 0, 3),
    "img01": (1, 4, 1, 4),
    "img02": (2, 4, 0, 2),
    "img03": (0, 3, 2, 4),
    "img04": (1, 3, 1, 3),
}

# ground-truth regions in pixel coordinates: (row0, row1, col0, col1, class)
GT_REGIONS = {
    "img00": [(0, 8, 0, 12, 1)],
    "img01": [(4, 16, 4, 16, 2)],
    "img02": [(6, 16, 0, 10, 1)],     # offset against the distilled block
    "img03": [(0, 12, 8, 16, 2)],
    "img04": [(4, 12, 4, 12, 1), (13, 16, 0, 3, 2)],  # second region stays unfound
}

# embeddings cluster by ground-truth class: images 0/2/4 vs 1/3
EMBED_CENTERS = {1: np.array([6, 0, 0, 0]), 2: np.array([0, 6, 0, 0])}

V_OBJ = np.array([[2, 1, 0], [1, 2, 1]])
V_BG = np.array([[-2, 1, -1], [0, -2, 1]])


def build_pack(rng: np.random.RandomState, image_id: str) -> FeaturePack:
    r0, r1, c0, c1 = OBJECT_BLOCKS[image_id]
    in_block = np.zeros((GRID, GRID), dtype=bool)
    in_block[r0:r1, c0:c1] = True
    k = np.empty((2, GRID * GRID, 3), dtype=np.float32)
    for j in range(GRID * GRID):
        base = V_OBJ if in_block.ravel()[j] else V_BG
        k[:, j, :] = base + rng.randint(-1, 2, size=(2, 3))
    q = (2 * V_OBJ).astype(np.float32)
    gt_class = GT_REGIONS[image_id][0][4]
    embed = (EMBED_CENTERS[gt_class] + rng.randint(-1, 2, size=4)).astype(np.float32)
    return FeaturePack(image_id, SIDE, SIDE, PATCH, GRID, GRID, q, k, cls_embed=embed)


def rect_mask(r0, r1, c0, c1) -> np.ndarray:
    mask = np.zeros((SIDE, SIDE), dtype=np.uint8)
    mask[r0:r1, c0:c1] = 1
    return mask


def detector_manifest(rng: np.random.RandomState):
    """Simulated detector output: one strong, one mid, one weak candidate."""
    records = []
    for i, (image_id, regions) in enumerate(sorted(GT_REGIONS.items())):
        r0, r1, c0, c1, cls = regions[0]
        records.append(candidate_from_mask(
            image_id, rect_mask(r0, r1, c0, c1),
            score=round(0.92 + 0.01 * i, 2), label=cls))
        jitter = rect_mask(min(r0 + 2, SIDE - 2), min(r1 + 2, SIDE),
                           min(c0 + 2, SIDE - 2), min(c1 + 2, SIDE))
        records.append(candidate_from_mask(
            image_id, jitter, score=round(0.55 + 0.03 * i, 2),
            label=(cls % 2) + 1 if i % 2 else cls))
        blob_r = (3 * i) % (SIDE - 3)
        records.append(candidate_from_mask(
            image_id, rect_mask(blob_r, blob_r + 2, 0, 2),
            score=round(0.12 + 0.02 * i, 2), label=(i % 2) + 1))
        if len(regions) > 1:
            r0, r1, c0, c1, cls = regions[1]
            records.append(candidate_from_mask(
                image_id, rect_mask(r0, r1, c0, c1), score=0.91, label=cls))
    return records


def gt_manifest():
    records = []
    for image_id, regions in sorted(GT_REGIONS.items()):
        for r0, r1, c0, c1, cls in regions:
            records.append(candidate_from_mask(
                image_id, rect_mask(r0, r1, c0, c1), score=1.0, label=cls))
    return records


def run_cli(*argv) -> None:
    code = cli_main(list(argv))
    if code != 0:
        raise SystemExit(f"fixture pipeline step failed: {argv}")


def main() -> None:
    rng = np.random.RandomState(20240501)
    if FIXTURES.exists():
        shutil.rmtree(FIXTURES)
    packs_dir = FIXTURES / "packs"
    gt_dir = FIXTURES / "gt_maps"
    golden = FIXTURES / "golden"
    for directory in (packs_dir, gt_dir, golden):
        directory.mkdir(parents=True)

    for image_id in sorted(OBJECT_BLOCKS):
        write_feature_pack(build_pack(rng, image_id), packs_dir / f"{image_id}.mdfp")

    index = {}
    for image_id, regions in sorted(GT_REGIONS.items()):
        labels = np.zeros((SIDE, SIDE), dtype=np.uint8)
        for r0, r1, c0, c1, cls in regions:
            labels[r0:r1, c0:c1] = cls
        name = f"{image_id}.pgm"
        write_pgm(labels, gt_dir / name)
        index[image_id] = name
    write_map_index(index, gt_dir / "index.json")

    write_manifest(detector_manifest(rng), FIXTURES / "det_manifest.jsonl")
    write_manifest(gt_manifest(), FIXTURES / "gt_manifest.jsonl")

    # golden pipeline outputs: distill -> cluster -> build-pgt -> eval
    run_cli("distill", "--packs", str(packs_dir),
            "--out", str(golden / "distilled.jsonl"))
    run_cli("cluster", "--packs", str(packs_dir),
            "--manifest", str(golden / "distilled.jsonl"),
            "--out", str(golden / "labeled.jsonl"),
            "--model", str(golden / "model.mdkm"), "--k", "2", "--seed", "0")
    run_cli("build-pgt", "--manifest", str(golden / "labeled.jsonl"),
            "--out-dir", str(golden / "maps"), "--tau", "0.9")
    run_cli("eval-semseg", "--pred", str(golden / "maps" / "index.json"),
            "--gt", str(gt_dir / "index.json"),
            "--out", str(golden / "semseg_report.json"))
    run_cli("eval-instseg", "--pred", str(FIXTURES / "det_manifest.jsonl"),
            "--gt", str(FIXTURES / "gt_manifest.jsonl"),
            "--out", str(golden / "instseg_report.json"))
    print(f"fixtures written under {FIXTURES}")


if __name__ == "__main__":
    main()
