"""Acceptance gate: every primary criterion at its stated tolerance.

Each test prints one ``ACCEPTANCE PASS`` line when its criterion holds
(run with ``pytest tests/test_acceptance.py -v -s`` to see them).
"""

import hashlib
import itertools
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from maskpipe.cli import main as cli_main
from maskpipe.cluster import embedding_key, kmeans_fit, label_candidates
from maskpipe.distill import distill, find_source
from maskpipe.affinity import cls_affinity, patch_affinity
from maskpipe.evaluate import assignment_profit, hungarian_match, mask_ap, miou
from maskpipe.formats import (
    FeaturePack,
    candidate_from_mask,
    load_label_maps,
    read_manifest,
)
from maskpipe.loss import hard_mining_ce, pixel_cross_entropy, mined_pixel_count
from maskpipe.pseudo import (
    PipelineConfig,
    build_pseudo_ground_truth,
    decompose_map,
    filter_by_confidence,
    group_by_image,
)
from testutil import (
    brute_force_ap50,
    brute_force_max_profit,
    make_pack,
    monolithic_distill,
    naive_cls_affinity,
    naive_patch_affinity,
)

FIXTURES = Path(__file__).parent / "fixtures"


def report(name: str) -> None:
    print(f"\nACCEPTANCE PASS: {name}")


def test_affinity_matches_naive_reference_within_1e5():
    rng = np.random.RandomState(101)
    start = time.perf_counter()
    for _ in range(100):
        pack = make_pack(rng, grid_h=rng.randint(1, 9), grid_w=rng.randint(1, 9),
                         heads=rng.randint(1, 9), head_dim=rng.randint(2, 9))
        np.testing.assert_allclose(cls_affinity(pack), naive_cls_affinity(pack),
                                   rtol=1e-5, atol=0)
        np.testing.assert_allclose(patch_affinity(pack), naive_patch_affinity(pack),
                                   rtol=1e-5, atol=0)
    elapsed = time.perf_counter() - start
    assert elapsed < 10.0, f"affinity oracle took {elapsed:.1f}s"
    report(f"affinity oracle (100 packs, {elapsed:.1f}s)")


def test_distill_matches_monolithic_reference_bit_for_bit():
    rng = np.random.RandomState(202)
    start = time.perf_counter()
    for _ in range(100):
        pack = make_pack(rng, grid_h=rng.randint(1, 7), grid_w=rng.randint(1, 7))
        got = json.loads(distill(pack).to_json())
        expected = monolithic_distill(pack)
        assert got["rle"] == expected["rle"]
        assert got["bbox"] == expected["bbox"]
        assert (got["score"], got["label"]) == (expected["score"], expected["label"])
    elapsed = time.perf_counter() - start
    assert elapsed < 10.0, f"distillation oracle took {elapsed:.1f}s"
    report(f"distillation oracle (100 packs, {elapsed:.1f}s)")


def test_scale_invariance_of_masks_sources_and_labels():
    rng = np.random.RandomState(303)
    packs = [make_pack(rng, image_id=f"s{i}", with_embed=True, embed_dim=4)
             for i in range(50)]
    base_candidates = [distill(p).to_json() for p in packs]
    base_sources = [find_source(cls_affinity(p)) for p in packs]

    def labels_for(pack_list):
        embeddings = {p.image_id: p.cls_embed.astype(np.float64) for p in pack_list}
        points = np.stack([embeddings[i] for i in sorted(embeddings)])
        model = kmeans_fit(points, k=4, seed=0, restarts=5)
        records = [candidate_from_mask(p.image_id, distill(p).decode(), 1.0)
                   for p in pack_list]
        return [r.label for r in label_candidates(records, embeddings, model)]

    base_labels = labels_for(packs)
    for c in (0.01, 1.0, 100.0):
        scaled = [FeaturePack(p.image_id, p.img_h, p.img_w, p.patch_size,
                              p.grid_h, p.grid_w, p.q_cls * c, p.k_patch * c,
                              cls_embed=p.cls_embed * c)
                  for p in packs]
        assert [distill(p).to_json() for p in scaled] == base_candidates
        assert [find_source(cls_affinity(p)) for p in scaled] == base_sources
        assert labels_for(scaled) == base_labels
    report("scale invariance (c in {0.01, 1, 100}, 50 packs)")


def test_hungarian_equals_exhaustive_search():
    rng = np.random.RandomState(404)
    for _ in range(200):
        n = rng.randint(1, 8)
        m = rng.randint(1, 8)
        profit = rng.randn(n, m) * rng.choice([0.1, 1.0, 10.0])
        assignment = hungarian_match(profit)
        assert assignment_profit(profit, assignment) == brute_force_max_profit(profit)
    report("Hungarian oracle (200 matrices up to 7x7, exact)")


def test_miou_exact_rational_fixtures():
    pred = {"a": np.array([[1, 1], [0, 0]])}
    gt = {"a": np.array([[1, 0], [1, 0]])}
    outcome = miou(pred, gt, {0: 0, 1: 1})
    assert outcome.per_class_iou[1] == 1.0 / 3.0
    assert outcome.miou == 1.0 / 3.0

    pred4 = np.zeros((4, 4), dtype=int)
    pred4[:2, :] = 1
    gt4 = np.zeros((4, 4), dtype=int)
    gt4[:, :2] = 1
    outcome4 = miou({"a": pred4}, {"a": gt4}, {0: 0, 1: 1})
    assert outcome4.per_class_iou[1] == 1.0 / 3.0

    same = {"a": np.array([[0, 1, 2], [2, 1, 0]])}
    assert miou(same, same, {0: 0, 1: 1, 2: 2}).miou == 1.0
    report("mIoU exactness (1/3 fixtures and self-eval = 1.0)")


def _rect(image_id, score, rows, cols, shape=(8, 8)):
    mask = np.zeros(shape, dtype=np.uint8)
    mask[rows[0]:rows[1], cols[0]:cols[1]] = 1
    return candidate_from_mask(image_id, mask, score=score)


def test_mask_ap_fixtures_and_brute_force_agreement():
    # perfect match
    gt = [_rect("a", 1.0, (1, 4), (1, 4))]
    assert mask_ap([_rect("a", 0.9, (1, 4), (1, 4))], gt) == \
        {"ap": 1.0, "ap50": 1.0, "ap75": 1.0}

    # IoU exactly 3/5: passes at 0.50, fails at 0.75
    gt = [_rect("a", 1.0, (0, 5), (0, 1))]
    split = mask_ap([_rect("a", 0.9, (0, 3), (0, 1))], gt)
    assert split["ap50"] == 1.0 and split["ap75"] == 0.0

    # duplicate detection: second is a false positive, envelope keeps AP50 at 1
    gt = [_rect("a", 1.0, (0, 4), (0, 4))]
    dup = mask_ap([_rect("a", 0.9, (0, 4), (0, 4)), _rect("a", 0.8, (0, 4), (0, 4))], gt)
    assert dup["ap50"] == 1.0

    rng = np.random.RandomState(505)
    scenes = 0
    while scenes < 50:
        preds, gts, oracle_preds, oracle_gts = [], [], [], []
        order = 0
        for img in ("a", "b"):
            for _ in range(rng.randint(0, 4)):  # up to 6 preds over two images
                r0, c0 = rng.randint(0, 5), rng.randint(0, 5)
                record = _rect(img, float(rng.randint(1, 100)) / 100.0,
                               (r0, r0 + rng.randint(1, 4)), (c0, c0 + rng.randint(1, 4)))
                preds.append(record)
                oracle_preds.append({"image": img, "score": record.score,
                                     "order": order, "mask": record.decode()})
                order += 1
            for _ in range(rng.randint(0, 3)):  # up to 4 GT over two images
                r0, c0 = rng.randint(0, 5), rng.randint(0, 5)
                record = _rect(img, 1.0, (r0, r0 + rng.randint(1, 4)),
                               (c0, c0 + rng.randint(1, 4)))
                gts.append(record)
                oracle_gts.append({"image": img, "mask": record.decode()})
        if not gts:
            continue
        scenes += 1
        got = mask_ap(preds, gts)["ap50"]
        expected = brute_force_ap50(oracle_preds, oracle_gts)
        assert abs(got - expected) <= 1e-9
    report("mask AP (3 fixtures exact, 50 random scenes vs brute force @1e-9)")


def test_loss_gradient_matches_central_differences():
    rng = np.random.RandomState(606)
    eps = 1e-4
    checked = 0
    while checked < 50:
        n, width = 12, 5
        logits = rng.randn(n, width) * 2.0
        targets = rng.randint(0, width, size=n)
        ce = np.sort(pixel_cross_entropy(logits, targets))[::-1]
        n_mined = mined_pixel_count(n, 0.25)
        if n_mined < n and ce[n_mined - 1] - ce[n_mined] < 1e-2:
            continue  # selection not stable under the probe
        _, grad = hard_mining_ce(logits, targets, 0.25)
        fd = np.zeros_like(logits)
        for i in range(n):
            for c in range(width):
                up = logits.copy()
                up[i, c] += eps
                down = logits.copy()
                down[i, c] -= eps
                fd[i, c] = (hard_mining_ce(up, targets, 0.25)[0]
                            - hard_mining_ce(down, targets, 0.25)[0]) / (2 * eps)
        scale = max(np.abs(fd).max(), 1e-12)
        assert np.abs(grad - fd).max() / scale < 1e-4
        checked += 1

    uniform, _ = hard_mining_ce(np.zeros((20, 5)), np.arange(20) % 5, 0.2)
    assert uniform == pytest.approx(math.log(5) / 5, rel=1e-12)
    report("loss gradient (50 stable instances @1e-4, uniform case analytic)")


def _run_pipeline(base: Path) -> dict[str, str]:
    packs = FIXTURES / "packs"
    base.mkdir(parents=True, exist_ok=True)
    steps = [
        ["distill", "--packs", str(packs), "--out", str(base / "distilled.jsonl")],
        ["cluster", "--packs", str(packs), "--manifest", str(base / "distilled.jsonl"),
         "--out", str(base / "labeled.jsonl"), "--model", str(base / "model.mdkm"),
         "--k", "2", "--seed", "0"],
        ["build-pgt", "--manifest", str(base / "labeled.jsonl"),
         "--out-dir", str(base / "maps"), "--tau", "0.9"],
        ["eval-semseg", "--pred", str(base / "maps" / "index.json"),
         "--gt", str(FIXTURES / "gt_maps" / "index.json"),
         "--out", str(base / "semseg_report.json")],
    ]
    for step in steps:
        assert cli_main(step) == 0, f"pipeline step failed: {step[0]}"
    return {
        str(p.relative_to(base)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(base.rglob("*")) if p.is_file()
    }


def _oracle_semseg_miou(pred_maps, gt_maps) -> float:
    """Exhaustive-assignment mIoU, plain loops only."""
    pred_values = sorted({int(v) for m in pred_maps.values() for v in np.unique(m)})
    gt_values = sorted({int(v) for m in gt_maps.values() for v in np.unique(m)})
    inter = {(p, g): 0 for p in pred_values for g in gt_values}
    for image_id in pred_maps:
        pred, gt = pred_maps[image_id], gt_maps[image_id]
        for y in range(pred.shape[0]):
            for x in range(pred.shape[1]):
                key = (int(pred[y, x]), int(gt[y, x]))
                inter[key] += 1
    best_total, best_perm = -1, None
    side = max(len(pred_values), len(gt_values))
    for perm in itertools.permutations(range(side)):
        total = 0
        for pi, gi in enumerate(perm):
            if pi < len(pred_values) and gi < len(gt_values):
                total += inter[(pred_values[pi], gt_values[gi])]
        if total > best_total:
            best_total, best_perm = total, perm
    mapping = {}
    for pi, gi in enumerate(best_perm):
        if pi < len(pred_values):
            mapping[pred_values[pi]] = gt_values[gi] if gi < len(gt_values) else 0
    ious = []
    for cls in gt_values:
        tp = fp = fn = 0
        for (p, g), count in inter.items():
            mapped = mapping.get(p, 0)
            if mapped == cls and g == cls:
                tp += count
            elif mapped == cls:
                fp += count
            elif g == cls:
                fn += count
        if tp + fp + fn:
            ious.append(tp / (tp + fp + fn))
    return sum(ious) / len(ious)


def test_pipeline_determinism_and_tau_monotonicity(tmp_path):
    run_a = _run_pipeline(tmp_path / "a")
    run_b = _run_pipeline(tmp_path / "b")
    assert run_a == run_b, "pipeline outputs differ between identical runs"

    # regression against the committed golden outputs
    golden = {
        str(p.relative_to(FIXTURES / "golden")): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted((FIXTURES / "golden").rglob("*"))
        if p.is_file() and "instseg" not in p.name
    }
    assert run_a == golden, "pipeline outputs drifted from the committed golden files"

    # the reported mIoU must match an exhaustive-assignment oracle
    achieved = json.loads((tmp_path / "a" / "semseg_report.json").read_text())["miou"]
    pred_maps = load_label_maps(tmp_path / "a" / "maps" / "index.json")
    gt_maps = load_label_maps(FIXTURES / "gt_maps" / "index.json")
    assert achieved == pytest.approx(_oracle_semseg_miou(pred_maps, gt_maps), abs=1e-12)

    records = read_manifest(FIXTURES / "det_manifest.jsonl")
    previous = None
    for tau in (0.0, 0.5, 0.9, 0.99):
        counts = {image_id: len(filter_by_confidence(group, tau))
                  for image_id, group in group_by_image(records).items()}
        assert all(count >= 1 for count in counts.values())
        if previous is not None:
            assert all(counts[i] <= previous[i] for i in counts)
        previous = counts
    report("pipeline determinism, golden regression and tau monotonicity")


def test_overclustering_direction_on_noisy_corpus():
    sizes = [((0, 4), (2, 6)), ((6, 10), (2, 7)), ((12, 16), (2, 8))]
    true_classes = 4
    centers = np.eye(true_classes) * 2.0

    def ap50_for(k: int, seed: int) -> float:
        rng = np.random.RandomState(1000 + seed)
        records, gt_records, embeddings = [], [], {}
        for img in range(20):
            image_id = f"n{img:02d}"
            classes = rng.permutation(true_classes)[:3]
            for ordinal, (rows, cols) in enumerate(sizes):
                cls = classes[ordinal]
                mask = np.zeros((16, 16), dtype=np.uint8)
                mask[rows[0]:rows[1], cols[0]:cols[1]] = 1
                records.append(candidate_from_mask(image_id, mask, score=0.9))
                gt_records.append(candidate_from_mask(image_id, mask, score=1.0,
                                                      label=int(cls) + 1))
                embeddings[embedding_key(image_id, ordinal)] = (
                    centers[cls] + rng.randn(true_classes) * 3.0)
        points = np.stack([embeddings[key] for key in sorted(embeddings)])
        model = kmeans_fit(points, k=k, seed=seed, restarts=3)
        labeled = label_candidates(records, embeddings, model)
        maps = build_pseudo_ground_truth(labeled, PipelineConfig(tau=0.5, kmeans_k=k))
        instances = [record for seg in maps for record in decompose_map(seg)]
        return mask_ap(instances, gt_records)["ap50"]

    coarse = [ap50_for(4, seed) for seed in range(5)]
    fine = [ap50_for(8, seed) for seed in range(5)]
    assert np.mean(fine) >= np.mean(coarse), (
        f"AP50 with k=8 ({np.mean(fine):.3f}) fell below k=4 ({np.mean(coarse):.3f})"
    )
    report(f"overclustering direction (AP50 k=8 {np.mean(fine):.3f} "
           f">= k=4 {np.mean(coarse):.3f}, 5 seeds)")
