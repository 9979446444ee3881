"""Command-line pipeline: one subcommand per stage, files in between.

Stages communicate only through the documented formats (MDFP packs,
JSON-lines manifests, PGM maps plus index, MDKM model sidecars), so any
stage can be re-run or replaced - e.g. a detector's converted manifest
slots in where ``distill`` output would go.

Exit code is 0 iff no record-level errors occurred; a JSON error
summary is printed to stderr either way.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import formats
from .cluster import kmeans_fit, l2_normalize, label_candidates
from .distill import COMPONENT_MODES, distill
from .errors import MaskPipeError
from .evaluate import cluster_class_assignment, evaluate_semseg, mask_ap
from .loss import finite_difference_gradient, hard_mining_ce
from .pseudo import PipelineConfig, build_pseudo_ground_truth

THREADS_ENV = "MASKPIPE_THREADS"


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    if not isinstance(obj, dict):
        raise MaskPipeError(f"config file {path} must hold a JSON object")
    return obj


def _setting(args, config: dict, key: str, default):
    value = getattr(args, key.replace("-", "_"), None)
    if value is not None:
        return value
    if key in config:
        return config[key]
    return default


def _emit_summary(errors: list[dict]) -> int:
    print(json.dumps({"errors": errors}, sort_keys=True), file=sys.stderr)
    return 1 if errors else 0


def _write_report(report: dict, out: str | None) -> None:
    payload = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if out:
        formats._atomic_write_bytes(out, payload.encode("utf-8"))
    else:
        sys.stdout.write(payload)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_distill(args) -> int:
    config = _load_config(args.config)
    k_fraction = float(_setting(args, config, "k_fraction", 0.4))
    mode = _setting(args, config, "component_mode", "source-component")
    threads = int(_setting(args, config, "threads", _default_threads()))
    paths = formats.iter_pack_paths(args.packs)
    errors: list[dict] = []
    records = []

    def run(path):
        pack = formats.read_feature_pack(path)
        return distill(pack, k_fraction=k_fraction, component_mode=mode)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = {pool.submit(run, p): p for p in paths}
            for future, path in futures.items():
                try:
                    records.append(future.result())
                except MaskPipeError as exc:
                    errors.append({"image_id": path.stem, "error": str(exc)})
    else:
        for path in paths:
            try:
                records.append(run(path))
            except MaskPipeError as exc:
                errors.append({"image_id": path.stem, "error": str(exc)})

    formats.write_manifest(records, args.out)
    return _emit_summary(errors)


def cmd_cluster(args) -> int:
    config = _load_config(args.config)
    k = int(_setting(args, config, "kmeans_k", 20))
    seed = int(_setting(args, config, "seed", 0))
    restarts = int(_setting(args, config, "restarts", 10))
    max_iter = int(_setting(args, config, "max_iter", 300))
    normalize = bool(_setting(args, config, "normalize_embeddings", False)) or args.normalize

    records = formats.read_manifest(args.manifest)
    embeddings: dict[str, np.ndarray] = {}
    for path in formats.iter_pack_paths(args.packs):
        pack = formats.read_feature_pack(path)
        if pack.cls_embed is not None:
            embeddings[pack.image_id] = pack.cls_embed.astype(np.float64)
    errors: list[dict] = []
    try:
        if not embeddings:
            raise MaskPipeError(f"no packs with embeddings under {args.packs}")
        # fit on every available embedding (the whole corpus improves the
        # clustering), in sorted id order for reproducibility
        points = np.stack([embeddings[i] for i in sorted(embeddings)])
        if normalize:
            points = l2_normalize(points)
        model = kmeans_fit(points, k, seed=seed, max_iter=max_iter, restarts=restarts)
        labeled = label_candidates(records, embeddings, model, normalize=normalize)
        formats.write_manifest(labeled, args.out)
        if args.model:
            formats.write_kmeans_sidecar(model.centroids, args.model)
    except MaskPipeError as exc:
        errors.append({"error": str(exc)})
    return _emit_summary(errors)


def cmd_build_pgt(args) -> int:
    config = _load_config(args.config)
    pipeline = PipelineConfig(
        tau=float(_setting(args, config, "tau", 0.9)),
        k_fraction=float(_setting(args, config, "k_fraction", 0.4)),
        kmeans_k=int(_setting(args, config, "kmeans_k", 1)),
        seed=int(_setting(args, config, "seed", 0)),
        nms_iou=_setting(args, config, "nms_iou", None),
    )
    records = formats.read_manifest(args.manifest)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    errors: list[dict] = []
    index: dict[str, str] = {}
    for seg in build_pseudo_ground_truth(records, pipeline):
        try:
            if seg.labels.max(initial=0) > 255:
                raise MaskPipeError(
                    f"{seg.image_id}: more than 255 clusters cannot be stored as PGM"
                )
            name = f"{seg.image_id}.pgm"
            formats.write_pgm(seg.labels, out_dir / name)
            index[seg.image_id] = name
        except MaskPipeError as exc:
            errors.append({"image_id": seg.image_id, "error": str(exc)})
    formats.write_map_index(index, out_dir / "index.json")
    return _emit_summary(errors)


def cmd_eval_semseg(args) -> int:
    pred_maps = formats.load_label_maps(args.pred)
    gt_maps = formats.load_label_maps(args.gt)
    report = evaluate_semseg(pred_maps, gt_maps)
    _write_report(report.to_dict(), args.out)
    return _emit_summary([])


def cmd_eval_instseg(args) -> int:
    preds = formats.read_manifest(args.pred)
    gts = formats.read_manifest(args.gt)
    report: dict = {}
    for protocol in ("multi", "single"):
        report[protocol] = {
            "class_agnostic": mask_ap(preds, gts, protocol=protocol, class_mode="agnostic")
        }
    preds_labeled = all(r.label is not None for r in preds) and bool(preds)
    gts_labeled = all(r.label is not None for r in gts) and bool(gts)
    if preds_labeled and gts_labeled:
        assignment = cluster_class_assignment(preds, gts)
        report["cluster_to_class"] = {str(k): v for k, v in sorted(assignment.items())}
        for protocol in ("multi", "single"):
            detailed = mask_ap(preds, gts, protocol=protocol, class_mode="semantic",
                               assignment=assignment, with_per_class=True)
            detailed["per_class_ap50"] = {
                str(k): v for k, v in sorted(detailed["per_class_ap50"].items())
            }
            report[protocol]["semantic"] = detailed
    _write_report(report, args.out)
    return _emit_summary([])


def cmd_loss_check(args) -> int:
    logits, targets = formats.read_loss_container(args.container)
    loss, grad = hard_mining_ce(logits, targets, top_fraction=args.top_fraction,
                                class_count=args.class_count)
    fd = finite_difference_gradient(logits, targets, top_fraction=args.top_fraction,
                                    class_count=args.class_count, epsilon=args.epsilon)
    scale = max(float(np.abs(fd).max()), 1e-12)
    max_err = float(np.abs(grad - fd).max() / scale)
    _write_report({"loss": loss, "max_gradient_error": max_err}, args.out)
    return _emit_summary([])


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskpipe",
        description="Distill, label, aggregate and evaluate object masks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("distill", help="one mask candidate per feature pack")
    p.add_argument("--packs", required=True, help="directory of .mdfp files")
    p.add_argument("--out", required=True, help="output manifest path")
    p.add_argument("--config", default=None)
    p.add_argument("--k-fraction", type=float, default=None, dest="k_fraction")
    p.add_argument("--component-mode", choices=COMPONENT_MODES, default=None,
                   dest="component_mode")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("cluster", help="assign k-means labels to candidates")
    p.add_argument("--packs", required=True, help="directory of packs with embeddings")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model", default=None, help="MDKM sidecar output path")
    p.add_argument("--config", default=None)
    p.add_argument("--k", type=int, default=None, dest="kmeans_k")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--restarts", type=int, default=None)
    p.add_argument("--max-iter", type=int, default=None, dest="max_iter")
    p.add_argument("--normalize", action="store_true")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("build-pgt", help="aggregate labeled masks into PGM maps")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.add_argument("--config", default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--nms-iou", type=float, default=None, dest="nms_iou")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_build_pgt)

    p = sub.add_parser("eval-semseg", help="Hungarian-matched mean IoU on PGM maps")
    p.add_argument("--pred", required=True, help="prediction index file")
    p.add_argument("--gt", required=True, help="ground-truth index file")
    p.add_argument("--out", default=None, help="report path (stdout if omitted)")
    p.set_defaults(func=cmd_eval_semseg)

    p = sub.add_parser("eval-instseg", help="COCO-style mask AP on manifests")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval_instseg)

    p = sub.add_parser("loss-check", help="mined-CE loss and gradient check")
    p.add_argument("--container", required=True, help="MDLC logits/targets file")
    p.add_argument("--top-fraction", type=float, default=0.2, dest="top_fraction")
    p.add_argument("--class-count", type=int, default=None, dest="class_count")
    p.add_argument("--epsilon", type=float, default=1e-4)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_loss_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except MaskPipeError as exc:
        return _emit_summary([{"error": str(exc)}])
    except OSError as exc:
        return _emit_summary([{"error": f"I/O failure: {exc}"}])


if __name__ == "__main__":
    sys.exit(main())
