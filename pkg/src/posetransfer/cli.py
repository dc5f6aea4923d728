"""Command-line entry points.

    posetransfer synth-data    render a toy dataset
    posetransfer train         train the two-branch model (or --face stage)
    posetransfer infer         run inference over a dataset split
    posetransfer eval          write the evaluation report JSON
    posetransfer viz-guidance  PCA visualization of the guidance map

Exit codes: 0 success, 2 usage/config error, 3 training divergence,
4 missing or unreadable files.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import eval_suite, trainer
from .data_pipeline import PairDataset, from_unit_range
from .errors import (
    AnnotationError,
    ConfigError,
    DimensionError,
    IngestionError,
    ProtocolError,
    TrainingDiverged,
)
from .eval_suite import Embedder, PART_GROUPS
from .losses import FeatureExtractor
from .pose_codec import crop_resize_face
from .toy_data import detect_marker_keypoints, synth_toy_dataset
from .trainer import TrainConfig


def _parse_size(text: str):
    try:
        h, w = text.lower().split("x")
        return (int(h), int(w))
    except ValueError as e:
        raise ConfigError(f"size must look like 128x88, got {text!r}") from e


def _load_train_config(args) -> TrainConfig:
    path = Path(args.config)
    if not path.exists():
        raise IngestionError(f"config file not found: {path}")
    try:
        with open(path) as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    cfg = TrainConfig.from_json_dict(raw)
    if args.data:
        cfg.data_root = args.data
    if args.out:
        cfg.out_dir = args.out
    if not cfg.data_root or not cfg.out_dir:
        raise ConfigError("data_root and out_dir must be set (config keys or --data/--out)")
    return cfg


def cmd_train(args) -> int:
    cfg = _load_train_config(args)
    cfg.validate()
    if args.face:
        manifest = trainer.fit_face(cfg, resume=args.resume)
        where = Path(cfg.out_dir) / "face"
    else:
        manifest = trainer.fit(cfg, resume=args.resume)
        where = Path(cfg.out_dir)
    print(f"trained to step {manifest['global_step']}; checkpoint in {where}")
    return 0


def _load_pipeline(args):
    cfg, nets = trainer.load_networks(args.ckpt)
    face = None
    if getattr(args, "face_ckpt", None):
        _, face = trainer.load_face_module(args.face_ckpt)
    if args.data:
        cfg.data_root = args.data
    dataset = PairDataset(
        cfg.data_root, args.split, image_size=cfg.image_size,
        heatmap_sigma=cfg.heatmap_sigma,
    )
    return cfg, nets, face, dataset


def _run_pairs(cfg, nets, face, dataset):
    for pair in dataset.pairs:
        src_img, src_ann, _ = dataset.load_sample(pair.source)
        tgt_img, tgt_ann, _ = dataset.load_sample(pair.target)
        out = trainer.infer_pair(nets, src_img, src_ann, tgt_ann, cfg, face_module=face)
        yield pair, src_img, tgt_img, tgt_ann, out


def cmd_infer(args) -> int:
    cfg, nets, face, dataset = _load_pipeline(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = 0
    for pair, _, _, _, out in _run_pairs(cfg, nets, face, dataset):
        stem = f"{pair.source.name}__to__{pair.target.name}"
        Image.fromarray(from_unit_range(out["final"])).save(out_dir / f"{stem}.png")
        if args.save_intermediate:
            Image.fromarray(from_unit_range(out["coarse"])).save(out_dir / f"{stem}.coarse.png")
            residual = np.clip(out["residual"], -1.0, 1.0)
            Image.fromarray(from_unit_range(residual)).save(out_dir / f"{stem}.residual.png")
        n += 1
    print(f"wrote {n} transfers to {out_dir}")
    return 0


def cmd_eval(args) -> int:
    cfg, nets, face, dataset = _load_pipeline(args)
    embedder = Embedder.from_provenance(args.embedder)
    extractor = FeatureExtractor.from_provenance(cfg.extractor)

    finals, targets = [], []
    pred_points, gt_points = [], []
    face_pairs = []
    query_vecs, query_pos = [], []
    for pair, _, tgt_img, tgt_ann, out in _run_pairs(cfg, nets, face, dataset):
        finals.append(out["final"])
        targets.append(tgt_img)
        pred_points.append(detect_marker_keypoints(from_unit_range(out["final"])))
        gt = np.concatenate(
            [tgt_ann.keypoints.xy, tgt_ann.keypoints.visible[:, None]], axis=1
        )
        gt_points.append(gt)
        if tgt_ann.face_bbox is not None and tgt_ann.face_bbox.area >= 4:
            face_pairs.append((
                crop_resize_face(out["final"], tgt_ann.face_bbox),
                crop_resize_face(tgt_img, tgt_ann.face_bbox),
            ))
        query_vecs.append(embedder(out["final"]))
        query_pos.append(pair.target.identity)

    if not finals:
        raise ProtocolError(f"split {args.split!r} has no pairs to evaluate")

    ssim_vals = [eval_suite.ssim(f, t) for f, t in zip(finals, targets)]
    emb_final = np.stack(query_vecs)
    emb_real = embedder.embed_batch(targets)
    image_metrics = {
        "ssim": float(np.mean(ssim_vals)),
        "frechet": (
            eval_suite.frechet_distance(emb_final, emb_real)
            if len(finals) >= 2 else float("nan")
        ),
        "perceptual": eval_suite.paired_perceptual_distance(finals, targets, extractor),
    }

    curves = eval_suite.keypoint_error_curve(
        pred_points, gt_points, thresholds=args.thresholds, part_groups=PART_GROUPS
    )

    face_identity = (
        eval_suite.face_identity_eval(face_pairs, embedder) if face_pairs else None
    )

    # retrieval: does the target identity surface among the nearest real images?
    db_names = dataset.manifest["splits"][args.split]
    db_imgs = [dataset.load_sample(dataset.records[n])[0] for n in db_names]
    db_ids = [dataset.records[n].identity for n in db_names]
    ks = [k for k in args.recall_ks if k <= len(db_imgs)]
    retrieval = None
    if ks:
        recall = eval_suite.retrieval_recall(
            emb_final, embedder.embed_batch(db_imgs), query_pos, db_ids, ks=ks
        )
        retrieval = {
            "recall": {str(k): v for k, v in recall.items()},
            "n_queries": len(query_pos),
        }

    report = {
        "schema_version": 1,
        "dataset": {"root": str(cfg.data_root), "split": args.split, "n_pairs": len(finals)},
        "image_metrics": image_metrics,
        "keypoint_accuracy": eval_suite.curves_to_json(curves),
        "face_identity": face_identity,
        "retrieval": retrieval,
        "provenance": {
            "extractor": extractor.provenance,
            "embedder": embedder.provenance,
            "checkpoint": str(args.ckpt),
        },
    }
    eval_suite.save_report(report, args.out)
    print(f"wrote evaluation report to {args.out}")
    return 0


def cmd_synth_data(args) -> int:
    manifest = synth_toy_dataset(
        args.out, n_identities=args.identities, poses_per_identity=args.poses,
        seed=args.seed, image_size=_parse_size(args.size),
    )
    n = len(manifest["samples"])
    print(f"rendered {n} samples into {args.out}")
    return 0


def cmd_viz_guidance(args) -> int:
    cfg, nets, face, dataset = _load_pipeline(args)
    if not 0 <= args.pair < len(dataset.pairs):
        raise ConfigError(f"--pair {args.pair} out of range (have {len(dataset.pairs)})")
    pair = dataset.pairs[args.pair]
    src_img, src_ann, _ = dataset.load_sample(pair.source)
    _, tgt_ann, _ = dataset.load_sample(pair.target)
    out = trainer.infer_pair(nets, src_img, src_ann, tgt_ann, cfg, face_module=face)
    viz = eval_suite.pca_visualize_guidance(out["guidance"])
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(from_unit_range(viz)).save(out_path)
    print(f"wrote guidance projection to {out_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="posetransfer",
        description="Two-branch pose transfer: train, infer, evaluate.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train the model from a JSON config")
    t.add_argument("--config", required=True, help="JSON training config")
    t.add_argument("--data", help="dataset root (overrides config data_root)")
    t.add_argument("--out", help="output directory (overrides config out_dir)")
    t.add_argument("--resume", help="checkpoint directory to resume from")
    t.add_argument("--face", action="store_true", help="train the face stage instead")
    t.set_defaults(fn=cmd_train)

    i = sub.add_parser("infer", help="run inference over a dataset split")
    i.add_argument("--ckpt", required=True, help="checkpoint directory")
    i.add_argument("--face-ckpt", help="face-stage checkpoint directory")
    i.add_argument("--data", help="dataset root (defaults to the training one)")
    i.add_argument("--split", default="test")
    i.add_argument("--out", required=True, help="directory for output images")
    i.add_argument("--save-intermediate", action="store_true",
                   help="also write coarse and residual images")
    i.set_defaults(fn=cmd_infer)

    e = sub.add_parser("eval", help="write the evaluation report JSON")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--face-ckpt")
    e.add_argument("--data")
    e.add_argument("--split", default="test")
    e.add_argument("--out", required=True, help="report JSON path")
    e.add_argument("--embedder", default="fixed-random(seed=3)")
    e.add_argument("--thresholds", type=float, nargs="+",
                   default=list(eval_suite.DEFAULT_THRESHOLDS))
    e.add_argument("--recall-ks", type=int, nargs="+", default=[3, 5, 10])
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("synth-data", help="render the procedural toy dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--identities", type=int, default=4)
    s.add_argument("--poses", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", default="128x88", help="image size as HxW")
    s.set_defaults(fn=cmd_synth_data)

    v = sub.add_parser("viz-guidance", help="PCA projection of a pair's guidance map")
    v.add_argument("--ckpt", required=True)
    v.add_argument("--face-ckpt")
    v.add_argument("--data")
    v.add_argument("--split", default="test")
    v.add_argument("--pair", type=int, default=0, help="pair index within the split")
    v.add_argument("--out", required=True, help="output PNG path")
    v.set_defaults(fn=cmd_viz_guidance)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, AnnotationError, DimensionError, ProtocolError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return 3
    except (IngestionError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
