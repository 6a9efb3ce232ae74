"""Command-line entry points for the whole pipeline.

Every subcommand writes a resolved-config snapshot (flags + seed) next to
its outputs so runs are reproducible from the artifacts alone.
"""

import argparse
import json
import os
import sys
from dataclasses import asdict

import numpy as np
import torch

from . import data, evaluation, pipeline, retrieval, training
from .synthworld import SynthWorldConfig, generate_synth_world


def _snapshot(out_dir: str, name: str, payload: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, f"{name}.config.json"), "w") as fh:
        json.dump(payload, fh, indent=2, default=str)


def cmd_synth(args) -> int:
    cfg = SynthWorldConfig(num_places=args.places,
                           panos_per_place=args.panos_per_place,
                           ego_per_place=args.ego_per_place,
                           city_extent=args.city_extent,
                           texture_seed=args.seed,
                           appearance_variation=args.appearance)
    manifest = generate_synth_world(cfg, args.out)
    _snapshot(args.out, "synth", {"config": asdict(cfg), "seed": args.seed})
    print(f"world written: {manifest}")
    return 0


def cmd_pretrain(args) -> int:
    torch.manual_seed(args.seed)
    model = pipeline.preset_backbone(args.preset, args.image_size)
    cfg = pipeline.desk_stage1_config(args.seed, args.steps,
                                      model.cfg.image_size)
    sources = pipeline.build_stage1_sources(args.manifest,
                                            pairless=args.pairless_augment)
    os.makedirs(args.out, exist_ok=True)
    result = training.run_stage1(model, sources, cfg,
                                 log_path=os.path.join(args.out, "stage1.log"))
    ckpt = os.path.join(args.out, "stage1.pt")
    training.save_checkpoint(ckpt, model, epoch=0,
                             extra={"stage": 1, "steps": result["steps"]})
    _snapshot(args.out, "pretrain",
              {"config": asdict(cfg), "seed": args.seed,
               "preset": args.preset, "pairless": args.pairless_augment,
               "manifest": args.manifest})
    print(f"stage 1 done: {result['steps']} steps, "
          f"final loss {result['losses'][-1]:.4f}, checkpoint {ckpt}")
    return 0


def cmd_finetune(args) -> int:
    model, _ = training.load_checkpoint(args.checkpoint)
    cfg = pipeline.desk_stage2_config(args.seed, args.epochs,
                                      model.cfg.image_size)
    places = pipeline.ego_only_places(data.load_manifest(args.manifest))
    root = os.path.dirname(args.manifest)
    val = pipeline.build_eval_split(args.manifest, model.cfg.image_size,
                                    bearing_seed=101).context
    os.makedirs(args.out, exist_ok=True)
    history = training.run_stage2(model, places, root, cfg, val=val,
                                  log_path=os.path.join(args.out, "stage2.log"))
    ckpt = os.path.join(args.out, "stage2.pt")
    training.save_checkpoint(ckpt, model, epoch=history.get("best_epoch", 0),
                             extra={"stage": 2})
    _snapshot(args.out, "finetune",
              {"config": asdict(cfg), "seed": args.seed,
               "checkpoint": args.checkpoint, "manifest": args.manifest})
    print(f"stage 2 done: best refined R@1 "
          f"{history.get('best_refined_recall1', float('nan')):.3f} "
          f"at epoch {history.get('best_epoch', -1)}, checkpoint {ckpt}")
    return 0


def _load_split(args, model):
    return pipeline.build_eval_split(args.manifest, model.cfg.image_size,
                                     bearing_seed=202, top_n=args.topn)


def cmd_index(args) -> int:
    model, _ = training.load_checkpoint(args.checkpoint)
    split = pipeline.build_eval_split(args.manifest, model.cfg.image_size,
                                      bearing_seed=202)
    index = retrieval.extract_descriptors(model, split.context.db_images,
                                          split.context.db_ids)
    retrieval.save_index(index, args.out, dense_dtype=args.dense_dtype)
    _snapshot(args.out, "index", {"checkpoint": args.checkpoint,
                                  "manifest": args.manifest,
                                  "dense_dtype": args.dense_dtype})
    print(f"index written: {args.out} ({len(index.ids)} images)")
    return 0


def cmd_retrieve(args) -> int:
    model, _ = training.load_checkpoint(args.checkpoint)
    if not os.path.isdir(args.index):
        print(f"error: no index at {args.index}; run `placerec index` first",
              file=sys.stderr)
        return 2
    index = retrieval.load_index(args.index)
    split = _load_split(args, model)
    for qi, qid in enumerate(split.context.query_ids):
        g, r = retrieval.two_stage_query(
            model, index, split.context.query_images[qi], args.topn,
            query_id=qid, refine=not args.no_refine)
        final = r if r is not None else g
        top_id, score = final.candidates[0]
        print(f"{qid}\t{top_id}\t{score:.4f}\t{final.stage}")
    return 0


def cmd_eval(args) -> int:
    model, _ = training.load_checkpoint(args.checkpoint)
    if args.index and not os.path.isdir(args.index):
        print(f"error: no index at {args.index}; run `placerec index` first",
              file=sys.stderr)
        return 2
    split = _load_split(args, model)
    if args.index:
        index = retrieval.load_index(args.index)
    else:
        index = retrieval.extract_descriptors(model, split.context.db_images,
                                              split.context.db_ids)
    ns = [int(n) for n in args.ns.split(",")]
    g_rep, r_rep = evaluation.evaluate_two_stage(
        model, index, split.context.query_images, split.context.query_ids,
        split.context.ground_truth, args.topn, ns, dataset=args.dataset_name)
    reports = [g_rep, r_rep]
    curves = None
    if args.sweep:
        sweep_ns = [int(n) for n in args.sweep.split(",")]
        curve = evaluation.sweep_topn(model, index, split.context.query_images,
                                      split.context.query_ids,
                                      split.context.ground_truth, sweep_ns,
                                      dataset=args.dataset_name)
        curves = {args.dataset_name: curve}
    if args.profile:
        timing = evaluation.profile_compute(model, index,
                                            split.context.query_images,
                                            index_dir=args.index or None,
                                            pool_n=min(args.topn, len(index.ids)))
        r_rep.timing = timing
        if "storage_mb_per_image" in timing:
            r_rep.storage_mb_per_image = timing["storage_mb_per_image"]
    os.makedirs(args.out, exist_ok=True)
    paths = evaluation.emit_report(reports, args.out, sweep_curves=curves)
    _snapshot(args.out, "eval", {"checkpoint": args.checkpoint,
                                 "manifest": args.manifest, "topn": args.topn,
                                 "ns": ns})
    for rep in reports:
        recs = " ".join(f"R@{n}={v:.3f}" for n, v in rep.recalls.items())
        print(f"{rep.dataset} [{rep.stage}] {recs}")
    print(f"report: {paths['csv']}")
    return 0


def cmd_report(args) -> int:
    reports = evaluation.read_report_csv(args.csv)
    for rep in reports:
        recs = " ".join(f"R@{n}={v:.3f}" for n, v in sorted(rep.recalls.items()))
        print(f"{rep.dataset} [{rep.stage}] {recs} "
              f"(queries={rep.num_queries}, excluded={rep.excluded_queries})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="placerec",
        description="Two-stage visual place recognition pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic place world")
    p.add_argument("--out", required=True)
    p.add_argument("--places", type=int, default=50)
    p.add_argument("--panos-per-place", type=int, default=4)
    p.add_argument("--ego-per-place", type=int, default=4)
    p.add_argument("--city-extent", type=float, default=400.0)
    p.add_argument("--appearance", default="mild",
                   choices=["none", "mild", "strong"])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="stage 1: siamese masked pre-training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--preset", default="tiny", choices=["tiny", "vitb"])
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pairless-augment", action="store_true",
                   help="ablation: augmented second view instead of place pairs")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="stage 2: joint descriptor + pair head")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("index", help="build a descriptor + dense-feature index")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dense-dtype", default="float32",
                   choices=["float32", "float16"])
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("retrieve", help="query the index")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--topn", type=int, default=2)
    p.add_argument("--no-refine", action="store_true")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("eval", help="Recall@N evaluation")
    p.add_argument("--manifest", required=True, help="dataset manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", default="")
    p.add_argument("--out", required=True)
    p.add_argument("--topn", type=int, default=2)
    p.add_argument("--ns", default="1,5")
    p.add_argument("--sweep", default="", help="comma list of pool sizes")
    p.add_argument("--profile", action="store_true")
    p.add_argument("--dataset-name", default="synthetic")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="pretty-print an emitted recall CSV")
    p.add_argument("--csv", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
