"""Command-line interface.

Subcommands: train, eval, gradcheck, ablate, v2v-annotate, stats, synth.
Every run that produces metrics appends a machine-readable JSON line
(run id, config hash, metrics) next to its other outputs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import uuid

import torch

from . import evaluator, pipeline, trainer
from .config import Config, desk_profile, paper_profile
from .corpus import batch_iter, write_captions, write_frame_features


def _load_config(args) -> Config:
    if args.config:
        return Config.load(args.config)
    if args.profile == "paper":
        return paper_profile()
    return desk_profile()


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="config JSON file")
    p.add_argument(
        "--profile", choices=("desk", "paper"), default="desk",
        help="built-in profile when no --config is given",
    )


def _ensure_corpus_data(cfg: Config) -> Config:
    """Commands that only need a vocabulary (stats, gradcheck) can run a
    files-mode config without files by substituting a synthetic corpus."""
    if cfg.data.kind == "files" and not cfg.data.feature_file:
        print("note: no corpus files configured; using a synthetic stand-in "
              "for vocabulary construction", file=sys.stderr)
        d_frame = cfg.data.d_frame
        cfg = cfg.with_overrides({"data.kind": "synthetic"})
        cfg.data.d_frame = d_frame
    return cfg


def cmd_train(args) -> int:
    cfg = _load_config(args)
    os.makedirs(args.out, exist_ok=True)
    result = pipeline.train_run(cfg, out_dir=args.out)
    trainer.save_checkpoint(f"{args.out}/final.ckpt", result.model)
    result.log.save(f"{args.out}/trainlog.json")
    evaluator.write_run_record(
        f"{args.out}/runs.jsonl",
        run_id=uuid.uuid4().hex[:12],
        config_hash=result.config.config_hash(),
        metrics=result.metrics.as_dict(),
    )
    if args.emit_plots:
        os.makedirs(args.emit_plots, exist_ok=True)
        evaluator.emit_plots(result.log.entries, args.emit_plots)
    print(evaluator.format_table([{"cell": "test", **result.metrics.as_dict()}]))
    print(f"best epoch {result.log.best_epoch} "
          f"(objective {result.log.best_value:.4f}); outputs in {args.out}")
    return 0


def cmd_eval(args) -> int:
    ckpt = trainer.load_checkpoint(args.checkpoint)
    model = trainer.restore_model(ckpt)
    cfg = Config.from_dict(ckpt.config)
    splits = dict(zip(("train", "val", "test"), pipeline.load_corpus(cfg)))
    if args.split not in splits:
        print(f"unknown split {args.split!r}", file=sys.stderr)
        return 2
    split = splits[args.split]
    if args.direction == "t2v":
        sims = evaluator.similarity_matrix(model, split, direction="t2v")
        metrics = evaluator.rank_metrics(sims, evaluator.t2v_ground_truth(split))
        row = {"cell": f"t2v/{args.split}", **metrics.as_dict()}
    else:
        annotation = evaluator.build_v2v_annotations(split, threshold=args.threshold)
        if not annotation.queries:
            print("no v2v queries above the relevance threshold", file=sys.stderr)
            return 1
        metrics, _ = evaluator.v2v_metrics(
            model, split, annotation, branch=args.branch, space=args.space,
            graded=args.graded,
        )
        row = {"cell": f"v2v/{args.split}/{args.branch}", **metrics.as_dict()}
    print(evaluator.format_table([row]))
    if metrics.ndcg is not None:
        print(f"nDCG: {metrics.ndcg:.4f}")
    if args.dump_attention:
        evaluator.dump_attention(model, split, args.dump_attention)
        print(f"attention weights written to {args.dump_attention}")
    if args.report:
        evaluator.write_run_record(
            args.report, uuid.uuid4().hex[:12], cfg.config_hash(), metrics.as_dict()
        )
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _ensure_corpus_data(_load_config(args))
    train_split, _, _ = pipeline.load_corpus(cfg)
    model, eff_cfg = pipeline.build_model(cfg, train_split)
    if eff_cfg.train.dtype != "float64":
        print("warning: gradient checking is meaningful at float64 only",
              file=sys.stderr)
    batch = next(batch_iter(train_split, args.batch, seed=eff_cfg.train.seed))
    report = trainer.gradient_check(
        model, lambda: model.batch_loss(batch).total, eps=args.eps,
        max_coords_per_group=args.limit,
    )
    print(report.format_table())
    print(f"eps={report.eps:g}  overall max rel error {report.max_rel_error:.3e}")
    return 0 if report.max_rel_error < 1e-4 else 1


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    with open(args.grid, encoding="utf-8") as f:
        grid = json.load(f)
    rows = pipeline.run_ablation(
        cfg, grid, out_dir=args.out, max_epochs=args.max_epochs
    )
    print(evaluator.format_table([r for r in rows if "skipped" not in r]))
    for r in rows:
        if "skipped" in r:
            print(f"skipped {r['cell']}: {r['skipped']}")
    return 0


def cmd_v2v_annotate(args) -> int:
    cfg = _load_config(args)
    splits = dict(zip(("train", "val", "test"), pipeline.load_corpus(cfg)))
    annotation = evaluator.build_v2v_annotations(
        splits[args.split], threshold=args.threshold
    )
    payload = {
        "threshold": annotation.threshold,
        "queries": annotation.queries,
        "relevant": {q: sorted(v) for q, v in annotation.relevant.items()},
        "pair_similarity": {
            f"{a}|{b}": s for (a, b), s in sorted(annotation.pair_similarity.items())
        },
    }
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text + "\n")
        print(f"{len(annotation.queries)} query videos; annotations in {args.out}")
    else:
        print(text)
    return 0


def cmd_stats(args) -> int:
    cfg = _ensure_corpus_data(_load_config(args))
    train_split, _, _ = pipeline.load_corpus(cfg)
    model, _ = pipeline.build_model(cfg, train_split)
    stats = evaluator.model_stats(model, m=args.frames, sentence_len=args.tokens)
    print(f"trainable parameters: {stats.parameters:,}")
    print(f"multiply-accumulates per pair (m={args.frames}, L={args.tokens}): "
          f"{stats.macs:,}")
    for part, macs in sorted(stats.breakdown.items()):
        print(f"  {part:<10} {macs:>14,}")
    return 0


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    os.makedirs(args.out, exist_ok=True)
    splits = dict(zip(("train", "val", "test"), pipeline.load_corpus(cfg)))
    videos = [v for s in splits.values() for v in s.videos]
    write_frame_features(f"{args.out}/features.bin", videos)
    caption_files = {}
    for name, split in splits.items():
        path = f"{args.out}/captions_{name}.tsv"
        write_captions(path, split.captions)
        caption_files[name] = path
    files_cfg = {
        "kind": "files",
        "feature_file": f"{args.out}/features.bin",
        "caption_files": caption_files,
    }
    print(json.dumps({"data": files_cfg}, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="skimread",
        description="Two-branch video representation learning for text-to-video retrieval",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and evaluate the test split")
    _add_config_args(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--emit-plots", help="directory for metric-vs-epoch SVG curves")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--direction", choices=("t2v", "v2v"), default="t2v")
    p.add_argument("--branch", choices=("preview", "intensive", "both"), default="both")
    p.add_argument("--space", choices=("raw", "latent"), default="raw")
    p.add_argument("--threshold", type=float, default=0.2)
    p.add_argument("--graded", action="store_true", help="graded nDCG gains")
    p.add_argument("--dump-attention", help="write attention weights to this file")
    p.add_argument("--report", help="append a JSONL run record to this file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    _add_config_args(p)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--batch", type=int, default=3)
    p.add_argument(
        "--limit", type=int, default=0,
        help="coordinates checked per parameter tensor (0 = all; exhaustive "
             "checks on wide configs can take tens of minutes)",
    )
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train/evaluate an ablation grid")
    _add_config_args(p)
    p.add_argument("--grid", required=True, help="JSON file: dotted key -> value list")
    p.add_argument("--out", help="output directory for reports")
    p.add_argument("--max-epochs", type=int, help="override epochs for every cell")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("v2v-annotate", help="derive video-to-video relevance")
    _add_config_args(p)
    p.add_argument("--split", default="test")
    p.add_argument("--threshold", type=float, default=0.2)
    p.add_argument("--out", help="output JSON file")
    p.set_defaults(func=cmd_v2v_annotate)

    p = sub.add_parser("stats", help="parameter count and per-pair MAC estimate")
    _add_config_args(p)
    p.add_argument("--frames", type=int, default=32)
    p.add_argument("--tokens", type=int, default=8)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("synth", help="write a synthetic corpus to corpus files")
    _add_config_args(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv: list[str] | None = None) -> int:
    torch.set_num_threads(1)
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
