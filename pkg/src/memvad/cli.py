"""Command line entry point: ``memvad <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from memvad import datasets, pipeline
from memvad.config import PRESETS, build_config, load_config_file

logger = logging.getLogger("memvad")


def _bool_flag(parser, name, help_text):
    dest = name.replace("-", "_")
    group = parser.add_mutually_exclusive_group()
    group.add_argument(f"--{name}", dest=dest, action="store_true", default=None, help=help_text)
    group.add_argument(f"--no-{name}", dest=dest, action="store_false", default=None)


def _common(parser):
    parser.add_argument("--config", help="YAML/JSON file with option values")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default=None, help="output directory")


def _run_options(parser):
    parser.add_argument("--preset", choices=sorted(PRESETS))
    parser.add_argument("--dataset")
    parser.add_argument("--task", choices=["prediction", "reconstruction", "denoise_reconstruction"])
    _bool_flag(parser, "memory", "enable the memory module")
    _bool_flag(parser, "skips", "enable skip connections")
    parser.add_argument("--lam", type=float, help="PSNR weight of the abnormality score")
    parser.add_argument("--memory-size", type=int)
    parser.add_argument("--feature-dim", type=int)
    parser.add_argument("--image-size", type=int, nargs=2, metavar=("H", "W"))
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--weight-compact", type=float)
    parser.add_argument("--weight-separate", type=float)
    parser.add_argument("--weight-uniform", type=float)
    parser.add_argument("--margin", type=float)
    _bool_flag(parser, "uniform-supervision", "add the uniform memory-distribution loss")
    _bool_flag(parser, "test-time-update", "update memory while evaluating")
    parser.add_argument("--noise-ratio", type=float)
    parser.add_argument("--checkpoint-every", type=int)


RUN_KEYS = {
    "dataset": "dataset", "task": "task", "memory": "use_memory", "skips": "use_skips", "lam": "lam",
    "memory_size": "memory_size", "feature_dim": "feature_dim", "image_size": "image_size",
    "epochs": "epochs", "batch_size": "batch_size", "lr": "lr", "weight_compact": "weight_compact",
    "weight_separate": "weight_separate", "weight_uniform": "weight_uniform", "margin": "margin",
    "uniform_supervision": "uniform_supervision", "test_time_update": "test_time_update",
    "noise_ratio": "noise_ratio", "checkpoint_every": "checkpoint_every", "seed": "seed", "out": "out_dir",
}


def _run_config(args):
    overrides = {cfg_key: getattr(args, arg) for arg, cfg_key in RUN_KEYS.items()}
    return build_config(args.config, args.preset, overrides)


def cmd_train(args):
    cfg = _run_config(args)
    result = pipeline.train(cfg)
    print(json.dumps({"checkpoint": str(result.checkpoint), "log": str(result.log_path),
                      "epoch_loss": result.epoch_means()}, indent=2))


def cmd_eval(args):
    result = pipeline.evaluate(
        args.checkpoint,
        dataset_root=args.dataset,
        lam=args.lam,
        test_time_update=args.test_time_update,
        out_dir=args.out or Path(args.checkpoint).parent / "eval",
        lambda_grid=args.lambda_grid or (),
    )
    print(json.dumps({"auc": result.auc, "lambda": result.lam, "scores": str(result.scores_csv),
                      "lambda_grid": result.lambda_grid}, indent=2))


def cmd_synth(args):
    spec = datasets.SynthSpec(
        train_videos=args.train_videos,
        train_frames=args.train_frames,
        test_videos_per_class=args.test_videos,
        normal_frames=args.normal_frames,
        anomaly_frames=args.anomaly_frames,
        seed=args.seed or 0,
    )
    root = Path(args.out or "data/synthetic")
    datasets.write_synthetic_dataset(root, spec)
    print(root)


def cmd_extract(args):
    out = Path(args.out or "frames")
    total = 0
    for video in args.videos:
        target = out if len(args.videos) == 1 and not args.per_video_dirs else out / Path(video).stem
        n = datasets.extract_frames(video, target)
        logger.info("%s: %d frames -> %s", video, n, target)
        total += n
    print(total)


def cmd_memdist(args):
    counts, csv_path, png_path = pipeline.plot_memory_distribution(
        args.checkpoint, args.dataset, args.out or ".", split=args.split
    )
    print(json.dumps({"counts": counts.tolist(), "csv": str(csv_path), "png": str(png_path)}))


def cmd_embed(args):
    sampled, dump, png = pipeline.plot_embeddings(
        args.checkpoint, args.dataset, args.samples, args.out or ".", split=args.split,
        method=args.method, seed=args.seed or 0,
    )
    print(json.dumps({"samples": len(sampled), "dump": str(dump), "png": str(png)}))


def cmd_ablate(args):
    cfg = _run_config(args)
    rows = pipeline.run_ablation_suite(cfg, args.out or cfg.out_dir)
    print(json.dumps(rows, indent=2))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="memvad", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on normal frames")
    _common(p)
    _run_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a test split and report frame AUC")
    _common(p)
    p.add_argument("checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--lam", type=float)
    p.add_argument("--lambda-grid", type=float, nargs="+", help="also report AUC for these lambdas")
    _bool_flag(p, "test-time-update", "update memory while evaluating")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="write the synthetic moving-shapes dataset")
    _common(p)
    p.add_argument("--train-videos", type=int, default=8)
    p.add_argument("--train-frames", type=int, default=32)
    p.add_argument("--test-videos", type=int, default=4, help="test videos per anomaly class")
    p.add_argument("--normal-frames", type=int, default=24)
    p.add_argument("--anomaly-frames", type=int, default=24)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract-frames", help="split videos into numbered frames")
    _common(p)
    p.add_argument("videos", nargs="+")
    p.add_argument("--per-video-dirs", action="store_true", help="write each video to OUT/<stem>/")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("plot-memdist", help="histogram of query-to-item assignments")
    _common(p)
    p.add_argument("checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--split", default="train", choices=["train", "test"])
    p.set_defaults(func=cmd_memdist)

    p = sub.add_parser("plot-embed", help="dump queries and draw a 2-D projection")
    _common(p)
    p.add_argument("checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--samples", type=int, default=500)
    p.add_argument("--split", default="train", choices=["train", "test"])
    p.add_argument("--method", default="tsne", choices=["tsne", "pca"])
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("ablate", help="run the separateness/compactness/test-time-update grid")
    _common(p)
    _run_options(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def _apply_config_defaults(parser, argv):
    """Let ``--config`` supply defaults for commands that do not build a RunConfig."""
    args = parser.parse_args(argv)
    if args.config and args.command not in ("train", "ablate"):
        values = {k.replace("-", "_"): v for k, v in load_config_file(args.config).items()}
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        sub.set_defaults(**{k: v for k, v in values.items() if k in known})
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    parser = build_parser()
    args = _apply_config_defaults(parser, argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        args.func(args)
    except (ValueError, IOError, FloatingPointError) as exc:
        logger.error("%s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
