"""
MorphXAI CLI entry point.
Usage: python -m morphxai [command] [options]
       morphxai [command] [options]  (after pip install)
"""

import argparse
import json
import sys
import traceback
from pathlib import Path

from . import __version__
from .checkpoint import load_checkpoint
from .config import PRESETS, RunConfig
from .datagen import generate_dataset
from .dataset import list_images, load_for_model
from .errors import ConfigError, MorphXAIError, TrainingAborted
from .logger import RunLogger
from .reporting import render_image_report, write_image_report
from .schema import build_vocabulary
from .trainer import Trainer, ablate_lambda, evaluate_model, open_split, resolve_device, write_summary


def _checkpoint_path(args, config: RunConfig) -> Path:
    if args.checkpoint:
        return Path(args.checkpoint).expanduser()
    best = config.checkpoint_dir / "best.pt"
    return best if best.exists() else config.checkpoint_dir / "last.pt"


def cmd_gen_data(args, config: RunConfig):
    out = Path(args.out).expanduser() if args.out else config.path("data_dir")
    manifest = generate_dataset(config.scene, config.data.n_train, config.data.n_val, out, workers=config.data.workers)
    config.save(out / "resolved_config.json")
    print(f"[MorphXAI] Dataset written to {out}")
    print(f"[MorphXAI] train={manifest['splits']['train']['images']} val={manifest['splits']['val']['images']} "
          f"config_hash={manifest['config_hash'][:12]}")


def cmd_train(args, config: RunConfig):
    result = Trainer(config).fit(resume=args.resume)
    print(f"[MorphXAI] Steps: {result.steps}  initial loss: {result.initial_loss}  final loss: {result.final_loss}")
    print(f"[MorphXAI] Log: {result.log_path}")
    if result.best_checkpoint:
        ap = "n/a" if result.best_ap_50 is None else f"{result.best_ap_50:.3f}"
        print(f"[MorphXAI] Best checkpoint (AP.50={ap}): {result.best_checkpoint}")


def cmd_eval(args, config: RunConfig):
    vocab = build_vocabulary()
    path = _checkpoint_path(args, config)
    state = load_checkpoint(path, vocab, map_location=resolve_device(config.train.device))
    split = args.split or config.train.eval_split
    dataset = open_split(config, split, vocab)
    summary = evaluate_model(state.model, dataset, vocab, config, latency=args.latency)
    out = Path(args.out).expanduser() if args.out else config.path("run_dir") / f"eval_{split}.json"
    write_summary(summary, out)
    config.save(out.with_name(f"{out.stem}_config.json"))
    ap = "n/a" if summary.ap_50 is None else f"{summary.ap_50:.3f}"
    print(f"[MorphXAI] {split}: AP.50={ap}  matched={summary.matched}  summary: {out}")


def cmd_infer(args, config: RunConfig):
    vocab = build_vocabulary()
    device = resolve_device(config.train.device)
    state = load_checkpoint(_checkpoint_path(args, config), vocab, map_location=device)
    model = state.model
    out = Path(args.out).expanduser() if args.out else config.path("report_dir")
    images = list_images(Path(args.images).expanduser())
    threshold = config.eval.report_threshold
    for image_path in images:
        pixels, size = load_for_model(image_path, model.config.image_size)
        detections = model.detect(pixels[None].to(device), vocab, threshold)[0]
        write_image_report(render_image_report(detections, image_path.stem, size, vocab), out)
    config.save(out.parent / f"{out.name}_config.json")
    print(f"[MorphXAI] {len(images)} image(s) -> {out}")


def cmd_ablate_lambda(args, config: RunConfig):
    rows = ablate_lambda(config, args.lambdas, Path(args.out).expanduser() if args.out else None)
    for row in rows:
        ap = "n/a" if row["ap_50"] is None else f"{row['ap_50']:.3f}"
        print(f"[MorphXAI] lambda={row['lambda']:g}  AP.50={ap}  run: {row['run_dir']}")


def cmd_logs(args, config: RunConfig):
    logger = RunLogger(config.log_file)
    n = args.n or 20
    entries = logger.tail(n)
    if not entries:
        print("[MorphXAI] No log entries found.")
        return
    for e in entries:
        print(json.dumps(e, sort_keys=True))


def _parse_set(items) -> dict:
    overrides = {}
    for item in items or []:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key] = raw
    return overrides


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="Path to config JSON file (flat dotted keys)")
    common.add_argument("--preset", choices=list(PRESETS), help="Base preset")
    common.add_argument("--lambda", dest="lambda_morph", type=float, help="Morphology loss weight")
    common.add_argument("--seed", type=int, help="Training seed")
    common.add_argument("--threshold", type=float, help="Score threshold (eval / infer)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="Override any dotted config key")

    parser = argparse.ArgumentParser(
        prog="morphxai",
        description="MorphXAI - explainable parasite detection with morphology heads.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
commands:
  gen-data       Render a synthetic annotated dataset
  train          Train the detector (JSON-lines log, last/best checkpoints)
  eval           Evaluate a checkpoint on a split (summary JSON)
  infer          Write per-image morphology reports for a directory of images
  ablate-lambda  Train + evaluate once per morphology loss weight
  logs           Print recent training log records

examples:
  morphxai gen-data --preset overfit
  morphxai train --preset overfit
  morphxai eval --split train --latency
  morphxai infer --images data/val/images --threshold 0.5
  morphxai ablate-lambda --lambdas 0.2 0.5 1.0 2.0
        """,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")

    sub = parser.add_subparsers(dest="command")

    p_gen = sub.add_parser("gen-data", parents=[common], help="Generate synthetic dataset")
    p_gen.add_argument("--out", help="Dataset directory (default: paths.data_dir)")

    p_train = sub.add_parser("train", parents=[common], help="Train")
    p_train.add_argument("--resume", action="store_true", help="Continue from checkpoints/last.pt")

    p_eval = sub.add_parser("eval", parents=[common], help="Evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", help="Checkpoint path (default: best.pt, else last.pt)")
    p_eval.add_argument("--split", choices=("train", "val"), help="Dataset split (default: train.eval_split)")
    p_eval.add_argument("--out", help="Summary JSON path")
    p_eval.add_argument("--latency", action="store_true", help="Also measure latency with and without morphology heads")

    p_infer = sub.add_parser("infer", parents=[common], help="Write morphology reports")
    p_infer.add_argument("--checkpoint", help="Checkpoint path (default: best.pt, else last.pt)")
    p_infer.add_argument("--images", required=True, help="Directory of images")
    p_infer.add_argument("--out", help="Report directory (default: paths.report_dir)")

    p_ablate = sub.add_parser("ablate-lambda", parents=[common], help="Lambda ablation sweep")
    p_ablate.add_argument("--lambdas", type=float, nargs="+", default=[0.2, 0.5, 1.0, 2.0])
    p_ablate.add_argument("--out", help="Ablation directory (default: <run_dir>/ablation)")

    p_logs = sub.add_parser("logs", parents=[common], help="Show recent training log records")
    p_logs.add_argument("--n", type=int, default=20, help="Number of entries to show")

    return parser


def _overrides(args) -> dict:
    overrides = {}
    if args.preset:
        overrides["preset"] = args.preset
    overrides.update(_parse_set(args.set))
    if args.lambda_morph is not None:
        overrides["loss.lambda_morph"] = args.lambda_morph
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.threshold is not None:
        key = "eval.report_threshold" if args.command == "infer" else "eval.score_threshold"
        overrides[key] = args.threshold
    return overrides


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        return 0

    dispatch = {
        "gen-data": cmd_gen_data,
        "train": cmd_train,
        "eval": cmd_eval,
        "infer": cmd_infer,
        "ablate-lambda": cmd_ablate_lambda,
        "logs": cmd_logs,
    }
    try:
        config = RunConfig.load(args.config, _overrides(args))
        dispatch[args.command](args, config)
    except TrainingAborted as exc:
        print(f"[MorphXAI] Training aborted: {exc}", file=sys.stderr)
        return 2
    except (MorphXAIError, OSError) as exc:
        print(f"[MorphXAI] Error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        print("[MorphXAI] Internal error:", file=sys.stderr)
        traceback.print_exc()
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
