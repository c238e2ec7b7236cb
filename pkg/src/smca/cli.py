"""Command-line entry point: train, eval, compare, ablate, visualize, selftest."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import config as config_io
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, TrainConfig
from .data import VAL_STREAM, generate_scene, make_split
from .evaluate import evaluate
from .heatmaps import emit_heatmaps
from .train import TrainingDiverged, ablate, compare, train


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from exc


def _cmd_train(args) -> int:
    if args.print_defaults:
        sys.stdout.write(config_io.dumps(TrainConfig()))
        return 0
    if not args.config or not args.out:
        raise SystemExit("train needs --config and --out (or --print-defaults)")
    cfg = config_io.load(args.config)
    _, log = train(cfg, out_dir=args.out, progress=True)
    print(f"final AP50 {log[-1]['ap50']:.4f}; wrote {Path(args.out) / 'metrics.csv'} and {Path(args.out) / 'model.ckpt'}")
    return 0


def _cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    cfg = model.cfg
    count = args.scenes if args.scenes is not None else cfg.val_scenes
    result = evaluate(model, make_split(args.seed, count, cfg.scene, VAL_STREAM))
    for key, value in result.as_row().items():
        print(f"{key},{value:.6f}")
    return 0


def _cmd_compare(args) -> int:
    cfg_a = config_io.load(args.config_a)
    cfg_b = config_io.load(args.config_b)
    report = compare(cfg_a, cfg_b, args.seeds, out_dir=args.out)
    print((Path(args.out) / "summary.txt").read_text(), end="")
    return 0 if report["margin"] == report["margin"] else 1


def _cmd_ablate(args) -> int:
    base = config_io.load(args.config) if args.config else TrainConfig()
    rows = ablate(base, args.arrangements.split(","), out_dir=args.out)
    for row in rows:
        print(f"{row['encoder']}: {row['encoder_params']} encoder params, loss {row['final_loss']:.4f}, AP50 {row['final_ap50']:.4f}")
    return 0


def _cmd_visualize(args) -> int:
    model = load_checkpoint(args.checkpoint)
    image, _ = generate_scene(args.seed, model.cfg.scene)
    written = emit_heatmaps(model, image, args.out)
    print(f"wrote {len(written)} files to {args.out}")
    return 0


def _cmd_selftest(args) -> int:
    from .selftest import run_all

    results = run_all(include_full_loss=not args.quick)
    for r in results:
        print(r.line(), flush=True)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} suites passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smca", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a config file")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--print-defaults", action="store_true", help="print every config key with its default and exit")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a freshly generated split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--scenes", type=int, help="number of scenes (default: the checkpoint's val_scenes)")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("compare", help="train two configs over several seeds and report the AP50 margin")
    p.add_argument("--config-a", required=True)
    p.add_argument("--config-b", required=True)
    p.add_argument("--seeds", type=_seeds, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("ablate", help="train one model per encoder arrangement")
    p.add_argument("--config")
    p.add_argument("--arrangements", default="3Intra,3Multi,5Intra,2Intra-Multi-2Intra")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("visualize", help="write attention and Gaussian heatmaps for one scene")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_visualize)

    p = sub.add_parser("selftest", help="run the oracle suites")
    p.add_argument("--quick", action="store_true", help="skip the full-loss gradient check")
    p.set_defaults(func=_cmd_selftest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, TrainingDiverged, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
