"""Command-line entry point: train, eval, tit, fold, audit, cost, params, export-weights."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .config import ConfigError, load_run_config
from .data import DatasetError, load_dataset
from .network import CheckpointError, Checkpoint, checkpoint_of, count_params, load_checkpoint
from .training import evaluate, time_inheritance, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_AUDIT = 4
EXIT_NUMERIC = 5

log = logging.getLogger("spikemlp")


def _load_data(path: str | None, split: str):
    if not path:
        raise ConfigError("no dataset path given")
    return load_dataset(path, split)


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    if args.out:
        run = run.replace(out_dir=str(Path(args.out).resolve()))
    run.validate_paths()
    train_data = _load_data(run.dataset, "train")
    eval_data = load_dataset(run.eval_dataset, "test") if run.eval_dataset else None
    net, _ = train(run, train_data, eval_data)
    print(f"wrote {Path(run.out_dir) / 'checkpoint.smlx'}")
    if eval_data is not None:
        print(f"eval_acc {evaluate(net, eval_data):.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    net, _ = load_checkpoint(args.ckpt, args.t)
    data = load_dataset(args.data, args.split)
    print(f"top1 {evaluate(net, data):.4f}")
    return EXIT_OK


def cmd_tit(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    data_path = args.data or ckpt.run.dataset
    train_data = _load_data(data_path, "train")
    eval_path = args.eval_data or ckpt.run.eval_dataset
    eval_data = load_dataset(eval_path, "test") if eval_path else None
    out = args.out or str(Path(args.ckpt).resolve().parent)
    net, _ = time_inheritance(ckpt, args.t, args.epochs, train_data, eval_data, out, lr0=args.lr0)
    print(f"wrote {Path(out) / f'checkpoint_T{args.t}.smlx'}")
    if eval_data is not None:
        print(f"eval_acc {evaluate(net, eval_data):.4f}")
    return EXIT_OK


def cmd_fold(args) -> int:
    net, ckpt = load_checkpoint(args.ckpt)
    folded = net.eval().fold()
    checkpoint_of(folded, ckpt.run, ckpt.epoch).save(args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def _sample(data, n: int) -> np.ndarray:
    return data.images[:n] if n else data.images


def cmd_audit(args) -> int:
    net, _ = load_checkpoint(args.folded)
    if not net.is_folded:
        print("error: fold first (checkpoint holds unfolded batch-norm layers)", file=sys.stderr)
        return EXIT_AUDIT
    if args.per_position:
        net.set_head_pool(False)
    images = _sample(load_dataset(args.data, args.split), args.samples)
    batches = [images[i:i + args.batch_size] for i in range(0, len(images), args.batch_size)]
    report = analysis.audit_mfi(net, batches, workers=args.workers)
    print(json.dumps(report.summary(), sort_keys=True, indent=1))
    return EXIT_OK if report.passed else EXIT_AUDIT


def cmd_cost(args) -> int:
    net, _ = load_checkpoint(args.ckpt, args.t)
    if not net.is_folded:
        net = net.eval().fold()
    if args.per_position:
        net.set_head_pool(False)
    images = _sample(load_dataset(args.data, args.split), args.samples)
    print(analysis.cost_report(net, images).to_text())
    return EXIT_OK


def cmd_params(args) -> int:
    print(count_params(load_run_config(args.config).network))
    return EXIT_OK


def cmd_export(args) -> int:
    net, _ = load_checkpoint(args.ckpt)
    rf = tuple(args.rf) if args.rf else None
    for p in analysis.export_token_weights(net, args.block, args.out, args.format, rf):
        print(f"wrote {p}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spikemlp", description="Spiking MLP training and cost analysis")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="override out_dir")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="top-1 accuracy of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--t", type=int, default=None, help="simulation steps (default: checkpoint T)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("tit", help="time-inheritance fine-tune at a new T")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--t", type=int, required=True)
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--data", help="training set (default: the checkpoint's)")
    p.add_argument("--eval-data", help="eval set (default: the checkpoint's)")
    p.add_argument("--lr0", type=float, default=None)
    p.add_argument("--out", help="output directory (default: next to the checkpoint)")
    p.set_defaults(fn=cmd_tit)

    p = sub.add_parser("fold", help="fold batch norm into the weights")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_fold)

    p = sub.add_parser("audit", help="multiplication-free inference audit of a folded checkpoint")
    p.add_argument("--folded", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--per-position", action="store_true", help="classify per-position spikes (no pooling)")
    p.set_defaults(fn=cmd_audit)

    p = sub.add_parser("cost", help="spike rates, addition counts and energy")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--t", type=int, default=None)
    p.add_argument("--per-position", action="store_true")
    p.set_defaults(fn=cmd_cost)

    p = sub.add_parser("params", help="parameter count of a config")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_params)

    p = sub.add_parser("export-weights", help="write axial token weights as CSV or PGM")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--block", required=True, help="e.g. stage1.mixer0.token or stage1.mixer0.token.w_h")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("csv", "pgm"), default="csv")
    p.add_argument("--rf", type=int, nargs=2, metavar=("ROW", "COL"), help="export one receptive field")
    p.set_defaults(fn=cmd_export)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except FloatingPointError as e:  # NumericError included
        print(f"error: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, CheckpointError, DatasetError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except analysis.NotFoldedError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_AUDIT


if __name__ == "__main__":
    sys.exit(main())
