"""``masscrf`` command line: synth | train | eval | gradcheck.

Exit codes: 0 success, 1 usage/config/input error, 2 numeric failure at run time.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional

from threadpoolctl import threadpool_limits

from . import config as config_mod
from . import dataio, gradcheck, plotting
from .checkpoint import Checkpoint
from .errors import BadParam, ConfigError, DegenerateGradient, MassCrfError, NonFinite
from .trainer import TRIMAP_WIDTHS, VARIANTS, evaluate, train

logger = logging.getLogger("masscrf")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2
THREADS_ENV = "MASSCRF_THREADS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 by default, which is reserved for numeric failures here
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat 'key = value' file; flags override it")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--seed", type=int, help="RNG seed (generator, training or first gradcheck instance)")
    common.add_argument("--quiet", action="store_true", help="only warnings on stderr")

    p = _Parser(prog="masscrf", description="Mass segmentation with FCN, CRF and adversarial training.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic ROI dataset")
    s.add_argument("--count", type=int, help="number of (train) pairs")
    s.add_argument("--test-count", type=int, help="also write a test split drawn after the train samples")
    s.add_argument("--contrast", type=float)
    s.add_argument("--noise", dest="noise_sigma", type=float, help="Gaussian noise std")

    t = sub.add_parser("train", parents=[common], help="train one variant")
    t.add_argument("--variant", help=f"one of: {', '.join(VARIANTS)}")
    t.add_argument("--epsilon", type=float, help="adversarial perturbation norm")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--data", help="dataset directory (its train/ subdirectory is used if present)")
    t.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint")

    e = sub.add_parser("eval", parents=[common], help="score a checkpoint on a test set")
    e.add_argument("--checkpoint", help="checkpoint file")
    e.add_argument("--data", help="dataset directory (its test/ subdirectory is used if present)")
    e.add_argument("--variant", help="refuse checkpoints of any other variant")
    e.add_argument("--steps", type=int, help="mean-field steps at test time")
    e.add_argument("--overlays", type=int, help="write contour overlays for the first N samples")

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    g.add_argument("--op", action="append", help=f"restrict to op (repeatable): {', '.join(gradcheck.CHECKS)}")
    g.add_argument("--instances", type=int, default=20, help="random instances per op")
    return p


# ---------------------------------------------------------------------------


def _resolve(args, keys) -> tuple:
    file_layer = config_mod.load_file(args.config) if args.config else {}
    flags = {k: getattr(args, k, None) for k in keys}
    flags["out"] = args.out
    flags["seed"] = args.seed
    explicit = {k for k, v in {**file_layer, **flags}.items() if v is not None}
    return config_mod.resolve(file_layer, flags), explicit


def _load_split(path: str, split: str) -> dataio.Dataset:
    if not path:
        raise ConfigError("no dataset given (use --data or 'data = ...' in the config)")
    root = Path(path)
    if (root / split).is_dir():
        root = root / split
    manifest = root / "manifest.json"
    synthetic = manifest.exists() and json.loads(manifest.read_text()).get("generator") == "synth"
    # synthetic ROIs are generated already in the enhanced [0, 1] domain
    return dataio.load_masks_dir(root, split=split, enhance_images=not synthetic)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def cmd_synth(args) -> int:
    rc, _ = _resolve(args, ("count", "test_count", "contrast", "noise_sigma"))
    if rc.count < 1:
        raise BadParam(f"--count must be >= 1, got {rc.count}")
    if rc.test_count < 0:
        raise BadParam(f"--test-count must be >= 0, got {rc.test_count}")
    out = Path(rc.out)
    seed = rc.train.seed
    if rc.test_count:
        tr, te = dataio.standard_benchmark(seed, rc.count, rc.test_count, rc.contrast, rc.noise_sigma)
        dataio.write_dataset(tr, out / "train")
        dataio.write_dataset(te, out / "test")
        logger.info("wrote %d train and %d test pairs to %s", len(tr), len(te), out)
    else:
        ds = dataio.synth_generate(rc.count, seed, rc.contrast, rc.noise_sigma)
        dataio.write_dataset(ds, out)
        logger.info("wrote %d pairs to %s", len(ds), out)
    config_mod.echo(rc, out)
    return EXIT_OK


def _read_metrics(path: Path, upto: int) -> list:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return [r for r in csv.reader(fh)][1:][:upto]


def cmd_train(args) -> int:
    rc, _ = _resolve(args, ("variant", "epsilon", "epochs", "batch_size", "lr", "data"))
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    config_mod.echo(rc, out)
    dataset = dataio.augment(_load_split(rc.data, "train"))
    resume = Checkpoint.load(args.resume) if args.resume else None
    metrics_path = out / "metrics.csv"
    rows = _read_metrics(metrics_path, resume.epoch) if resume is not None else []
    ckpt_path = out / "checkpoint.bin"

    def on_epoch(ckpt, entry):
        rows.append([entry.epoch, repr(entry.loss), repr(entry.dice_train)])
        ckpt.save(ckpt_path)
        _write_csv(metrics_path, ("epoch", "loss", "dice_train"), rows)

    ckpt, _ = train(dataset, rc.train, resume=resume, on_epoch=on_epoch)
    ckpt.save(ckpt_path)
    _write_csv(metrics_path, ("epoch", "loss", "dice_train"), rows)
    if rows:
        plotting.loss_curve([int(r[0]) for r in rows], [float(r[1]) for r in rows], [float(r[2]) for r in rows], out / "loss.png")
    logger.info("checkpoint written to %s", ckpt_path)
    return EXIT_OK


def cmd_eval(args) -> int:
    rc, explicit = _resolve(args, ("checkpoint", "data", "variant", "steps", "overlays"))
    if not rc.checkpoint:
        raise ConfigError("no checkpoint given (use --checkpoint)")
    ckpt = Checkpoint.load(rc.checkpoint)
    dataset = _load_split(rc.data, "test")
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    config_mod.echo(rc, out)
    variant = rc.train.variant if "variant" in explicit else None
    report = evaluate(ckpt, dataset, variant=variant, steps=rc.steps or None)

    _write_csv(out / "dice.csv", ("sample_id", "dice"), [(i, repr(d)) for i, d in zip(report.ids, report.dice)])
    _write_csv(
        out / "summary.csv",
        ("variant", "n_samples", "mean_dice", "both_empty"),
        [(report.variant, len(report.dice), repr(report.mean_dice), report.both_empty)],
    )
    widths = list(TRIMAP_WIDTHS)
    acc = [report.trimap[w] for w in widths]
    _write_csv(out / "trimap.csv", ("width", "accuracy"), [(w, repr(a)) for w, a in zip(widths, acc)])
    plotting.trimap_curve(widths, acc, out / "trimap.png", label=report.variant)
    images, masks = dataset.images(), dataset.masks()
    for k in range(min(rc.overlays, len(dataset))):
        sid = report.ids[k]
        plotting.contour_overlay(
            images[k], masks[k], report.predictions[k], out / "overlays" / f"overlay_{sid}.png", f"{sid}  Dice {report.dice[k]:.3f}"
        )
    print(f"{report.variant}: mean Dice {report.mean_dice:.4f} over {len(report.dice)} samples")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.instances < 1:
        raise BadParam("--instances must be >= 1")
    start = 0 if args.seed is None else args.seed
    ops = args.op
    if ops:
        unknown = [o for o in ops if o not in gradcheck.CHECKS]
        if unknown:
            raise BadParam(f"unknown op(s) {', '.join(unknown)}; available: {', '.join(gradcheck.CHECKS)}")
    results = gradcheck.run(ops, range(start, start + args.instances))
    summary = {}
    for r in results:
        worst, tol, ok = summary.get(r.op, (0.0, r.tol, True))
        summary[r.op] = (max(worst, r.max_rel_error), tol, ok and r.passed)
    lines = [f"{'op':<24}{'max_rel_error':>16}{'tol':>10}  result"]
    for op, (worst, tol, ok) in summary.items():
        lines.append(f"{op:<24}{worst:>16.3e}{tol:>10.0e}  {'PASS' if ok else 'FAIL'}")
    print("\n".join(lines))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "gradcheck.csv", ("op", "seed", "max_rel_error", "tol", "passed"), [(r.op, r.seed, repr(r.max_rel_error), r.tol, r.passed) for r in results])
    return EXIT_OK if all(ok for _, _, ok in summary.values()) else EXIT_NUMERIC


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def _threads() -> Optional[int]:
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(message)s")
    try:
        with threadpool_limits(limits=_threads()):
            return COMMANDS[args.command](args)
    except (NonFinite, DegenerateGradient) as exc:
        print(f"masscrf: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except BadParam as exc:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        print(f"{sub.format_usage()}masscrf {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MassCrfError, OSError) as exc:
        print(f"masscrf {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
