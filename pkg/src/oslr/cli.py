"""Command-line entry point: ``oslr {gen-data,train,eval,infer,gradcheck}``.

Exit codes: 0 ok, 1 usage, 2 data/format error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import metrics
from .config import RunConfig, load_run_config
from .errors import FormatError, NumericError, ShapeError
from .gradcheck import EXTRA_CASES, format_table, run_suite
from .model import as_input, load_checkpoint, predict_mask
from .pnm import read_pnm, write_pgm, write_ppm
from .synth import (
    gen_triplets,
    make_classes,
    split_one_shot,
    split_triplets,
    triplet_count,
    write_dataset,
)
from .train import Trainer, evaluate_dataset

log = logging.getLogger("oslr")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
BOX_COLOR = (0, 255, 0)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", help="built-in preset: desk or paper")
    p.add_argument("--config", help="key = value config file")
    keys = p.add_argument_group("config keys (override file and OSLR_* env)")
    for key in RunConfig.keys():
        keys.add_argument("--" + key.replace("_", "-"), dest=key, default=None, metavar="V")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="oslr", description="One-shot query-based logo detection.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate synthetic triplet datasets")
    _add_config_flags(p)
    p.add_argument("--out", dest="out_dir", default=None, help="output directory")
    p.add_argument("--dry-run", action="store_true", help="report triplet counts without rendering")

    p = sub.add_parser("train", help="train a model")
    _add_config_flags(p)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    _add_config_flags(p)
    p.add_argument("--data", dest="test_data", default=None)

    p = sub.add_parser("infer", help="predict a mask for one query/target pair")
    _add_config_flags(p)
    p.add_argument("--query", required=True, help="query image (PPM)")
    p.add_argument("--target", required=True, help="target image (PPM)")

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--all", action="store_true", help="also check the ablation variants end to end")
    return parser


def _run_config(args) -> RunConfig:
    overrides = {k: getattr(args, k, None) for k in RunConfig.keys()}
    try:
        return load_run_config(args.preset, args.config, overrides)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    rc = _run_config(args)
    if rc.per_class < 2:
        raise UsageError("--per-class must be at least 2")
    out = Path(rc.out_dir)
    n = rc.per_class
    print(f"classes              {rc.classes}")
    print(f"images per class     {n}")
    print(f"triplets per class   {n * (n - 1)}")
    print(f"total triplets       {triplet_count(rc.classes, n)}")

    if rc.regime == "one_shot":
        if not 0 < rc.train_classes < rc.classes:
            raise UsageError("--train-classes must be between 1 and classes-1")
        pool_classes, test_classes, test_n = rc.train_classes, rc.classes - rc.train_classes, n
    else:
        if rc.test_per_class < 2:
            raise UsageError("--test-per-class must be at least 2")
        pool_classes, test_classes, test_n = rc.classes, rc.classes, rc.test_per_class
    pool = triplet_count(pool_classes, n)
    n_train = int(pool * 0.9 + 1e-9)
    print(f"regime               {rc.regime}")
    print(f"train triplets       {n_train}")
    print(f"val triplets         {pool - n_train}")
    print(f"test triplets        {triplet_count(test_classes, test_n)}")
    if args.dry_run:
        return EXIT_OK

    gen = rc.gen_config()
    classes = make_classes(rc.seed, rc.classes)
    if rc.regime == "one_shot":
        train_cls, test_cls = split_one_shot(classes, rc.seed, rc.train_classes)
        pool_ds = gen_triplets(train_cls, n, rc.seed, gen)
        test_ds = gen_triplets(test_cls, n, rc.seed, gen)
    else:
        pool_ds = gen_triplets(classes, n, rc.seed, gen)
        test_ds = gen_triplets(classes, rc.test_per_class, rc.seed, gen, first_image=n)
    tr_idx, va_idx = split_triplets(len(pool_ds), rc.seed)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for name, ds in (("train", pool_ds.subset(tr_idx)), ("val", pool_ds.subset(va_idx)), ("test", test_ds)):
            ds.meta["regime"] = rc.regime
            ds.meta["split"] = name
            write_dataset(ds, out / f"{name}.osds")
            print(f"wrote {out / f'{name}.osds'} ({len(ds)} triplets, classes {ds.class_ids()})")
    except OSError as exc:
        raise FormatError(f"cannot write to {out}: {exc}") from exc
    return EXIT_OK


def cmd_train(args) -> int:
    from .synth import read_dataset

    rc = _run_config(args)
    if not rc.train_data:
        raise UsageError("--train-data is required")
    ds = read_dataset(rc.train_data)
    out = Path(rc.out_dir)
    settings = rc.train_settings()
    if args.resume:
        trainer = Trainer.resume(args.resume, settings)
        print(f"resumed from {args.resume} at iteration {trainer.iteration}")
    else:
        trainer = Trainer(rc.model_config(), settings)
    losses = trainer.fit(ds, rc.iterations, log_path=out / "loss.csv", checkpoint_dir=out)
    if losses:
        print(f"iteration {trainer.iteration}: final loss {losses[-1]:.6f}")
    print(f"checkpoint {out / 'final.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .synth import read_dataset

    rc = _run_config(args)
    if not rc.checkpoint or not rc.test_data:
        raise UsageError("--checkpoint and --data (or --test-data) are required")
    params, config = load_checkpoint(rc.checkpoint)
    ds = read_dataset(rc.test_data)
    try:
        report = evaluate_dataset(
            params, config, ds, k=rc.k, threshold=rc.eval_threshold, iou_thr=rc.iou_threshold, use_global_box=rc.global_box
        )
    except ShapeError:
        raise
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(rc.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"report_k{rc.k}.txt").write_text(report.to_text())
    (out / f"report_k{rc.k}.csv").write_text(report.to_csv())
    print(report.to_text(), end="")
    return EXIT_OK


def draw_boxes(rgb: np.ndarray, boxes, color=BOX_COLOR) -> np.ndarray:
    """Copy of ``rgb`` with one-pixel box outlines."""
    img = rgb.copy()
    for b in boxes:
        img[b.y_min, b.x_min : b.x_max + 1] = color
        img[b.y_max, b.x_min : b.x_max + 1] = color
        img[b.y_min : b.y_max + 1, b.x_min] = color
        img[b.y_min : b.y_max + 1, b.x_max] = color
    return img


def cmd_infer(args) -> int:
    rc = _run_config(args)
    if not rc.checkpoint:
        raise UsageError("--checkpoint is required")
    params, config = load_checkpoint(rc.checkpoint)
    query, target = read_pnm(args.query), read_pnm(args.target)
    if query.shape != (config.query_size, config.query_size, 3):
        raise FormatError(f"query must be a {config.query_size}x{config.query_size} PPM, got {query.shape}")
    if target.shape != (config.target_size, config.target_size, 3):
        raise FormatError(f"target must be a {config.target_size}x{config.target_size} PPM, got {target.shape}")
    prob = predict_mask(as_input(query, config), as_input(target, config), params, config).data
    binary = metrics.binarize(prob, rc.eval_threshold)
    boxes = metrics.detect(prob, rc.eval_threshold, use_global_box=rc.global_box)

    out = Path(rc.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_pgm(out / "prob.pgm", np.round(prob * 255).astype(np.uint8))
    write_pgm(out / "mask.pgm", binary.astype(np.uint8) * 255)
    write_ppm(out / "overlay.ppm", draw_boxes(target, boxes))
    lines = ["# x_min y_min x_max y_max score"]
    lines += [f"{b.x_min} {b.y_min} {b.x_max} {b.y_max} {b.score:.6f}" for b in boxes]
    (out / "boxes.txt").write_text("\n".join(lines) + "\n")
    print(f"{len(boxes)} detection(s); outputs in {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import CASES

    names = list(CASES) + (list(EXTRA_CASES) if args.all else [])
    results = run_suite(args.seeds, names)
    print(format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_NUMERIC
    print("all gradient checks passed")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_help()
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, ShapeError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
