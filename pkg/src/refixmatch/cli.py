"""``refixmatch`` command line: gen-data, split, train, eval, calibrate, augment-preview."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import augment as A
from . import data as D
from . import models as M
from . import trainer as T
from .config import ConfigError, RunConfig, defaults_text

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("refixmatch")


class DataError(RuntimeError):
    pass


def _load(path) -> D.Dataset:
    path = Path(path)
    try:
        return D.load_dataset(path)
    except FileNotFoundError as exc:
        raise DataError(f"{exc.filename or path}: file not found") from None
    except (D.TensorFormatError, ValueError, OSError) as exc:
        raise DataError(f"{path}: {exc}") from None


def _load_checkpoint(path) -> M.ModelState:
    try:
        return M.load_checkpoint(path)
    except FileNotFoundError as exc:
        raise DataError(f"{exc.filename or path}: file not found") from None
    except (D.TensorFormatError, ValueError, KeyError, OSError) as exc:
        raise DataError(f"{path}: cannot load checkpoint ({exc})") from None


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# commands

def cmd_gen_data(args) -> int:
    out = Path(args.out)
    try:
        ds = D.gen_synthetic(args.kind, args.classes, args.n, args.size, args.seed, args.noise)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    manifest = D.save_dataset(ds, out, args.name)
    print(manifest)
    if args.n_test:
        # a disjoint draw: the test stream uses a derived seed
        test = D.gen_synthetic(args.kind, args.classes, args.n_test, args.size, args.seed + 1_000_003, args.noise)
        print(D.save_dataset(test, out, f"{args.name}-test"))
    return EXIT_OK


def cmd_split(args) -> int:
    ds = _load(args.manifest)
    try:
        spec = D.SplitSpec(per_class=args.per_class, n1=args.n1, ratio=args.ratio, beta=args.beta, seed=args.seed)
        labeled, unlabeled = D.split(ds, spec)
    except ValueError as exc:
        raise DataError(f"{args.manifest}: {exc}") from None
    out = Path(args.out)
    D.save_dataset(labeled, out, "labeled")
    D.save_dataset(unlabeled, out, "unlabeled")
    k = ds.num_classes
    lab_counts = D.class_counts(labeled.labels, k)
    unl_counts = D.class_counts(unlabeled.truth, k)
    report = {"labeled": len(labeled), "unlabeled": len(unlabeled)}
    for c in range(k):
        report[f"labeled.class{c}"] = lab_counts[c]
        report[f"unlabeled.class{c}"] = unl_counts[c]
    D.write_manifest(out / "split.report", report)
    print(f"labeled {len(labeled)}  unlabeled {len(unlabeled)}", file=sys.stderr)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config, args.set)
    out = Path(args.out or cfg["out"])
    if not cfg["labeled"]:
        raise ConfigError("config key 'labeled' is required")
    labeled = _load(cfg["labeled"])
    unlabeled = _load(cfg["unlabeled"]) if cfg["unlabeled"] else None
    eval_set = _load(cfg["eval"]) if cfg["eval"] else None
    for other, name in ((unlabeled, "unlabeled"), (eval_set, "eval")):
        if other is not None and (other.image_shape != labeled.image_shape
                                  or other.num_classes != labeled.num_classes):
            raise DataError(f"{cfg[name]}: shape/classes do not match {cfg['labeled']}")
    tc = cfg.train_config()
    spec = cfg.model_spec(labeled.image_shape, labeled.num_classes)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(cfg.resolved())

    with open(out / "log.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(T.LOG_COLUMNS)

        def on_row(row):
            writer.writerow(T.format_row(row))
            fh.flush()

        try:
            result = T.train(tc, spec, labeled, unlabeled, eval_set, on_row=on_row)
        except T.TrainingAborted as exc:
            _write_json(out / "summary.json", {"status": "aborted", "iteration": exc.iteration,
                                               "last_good_iteration": exc.last_good})
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        except ValueError as exc:
            raise DataError(f"{cfg['labeled']}: {exc}") from None

    M.save_checkpoint(result.state, out / "checkpoint")
    summary = {"status": "completed", "iterations": tc.iterations, "log_schema": T.LOG_SCHEMA_VERSION}
    if result.eval_history:
        summary.update(result.summary())
        if result.best_state is not None:
            M.save_checkpoint(result.best_state, out / "best")
    _write_json(out / "summary.json", summary)
    print(out / "summary.json")
    return EXIT_OK


def _evaluate(args):
    state = _load_checkpoint(args.checkpoint)
    ds = _load(args.data)
    if ds.image_shape != state.spec.input_shape or ds.num_classes != state.spec.num_classes:
        raise DataError(f"{args.data}: images {ds.image_shape} / {ds.num_classes} classes do not match "
                        f"checkpoint {state.spec.input_shape} / {state.spec.num_classes}")
    try:
        return T.evaluate(state, ds, args.bins, args.batch)
    except ValueError as exc:
        raise DataError(f"{args.data}: {exc}") from None


def cmd_eval(args) -> int:
    ev = _evaluate(args)
    payload = json.dumps(ev.metrics.to_dict(), indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(payload)
    else:
        sys.stdout.write(payload)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    ev = _evaluate(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bins = ev.metrics.bins
    _write_json(out / "metrics.json", ev.metrics.to_dict())
    (out / "reliability.csv").write_text(bins.to_csv())
    with open(out / "histogram.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin", "lower", "upper", "count"])
        for m, (lo, hi, n) in enumerate(zip(bins.edges[:-1], bins.edges[1:], bins.count)):
            w.writerow([m, repr(float(lo)), repr(float(hi)), int(n)])
    print(out / "metrics.json")
    return EXIT_OK


def _write_pgm(path: Path, image: np.ndarray) -> None:
    """Binary greyscale netpbm file; the first channel is written."""
    q = D.quantize(image)
    path.write_bytes(f"P5 {q.shape[1]} {q.shape[0]} 255\n".encode() + q.tobytes())


def cmd_augment_preview(args) -> int:
    ds = _load(args.data)
    n = min(args.n, len(ds))
    images = ds.images[:n]
    idx = np.arange(n)
    weak = A.weak_augment_batch(images, A.BatchRng(args.seed, 0, idx, A.STREAM_UNLABELED_WEAK))
    strong_rng = A.BatchRng(args.seed, 0, idx, A.STREAM_UNLABELED_STRONG)
    strong = A.augment_views(images, strong_rng, strong=True, n_ops=args.n_ops)
    ops = A.sample_transforms(A.BatchRng(args.seed, 0, idx, A.STREAM_UNLABELED_STRONG + 1), args.n_ops)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = np.concatenate([np.concatenate(list(v[:, 0]), axis=1) for v in (images, weak, strong)], axis=0)
    _write_pgm(out / "preview.pgm", grid)
    D.write_tensor_file(out / "strong.rfxt", strong.astype(np.float32))
    with open(out / "ops.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index"] + [f"op{j}" for j in range(args.n_ops)])
        for i, row in enumerate(ops):
            w.writerow([i] + [s.name if s.value is None else f"{s.name}({s.value:.4g})" for s in row])
    print(out / "preview.pgm")
    return EXIT_OK


def cmd_defaults(args) -> int:
    sys.stdout.write(defaults_text())
    return EXIT_OK


# parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="refixmatch", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--kind", choices=D.KINDS, default="shapes")
    g.add_argument("--classes", "-K", type=int, default=10)
    g.add_argument("--n", "-N", type=int, default=6000)
    g.add_argument("--n-test", type=int, default=0, help="also write a disjoint test set of this size")
    g.add_argument("--size", type=int, default=16)
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--name", default="dataset")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("split", help="labeled/unlabeled split with a per-class report")
    s.add_argument("--manifest", required=True)
    s.add_argument("--per-class", type=int, default=4)
    s.add_argument("--n1", type=int, default=None, help="long-tailed head count (enables the LT split)")
    s.add_argument("--ratio", type=float, default=1.0, help="long-tailed imbalance ratio")
    s.add_argument("--beta", type=float, default=1.0, help="labeled fraction per class (LT)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_split)

    t = sub.add_parser("train", help="train from a key=value config")
    t.add_argument("--config", required=True)
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--out", default=None, help="overrides the config 'out' key")
    t.set_defaults(fn=cmd_train)

    for name, fn, helptext in (("eval", cmd_eval, "metric bundle as JSON"),
                               ("calibrate", cmd_calibrate, "metrics plus reliability/histogram CSVs")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--data", required=True)
        e.add_argument("--bins", type=int, default=T.DEFAULT_BINS)
        e.add_argument("--batch", type=int, default=512)
        e.add_argument("--out", required=(name == "calibrate"), default=None)
        e.set_defaults(fn=fn)

    a = sub.add_parser("augment-preview", help="write weak/strong views of the first images")
    a.add_argument("--data", required=True)
    a.add_argument("--n", type=int, default=8)
    a.add_argument("--n-ops", type=int, default=2)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_augment_preview)

    d = sub.add_parser("defaults", help="print every config key with its default")
    d.set_defaults(fn=cmd_defaults)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
