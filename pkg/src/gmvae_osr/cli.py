"""Command-line entry point: ``gmvae-osr <command> [flags]``.

Every flag can also come from a JSON or YAML file passed with ``--config``;
keys use the flag names with either dashes or underscores, and explicit
flags win over the file.  Outputs land in ``--out``, which defaults to the
``GMVAE_OSR_OUT`` environment variable and then to the working directory.
Exit status: 0 success, 1 file or data errors, 2 usage errors, 3 failed checks.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import __version__
from .data import SyntheticSpec, gen_synthetic, load_dataset, load_idx, pool_images, save_dataset, split_labeled
from .errors import GmvaeError
from .evaluation import run_openset_eval
from .model import ModelConfig, init_params, load_checkpoint, save_checkpoint
from .propositions import PropositionReport, check_proposition1, check_proposition2, desk_model
from .scan import subcluster_scan, write_curve
from .serialize import atomic_write_text, dumps_json, load_bundle
from .trainer import TrainConfig, fit, write_history

OUT_ENV = "GMVAE_OSR_OUT"
EXIT_ERROR, EXIT_USAGE, EXIT_CHECK_FAILED = 1, 2, 3

log = logging.getLogger("gmvae_osr")


class UsageError(Exception):
    pass


def int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def str_list(text: str) -> list[str]:
    return [t.strip() for t in str(text).split(",") if t.strip()]


def groups(text: str) -> list[list[int]]:
    """``"0,2;1,3"`` -> ``[[0, 2], [1, 3]]``."""
    return [int_list(g) for g in str(text).split(";") if g.strip()]


def _add_training_flags(p: argparse.ArgumentParser, epochs: int) -> None:
    p.add_argument("--dim-z", type=int, default=4)
    p.add_argument("--dim-w", type=int, default=2)
    p.add_argument("--hidden", type=int_list, default=[64, 64])
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--patience", type=int, default=15)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--mc-samples", type=int, default=1)
    p.add_argument("--objective", choices=("full", "no_vprior", "neg_vprior"), default="no_vprior")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gmvae-osr", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or YAML file with flag values")
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV} or .)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("gen-data", parents=[common], help="write a dataset bundle")
    p.add_argument("--name", default="dataset")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--subclusters", type=int_list, default=[2])
    p.add_argument("--unknown", type=int, default=3)
    p.add_argument("--dim", type=int, default=48)
    p.add_argument("--separation", type=float, default=7.0)
    p.add_argument("--samples", type=int, default=300)
    p.add_argument("--val-samples", type=int, default=100)
    p.add_argument("--test-samples", type=int, default=200)
    p.add_argument("--idx-images", help="IDX image file; switches to IDX ingestion")
    p.add_argument("--idx-labels")
    p.add_argument("--known", type=groups, help='raw labels per known class, e.g. "0,2;1,3"')
    p.add_argument("--unknown-order", type=int_list, default=[])
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--pool", type=int, default=1, help="average-pool factor for IDX images")

    p = sub.add_parser("train", parents=[common], help="fit a model, write checkpoint + history")
    p.add_argument("--data", help="dataset bundle")
    p.add_argument("--K", "--k", dest="K", type=int_list, help="subclusters per class")
    p.add_argument("--name", default="model")
    _add_training_flags(p, epochs=200)

    p = sub.add_parser("eval", parents=[common], help="open-set evaluation report")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--algorithms", type=str_list, default=["ncd", "ncu", "evt"])
    p.add_argument("--q", type=int_list, help="unknown-class counts (default 0..all)")
    p.add_argument("--tail-fraction", type=float, default=1.0)
    p.add_argument("--name", default="eval")

    p = sub.add_parser("scan-k", parents=[common], help="subcluster-count scan for one class")
    p.add_argument("--data")
    p.add_argument("--class", dest="cls", type=int, default=1)
    p.add_argument("--k-max", type=int, default=3)
    p.add_argument("--truncate", type=float, default=0.2)
    p.add_argument("--name", default="scan")
    _add_training_flags(p, epochs=200)

    p = sub.add_parser("check-props", parents=[common], help="numerical proposition checks")
    p.add_argument("--prop", choices=("1", "2", "all"), default="all")
    p.add_argument("--dim-x", type=int, default=4)
    p.add_argument("--mu-x", type=float_list, help="Bernoulli means (default 0.5 everywhere)")
    p.add_argument("--k", type=int_list, default=[1, 2, 3])
    p.add_argument("--n-samples", type=int, default=200)
    p.add_argument("--delta", type=float_list, default=[1e-2, 1e-3, 1e-4])
    p.add_argument("--mc-samples", type=int, default=256)
    p.add_argument("--epochs", type=int, default=10, help="desk training epochs for the gap check")
    p.add_argument("--name", default="propositions")

    p = sub.add_parser("info", parents=[common], help="describe a bundle")
    p.add_argument("path", nargs="?")
    return parser


def load_config(path: str) -> dict:
    text = Path(path).read_text()
    data = json.loads(text) if path.endswith(".json") else yaml.safe_load(text)
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a mapping")
    return {str(k).replace("-", "_"): v for k, v in data.items()}


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("missing command")
    if not getattr(args, "config", None):
        return args
    cfg = load_config(args.config)
    subparser = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest: a for a in subparser._actions}
    unknown = sorted(set(cfg) - set(known))
    if unknown:
        raise UsageError(f"unknown config keys {unknown}")
    defaults = {}
    for key, value in cfg.items():
        action = known[key]
        if action.type is not None and not isinstance(value, (list, dict)):
            value = action.type(str(value))
        defaults[key] = value
    subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV) or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(args, *names):
    for n in names:
        if getattr(args, n, None) in (None, ""):
            raise UsageError(f"{args.command} needs --{n.replace('_', '-')}")


def _train_config(args, seed: int) -> TrainConfig:
    return TrainConfig(batch_size=args.batch_size, max_epochs=args.epochs, patience=args.patience,
                       lr=args.lr, seed=seed, objective=args.objective, mc_samples=args.mc_samples)


def cmd_gen_data(args) -> int:
    out = _out_dir(args)
    if args.idx_images:
        _require(args, "idx_labels", "known")
        x, y = load_idx(args.idx_images, args.idx_labels)
        split = split_labeled(pool_images(x, args.pool), y, args.known, args.unknown_order,
                              args.val_fraction, args.seed)
    else:
        sub = args.subclusters
        spec = SyntheticSpec(classes=args.classes,
                             subclusters=tuple(sub) if len(sub) > 1 else sub[0],
                             unknown=args.unknown, dim=args.dim, separation=args.separation,
                             samples=args.samples, val_samples=args.val_samples,
                             test_samples=args.test_samples, seed=args.seed)
        split = gen_synthetic(spec)
    path = save_dataset(split, out / args.name)
    print(f"wrote {path} ({len(split.train_y)} train, {len(split.val_y)} val, "
          f"{len(split.test_y)} test)")
    return 0


def cmd_train(args) -> int:
    _require(args, "data")
    split = load_dataset(args.data)
    K = args.K or split.meta.get("K_true") or [1] * split.num_classes
    if len(K) == 1 and split.num_classes > 1:
        K = K * split.num_classes
    cfg = ModelConfig(split.num_classes, tuple(K), split.dim, dim_z=args.dim_z, dim_w=args.dim_w,
                      hidden=tuple(args.hidden))
    params = init_params(cfg, args.seed)
    known = split.val_y <= split.num_classes
    result = fit(params, (split.train_x, split.train_y),
                 (split.val_x[known], split.val_y[known]), _train_config(args, args.seed))
    out = _out_dir(args)
    save_checkpoint(result.params, out / args.name, extra={"best_epoch": result.best_epoch})
    write_history(result.history, out / f"{args.name}_history.csv")
    print(f"trained {len(result.history)} epochs, best epoch {result.best_epoch}, "
          f"val loss {result.history[result.best_epoch - 1]['val_loss']:.4f}")
    return 0


def cmd_eval(args) -> int:
    _require(args, "checkpoint", "data")
    params = load_checkpoint(args.checkpoint)
    split = load_dataset(args.data)
    report = run_openset_eval(params, split, args.algorithms, args.q, seed=args.seed,
                              tail_fraction=args.tail_fraction)
    out = _out_dir(args)
    atomic_write_text(out / f"{args.name}.json", report.to_json())
    atomic_write_text(out / f"{args.name}.csv", report.to_csv())
    for r in report.rows:
        print(f"{r['algorithm']:4s} Q={r['Q']} {r['threshold_mode']:7s} "
              f"tau={r['tau']:.4g} macro_f1={r['macro_f1']:.4f}")
    return 0


def cmd_scan_k(args) -> int:
    _require(args, "data")
    split = load_dataset(args.data)
    x = split.class_data(args.cls)
    val = split.val_x[split.val_y == args.cls]
    curve = subcluster_scan(x, args.k_max, _train_config(args, args.seed),
                            val_x=val if len(val) else None, dim_z=args.dim_z, dim_w=args.dim_w,
                            hidden=args.hidden, truncate=args.truncate)
    out = _out_dir(args)
    write_curve(curve, out / f"{args.name}.csv")
    atomic_write_text(out / f"{args.name}.json", dumps_json({"class": args.cls, **curve.summary()}))
    print("mean covering differences: " + ", ".join(f"{d:.4f}" for d in curve.diffs))
    print(f"recommended K={curve.recommended}")
    return 0


def cmd_check_props(args) -> int:
    report = PropositionReport()
    if args.prop in ("1", "all"):
        mu = args.mu_x or [0.5] * args.dim_x
        report.prop1 = check_proposition1(args.dim_x, np.array(mu), args.k, args.n_samples,
                                          args.seed)
        for r in report.prop1:
            print(f"prop1 K={r['K']} loss={r['loss']:.12f} target={r['target']:.12f} "
                  f"{'pass' if r['pass'] else 'FAIL'}")
    if args.prop in ("2", "all"):
        for K in args.k:
            params, x = desk_model(K, args.epochs, args.seed)
            rows, trend = check_proposition2(params, x, args.delta, args.mc_samples, args.seed)
            report.prop2 += rows
            report.prop2_trend[str(K)] = trend
            for r in rows:
                print(f"prop2 K={K} delta={r['delta']:g} eps={r['epsilon']:.5f} "
                      f"bound={r['bound']:.5f} {'pass' if r['pass'] else 'FAIL'}")
            print(f"prop2 K={K} trend {'shrinking' if trend['shrinking'] else 'NOT shrinking'}")
    out = _out_dir(args)
    atomic_write_text(out / f"{args.name}.json", dumps_json(report.to_dict()))
    return 0 if report.passed else EXIT_CHECK_FAILED


def cmd_info(args) -> int:
    _require(args, "path")
    arrays, meta, kind = load_bundle(args.path)
    print(f"kind: {kind}")
    print("meta: " + json.dumps(meta, sort_keys=True))
    for name, a in arrays.items():
        print(f"  {name}: {a.dtype} {list(a.shape)}")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "scan-k": cmd_scan_k, "check-props": cmd_check_props, "info": cmd_info}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except SystemExit as e:  # argparse usage errors
        return int(e.code or 0)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"gmvae-osr: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, GmvaeError, ValueError) as e:
        print(f"gmvae-osr: error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
