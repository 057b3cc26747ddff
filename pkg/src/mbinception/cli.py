"""Command-line entry point: ``mbinception {train,eval,compare,gradcheck,datasets}``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical failure.
"""

import argparse
import logging
import os
import sys

import numpy as np

from . import zoo
from .config import RunConfig, parse_overrides
from .data import CLASS_COUNTS, DATASET_FILES, load_raw
from .errors import EngineError
from .gradcheck import TOY_CONFIGS, check_model

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_config_args(p):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--seed", type=int, help="shorthand for --set seed=N")


def _resolve(args, path=None):
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return RunConfig.resolve(path if path is not None else args.config, overrides)


def cmd_train(args):
    from .runner import train

    cfg = _resolve(args)
    manifest, run_dir = train(cfg)
    m = manifest["test_metrics"]
    print(f"run directory: {run_dir}")
    print(f"parameters: {manifest['param_count']}")
    for epoch, (loss, acc) in enumerate(zip(manifest["train_loss"], manifest["val_accuracy"]), 1):
        print(f"epoch {epoch}: train loss {loss:.4f}  validation accuracy {acc:.4f}")
    print(f"test accuracy {m['accuracy']:.4f} precision {m['precision']:.4f} "
          f"recall {m['recall']:.4f} f1 {m['f1']:.4f}")
    return EXIT_OK


def cmd_eval(args):
    from .runner import eval_checkpoint

    out_dir = args.out or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), f"eval-{args.dataset}")
    report = eval_checkpoint(args.checkpoint, args.dataset, args.root, out_dir, args.split, args.limit,
                             args.resize, args.bins)
    print(f"{args.dataset}/{args.split}: {report.samples} samples")
    print(f"accuracy {report.accuracy:.4f} precision {report.precision:.4f} "
          f"recall {report.recall:.4f} f1 {report.f1:.4f}")
    print(f"reports written to {out_dir}")
    return EXIT_OK


def cmd_compare(args):
    from .runner import compare, default_compare_configs

    if args.configs:
        configs = [_resolve(args, path) for path in args.configs]
    else:
        configs = default_compare_configs(_resolve(args))
    rows, out = compare(configs)
    for row in rows:
        print(f"{row['model']:<16} {row['dataset']:<14} acc {float(row['accuracy']):.4f} "
              f"f1 {float(row['f1']):.4f} params {row['param_count']}")
    print(f"comparison table: {out}")
    return EXIT_OK


def cmd_gradcheck(args):
    if args.model not in TOY_CONFIGS:
        print(f"unknown model {args.model!r}; choose from {sorted(TOY_CONFIGS)}", file=sys.stderr)
        return EXIT_USAGE
    kwargs = dict(TOY_CONFIGS[args.model])
    for key, value in parse_toy_overrides(args.param).items():
        kwargs[key] = value
    model = zoo.build(args.model, **kwargs)
    report = check_model(model, batch_size=args.batch, seed=args.seed or 0)
    print("\n".join(report.lines()))
    return EXIT_OK if report.passed else EXIT_NUMERICAL


def parse_toy_overrides(items):
    out = {}
    for item in items or ():
        key, _, value = item.partition("=")
        if "," in value:
            out[key] = tuple(int(v) for v in value.split(","))
        else:
            out[key] = int(value)
    return out


def cmd_datasets(args):
    status = EXIT_OK
    for split in ("train", "test"):
        try:
            ds = load_raw(args.name, args.root, split)
        except EngineError as exc:
            print(f"{args.name}/{split}: ERROR {exc}")
            status = EXIT_DATA
            continue
        counts = np.bincount(ds.labels, minlength=ds.num_classes)
        print(f"{args.name}/{split}: {len(ds)} records, image shape {ds.images.shape[1:]}, "
              f"{ds.num_classes} classes, per-class min {counts.min()} max {counts.max()}")
    return status


def make_parser():
    parser = _Parser(prog="mbinception", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one model and write checkpoint, manifest and reports")
    _add_config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("checkpoint")
    p.add_argument("--dataset", required=True, choices=sorted(CLASS_COUNTS))
    p.add_argument("--root", required=True, help="directory holding the dataset files")
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--limit", type=int, help="evaluate only the first N records")
    p.add_argument("--resize", default="pad", choices=["pad", "bilinear"])
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--out", help="output directory for the CSV reports")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="train and evaluate several configs into one table")
    p.add_argument("configs", nargs="*", help="config files; default: the four-model desk-scale set")
    _add_config_args(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("gradcheck", help="finite-difference check of a toy model")
    p.add_argument("model", help=f"one of {', '.join(sorted(TOY_CONFIGS))}")
    p.add_argument("--param", action="append", default=[], metavar="NAME=VALUE",
                   help="override a toy builder argument, e.g. n=8 or stage_multipliers=1,2")
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("datasets", help="inspect and verify local dataset files")
    p.add_argument("name", choices=sorted(DATASET_FILES))
    p.add_argument("--root", required=True)
    p.set_defaults(func=cmd_datasets)
    return parser


def main(argv=None):
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
