"""Command line entry point: ``aed gen-data|train|infer|eval|sweep-lambda``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from aed import config as C
from aed import pipeline as P
from aed.checkpoint import CheckpointError
from aed.metrics import FormatError, UndefinedMetricError
from aed.scene import _atomic_write_text
from aed.tensor import ShapeError

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


def _config(args) -> C.RunConfig:
    cfg = C.load(args.config) if args.config else C.RunConfig()
    pairs = dict(_pair(s) for s in args.set or [])
    if args.seed is not None:
        pairs["seed"] = str(args.seed)
    return C.override(cfg, **pairs) if pairs else cfg


def _pair(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise C.ConfigError(f"--set expects key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def _lambdas(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise C.ConfigError(f"bad lambda list {text!r}") from exc
    if not values:
        raise C.ConfigError("empty lambda list")
    return values


def cmd_gen_data(args) -> None:
    P.generate_data(_config(args), args.out)


def cmd_train(args) -> None:
    P.train(_config(args), args.data, args.out)


def cmd_infer(args) -> None:
    P.infer(_config(args), args.ckpt, args.data, args.out)


def cmd_eval(args) -> None:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = P.evaluate(cfg, args.data, args.pred, out / "curves" if args.emit_curves else None)
    _atomic_write_text(out / "results.json", P.results_text(results))
    print(f"micro_auc={results['micro_auc']:.4f} macro_auc={results['macro_auc']:.4f} "
          f"rbdc={results['rbdc']:.4f} tbdc={results['tbdc']:.4f}")


def cmd_sweep_lambda(args) -> None:
    rows = P.sweep_lambda(_config(args), args.data, args.out, _lambdas(args.values))
    for r in rows:
        print(f"lambda={r['lambda']} ({r['label']}) micro_auc={r['micro_auc']:.4f} tbdc={r['tbdc']:.4f}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aed", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, *, data=True, ckpt=False, pred=False):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--out", required=True)
        if data:
            p.add_argument("--data", required=True, help="directory written by gen-data")
        if ckpt:
            p.add_argument("--ckpt", required=True, help="directory written by train")
        if pred:
            p.add_argument("--pred", required=True, help="directory written by infer")
        p.set_defaults(fn=fn)
        return p

    add("gen-data", cmd_gen_data, "generate train/test episodes and pseudo-abnormal pools", data=False)
    add("train", cmd_train, "train the auto-encoders, then the classifiers")
    add("infer", cmd_infer, "score the test episodes", ckpt=True)
    ev = add("eval", cmd_eval, "frame AUC, RBDC and TBDC", pred=True)
    ev.add_argument("--emit-curves", action="store_true", help="also write ROC/RBDC/TBDC points")
    sw = add("sweep-lambda", cmd_sweep_lambda, "train and evaluate once per lambda")
    sw.add_argument("--values", default="0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9",
                    help="comma-separated lambdas")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (P.DataError, CheckpointError, FormatError, UndefinedMetricError, ShapeError,
            FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
