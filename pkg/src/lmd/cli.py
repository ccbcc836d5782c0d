"""Command line interface: train / compare / mx-inspect.

Exit codes: 0 success, 1 config error, 2 numerical abort.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import mx
from .harness import ConfigError, NumericalAbort, compare, load_config, train


def _cmd_train(args) -> int:
    try:
        config = load_config(args.config)
    except (OSError, ConfigError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    try:
        result = train(config)
    except NumericalAbort as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return 2
    final = result.records[-1]
    print(f"done: {len(result.records)} records -> {result.out_dir}/metrics.csv")
    print(f"final step {final.step}: loss={final.loss:.6g} "
          f"eval={final.eval_metric:.6g} weight_l2={final.weight_l2:.6g}")
    return 0


def _cmd_compare(args) -> int:
    try:
        out = compare(args.runs, args.out)
    except (OSError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    print(f"combined table: {out['csv']}")
    print(f"charts: {out['figure']}")
    return 0


def _cmd_mx_inspect(args) -> int:
    fmt = mx.FORMATS.get(args.format)
    if fmt is None:
        print(f"config error: unknown format {args.format!r}", file=sys.stderr)
        return 1
    try:
        values = np.array([float(v) for v in args.values.split(",") if v.strip()])
    except ValueError as e:
        print(f"config error: bad values: {e}", file=sys.stderr)
        return 1
    if len(values) > mx.BLOCK_SIZE:
        print(f"config error: at most {mx.BLOCK_SIZE} values per block", file=sys.stderr)
        return 1
    padded = np.zeros(mx.BLOCK_SIZE)
    padded[:len(values)] = values
    block = mx.quantize_block(padded, fmt)
    print(mx.format_block_dump(block))
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="lmd",
                                     description="Multiplicative-dynamics training toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one training config")
    p_train.add_argument("--config", required=True, help="path to a key=value config file")
    p_train.set_defaults(func=_cmd_train)

    p_cmp = sub.add_parser("compare", help="combine runs into a table and charts")
    p_cmp.add_argument("--runs", nargs="+", required=True, help="run output directories")
    p_cmp.add_argument("--out", required=True, help="output directory")
    p_cmp.set_defaults(func=_cmd_compare)

    p_mx = sub.add_parser("mx-inspect", help="dump one MX block for debugging")
    p_mx.add_argument("--format", required=True, choices=sorted(mx.FORMATS))
    p_mx.add_argument("--values", required=True, help="comma-separated reals (up to 32)")
    p_mx.set_defaults(func=_cmd_mx_inspect)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
