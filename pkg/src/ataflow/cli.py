"""Command-line interface: fit, diagnose, reproduce and density."""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import experiments, tails
from .errors import DomainError, InsufficientDataError, NumericAbort, UsageError
from .flows import FlowStack, SupportKind, build_stack
from .targets import TARGETS, blr_conjugate, eight_schools
from .vi import BASE_OF, TrainConfig, fit_density, make_family, parse_family, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class CsvError(UsageError):
    pass


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def load_csv(path) -> np.ndarray:
    """Numeric CSV to an n x d array; a non-numeric first row is taken as a header."""
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    except (OSError, UnicodeDecodeError) as exc:
        raise CsvError(f"cannot read {path}: {exc}") from None
    if not rows:
        raise CsvError(f"{path}: file is empty")
    start = 1 if not all(_is_number(c) for c in rows[0]) else 0
    body = rows[start:]
    if not body:
        raise CsvError(f"{path}: no data rows after the header")
    width = len(body[0])
    out = np.empty((len(body), width))
    for i, row in enumerate(body, start=start + 1):
        if len(row) != width:
            raise CsvError(f"{path}: row {i} has {len(row)} fields, expected {width}")
        for j, cell in enumerate(row, start=1):
            try:
                out[i - start - 1, j - 1] = float(cell)
            except ValueError:
                raise CsvError(f"{path}: row {i}, column {j}: non-numeric cell {cell!r}") from None
    return out


def load_target(name: str, data: str | None = None):
    if name not in TARGETS:
        raise UsageError(f"unknown target {name!r}; expected one of {', '.join(sorted(TARGETS))}")
    if data is None:
        return TARGETS[name]()
    if name == "eight_schools":
        if data.endswith(".json"):
            with open(data) as fh:
                blob = json.load(fh)
            return eight_schools(blob["y"], blob["sigma"])
        table = load_csv(data)
        return eight_schools(table[:, 0], table[:, 1])
    if name == "blr":
        table = load_csv(data)
        if table.shape[1] != 2:
            raise UsageError("blr data needs one covariate column and one outcome column")
        return blr_conjugate(table[:, :1], table[:, 1])[0]
    raise UsageError(f"target {name!r} does not take --data")


def _write(out: Path, name: str, text: str):
    path = out / name
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _config(args, seed: int) -> TrainConfig:
    kw = dict(experiments.SCALES[args.preset]) if args.preset else {}
    for flag, key in (("steps", "steps"), ("lr", "lr"), ("elbo_samples", "elbo_samples"),
                      ("eval_samples", "eval_samples")):
        if getattr(args, flag) is not None:
            kw[key] = getattr(args, flag)
    return TrainConfig(seed=seed, **kw)


def _seeds(args):
    return args.seed if args.seed else [0]


def _seed_dir(out: Path, seed: int, many: bool) -> Path:
    return out / f"seed{seed}" if many else out


# -- commands ----------------------------------------------------------------------

def cmd_fit(args) -> int:
    family = parse_family(args.family)
    target = load_target(args.target, args.data)
    out = Path(args.out)
    seeds = _seeds(args)
    for seed in seeds:
        config = _config(args, seed)
        stack = make_family(family, target, hidden=(args.hidden, args.hidden), n_layers=args.layers,
                            seed=seed)
        dest = _seed_dir(out, seed, len(seeds) > 1)
        try:
            result = train(stack, target, config)
        except NumericAbort as exc:
            if exc.snapshot:
                _write(dest, "abort_params.json", exc.snapshot + "\n")
            raise
        _write(dest, "result.json", result.to_json() + "\n")
        _write(dest, "params.json", stack.to_json() + "\n")
        _write(dest, "trace.csv", experiments.trace_csv(result.trace))
    return EXIT_OK


def cmd_diagnose(args) -> int:
    rng = np.random.default_rng(_seeds(args)[0])
    if args.params:
        stack = FlowStack.from_json(Path(args.params).read_text())
        samples, _ = stack.sample(rng, args.samples)
    elif args.data:
        samples = load_csv(args.data)
    elif args.target:
        target = load_target(args.target)
        if target.sampler is None:
            raise UsageError(f"target {args.target!r} has no exact sampler; pass --params or --data")
        samples = target.sample(rng, args.samples)
    else:
        raise UsageError("diagnose needs --params, --data or --target")
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[1] < 2:
        raise UsageError("diagnose needs samples with at least two columns")
    report = tails.tail_parameter_function(samples, seed=_seeds(args)[0])
    out = Path(args.out)
    _write(out, "tails.json", report.to_json() + "\n")
    _write(out, "tails.csv", report.to_csv())
    return EXIT_OK


def cmd_reproduce(args) -> int:
    if args.name not in experiments.PRESETS:
        raise UsageError(f"unknown preset {args.name!r}; valid names: {', '.join(experiments.PRESETS)}")
    overrides = {}
    for flag in ("steps", "lr", "elbo_samples", "eval_samples"):
        if getattr(args, flag) is not None:
            overrides[flag] = getattr(args, flag)
    result = experiments.reproduce(args.name, args.preset or "desk", args.seed or None,
                                   overrides=overrides)
    out = Path(args.out)
    for name, text in sorted(result.files.items()):
        _write(out, name, text)
    return EXIT_OK


def cmd_density(args) -> int:
    if not args.data:
        raise UsageError("density needs --data")
    data = load_csv(args.data)
    if data.shape[1] == 0 or len(data) < 10:
        raise UsageError(f"density needs at least 10 rows and 1 column, got {data.shape}")
    family = parse_family(args.family)
    out = Path(args.out)
    seeds = _seeds(args)
    for seed in seeds:
        config = _config(args, seed)
        stack = build_stack(data.shape[1], BASE_OF[family], (SupportKind.IDENTITY,) * data.shape[1],
                            hidden=(args.hidden, args.hidden), n_layers=args.layers,
                            rng=np.random.default_rng(seed))
        result = fit_density(stack, data, config)
        dest = _seed_dir(out, seed, len(seeds) > 1)
        _write(dest, "result.json", result.to_json() + "\n")
        _write(dest, "params.json", stack.to_json() + "\n")
        _write(dest, "trace.csv", "step,loglik\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(map(float, result.trace))))
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ataflow", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, training=True):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, action="append", help="repeatable")
        if training:
            p.add_argument("--steps", type=int)
            p.add_argument("--lr", type=float)
            p.add_argument("--elbo-samples", type=int)
            p.add_argument("--eval-samples", type=int)
            p.add_argument("--hidden", type=int, choices=(32, 256), default=32)
            p.add_argument("--layers", type=int, default=2)
            p.add_argument("--preset", choices=tuple(experiments.SCALES))

    p = sub.add_parser("fit", help="train one variational family on a target")
    p.add_argument("--target", required=True)
    p.add_argument("--data")
    p.add_argument("--family", required=True, help="advi, taf or ataf")
    common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("diagnose", help="directional tail report of samples")
    p.add_argument("--target")
    p.add_argument("--params", help="params.json of a fitted flow")
    p.add_argument("--data", help="CSV of draws")
    p.add_argument("--samples", type=int, default=10**5)
    common(p, training=False)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("reproduce", help="run a named experiment preset")
    p.add_argument("name", help=", ".join(experiments.PRESETS))
    common(p)
    p.set_defaults(func=cmd_reproduce)

    p = sub.add_parser("density", help="fit a flow to a CSV of observations")
    p.add_argument("--data", required=True)
    p.add_argument("--family", required=True)
    common(p)
    p.set_defaults(func=cmd_density)
    return parser


def main(argv=None) -> int:
    threads = os.environ.get("ATAFLOW_THREADS")
    if threads is not None and (not threads.isdigit() or int(threads) < 1):
        print("ataflow: error: ATAFLOW_THREADS must be a positive integer", file=sys.stderr)
        return EXIT_USAGE
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericAbort as exc:
        print(f"ataflow: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, DomainError, InsufficientDataError, ValueError, KeyError, OSError) as exc:
        print(f"ataflow: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
