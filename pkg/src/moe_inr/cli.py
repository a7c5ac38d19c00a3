"""Command line: ``moe-inr run | matrix | report``.

Exit codes: 0 success, 2 invalid config, 3 non-finite loss, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import config as cfgmod
from .autodiff import NonFiniteError

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moe-inr", description="Mixture-of-experts implicit neural representations")
    p.add_argument("--threads", type=int, default=1, help="BLAS threads per run; matrix workers")
    p.add_argument("--seed", type=int, default=None, help="override experiment.seed")
    p.add_argument("--precision", type=int, choices=(32, 64), default=None, help="override experiment.precision")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train and evaluate one config")
    r.add_argument("config", type=Path)
    r.add_argument("--out", type=Path, default=None, help="output directory (default: experiment.output_dir)")

    m = sub.add_parser("matrix", help="cartesian product of overrides")
    m.add_argument("config", type=Path)
    m.add_argument("--set", dest="sets", action="append", default=[], metavar="KEY=V1,V2,...")
    m.add_argument("--out", type=Path, default=None)

    rep = sub.add_parser("report", help="plot and summarize finished runs")
    rep.add_argument("run_dirs", type=Path, nargs="+")
    rep.add_argument("--out", type=Path, default=None)
    return p


def parse_sets(sets: list[str]) -> dict[str, list]:
    axes: dict[str, list] = {}
    for s in sets:
        if "=" not in s:
            raise cfgmod.ConfigError(f"--set expects KEY=V1,V2,..., got {s!r}")
        key, values = s.split("=", 1)
        axes[key.strip()] = [cfgmod.parse_value(v.strip()) for v in values.split(",") if v.strip()]
    return axes


def _load_raw(path: Path, args) -> dict:
    try:
        with open(path, "rb") as fh:
            raw = cfgmod.tomllib.load(fh)
    except cfgmod.tomllib.TOMLDecodeError as exc:
        raise cfgmod.ConfigError(f"{path}: {exc}") from None
    exp = raw.setdefault("experiment", {})
    if args.seed is not None:
        exp["seed"] = args.seed
    if args.precision is not None:
        exp["precision"] = args.precision
    return raw


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    from . import experiment

    try:
        with threadpool_limits(limits=max(1, args.threads) if args.command == "run" else 1):
            if args.command == "run":
                cfg = cfgmod.validate(_load_raw(args.config, args))
                report = experiment.run(cfg, args.out)
                for k, v in report.metrics.items():
                    print(f"{k}: {v}")
            elif args.command == "matrix":
                raw = _load_raw(args.config, args)
                cfgmod.validate(raw)
                axes = parse_sets(args.sets)
                out = args.out or Path(cfgmod.validate(raw)["experiment"]["output_dir"])
                rows = experiment.run_matrix(raw, axes, out, workers=max(1, args.threads))
                print(f"{len(rows)} cells written to {out / 'matrix.csv'}")
            else:
                print(experiment.emit_report(args.run_dirs, args.out))
    except cfgmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
