"""Command line entry point: ``layerrisk {run,tables,plots,mia,validate-config}``.

Exit codes: 0 success, 1 other library error, 2 configuration, 3 data or
file format, 4 dimension/contract, 5 numerical.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import load_config
from .errors import ConfigError, LayerRiskError
from .report import emit_plot_data, emit_tables
from .runner import load_manifest, run_experiment, run_mia


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="layerrisk", description="Per-layer DoF / Jacobian-rank privacy risk runs.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train, estimate per epoch, write artifacts")
    run.add_argument("--config", required=True, metavar="PATH")
    run.add_argument("--seed", type=int)
    run.add_argument("--limit-train", type=int, metavar="N")
    run.add_argument("--out", required=True, metavar="DIR")

    for name, text in (("tables", "print the CV and MCR tables of a run"),
                       ("plots", "write tab-separated plot series of a run"),
                       ("mia", "run the membership attack on a finished run")):
        sp = sub.add_parser(name, help=text)
        sp.add_argument("--out", required=True, metavar="DIR", help="run directory")
        if name == "plots":
            sp.add_argument("--plot-dir", metavar="DIR", help="default: <run>/plots")

    val = sub.add_parser("validate-config", help="parse and check a config file")
    val.add_argument("--config", required=True, metavar="PATH")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        if args.command == "validate-config":
            cfg = load_config(args.config)
            print(f"ok: {cfg.model} on {cfg.dataset}, {cfg.epochs} epoch(s)")
        elif args.command == "run":
            cfg = load_config(args.config)
            overrides = {}
            if args.seed is not None:
                overrides["seed"] = args.seed
            if args.limit_train is not None:
                overrides["limit_train"] = args.limit_train
            if overrides:
                cfg = cfg.replace(**overrides)
            manifest = run_experiment(cfg, args.out)
            print(emit_tables(manifest))
        elif args.command == "tables":
            print(emit_tables(load_manifest(args.out)))
        elif args.command == "plots":
            for path in emit_plot_data(load_manifest(args.out), args.plot_dir):
                print(path)
        elif args.command == "mia":
            print(emit_tables(run_mia(args.out)))
    except LayerRiskError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ConfigError.exit_code if args.command == "validate-config" else 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
