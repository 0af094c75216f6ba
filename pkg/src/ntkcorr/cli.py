"""Command line: ntkcorr <subcommand> --config <path.json> --out <dir> [--jobs K] [--master-seed U64]."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .experiments import (
    ExperimentConfig, InputError, build_report, load_config, run_corr_sweep, run_init_audit,
    run_norm_selftest, run_ntk_deviation,
)
from .network import ConfigError
from .selftest import FAULTS
from .suite import run_suite

EXIT_OK, EXIT_INVARIANT, EXIT_INPUT, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("ntkcorr")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    over = {}
    if args.jobs is not None:
        over["jobs"] = args.jobs
    if args.master_seed is not None:
        over["master_seed"] = args.master_seed
    return replace(cfg, **over) if over else cfg


def _out(args, cfg) -> Path:
    return Path(args.out or cfg.out_dir or "out")


def _warn_statuses(fits) -> None:
    for stat, fit in sorted(fits.items()):
        if isinstance(fit, str):
            log.warning("%s: %s", stat, fit)
        elif fit.degenerate:
            log.warning("%s: %s", stat, fit.status)


def cmd_norm_selftest(args) -> int:
    results = run_norm_selftest(args.out, cases=args.cases, fault=args.inject_fault,
                                dump_csv=args.dump_csv)
    width = max(len(r.group) for r in results)
    print(f"{'invariant':<{width}}  cases  failed  worst-margin  result")
    for r in results:
        print(f"{r.group:<{width}}  {r.cases:5d}  {r.failures:6d}  {r.worst:12.3e}  "
              f"{'pass' if r.passed else 'FAIL'}")
    failed = [r for r in results if not r.passed]
    for r in failed:
        print(f"invariant {r.group} failed: {r.detail}", file=sys.stderr)
    return EXIT_INVARIANT if failed else EXIT_OK


def cmd_init_audit(args) -> int:
    cfg = _config(args)
    res = run_init_audit(cfg, _out(args, cfg))
    _warn_statuses(res.fits)
    for stat, fit in sorted(res.fits.items()):
        if not isinstance(fit, str):
            print(f"{stat:24s} exponent {fit.exponent:+.4f} +- {fit.exponent_stderr:.4f}")
    return EXIT_OK


def cmd_corr_sweep(args) -> int:
    cfg = _config(args)
    res = run_corr_sweep(cfg, _out(args, cfg))
    _warn_statuses(res.fits)
    print((res.out / "exponent_summary.csv").read_text(), end="")
    return EXIT_OK


def cmd_ntk_deviation(args) -> int:
    cfg = _config(args)
    res = run_ntk_deviation(cfg, _out(args, cfg))
    _warn_statuses(res.fits)
    for key, row in sorted(res.summary["by_width"].items()):
        print(f"{key:16s} delta@{cfg.fixed_step} median {row['delta_fixed_median']:.4e}  "
              f"slope median {row['slope_median']}")
    if all(r.status != "ok" for r in res.results):
        log.error("every cell diverged")
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_report(args) -> int:
    if not args.out:
        raise InputError("report needs --out <dir>")
    report = build_report(args.out)
    print(f"{len(report['statistics'])} statistics -> {Path(args.out) / 'report.json'}")
    return EXIT_OK


def cmd_suite(args) -> int:
    cfg = _config(args)
    results = run_suite(cfg, _out(args, cfg))
    return EXIT_OK if all(r.passed is not False for r in results) else EXIT_INVARIANT


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ntkcorr",
                                     description="Derivative correlations and linearization "
                                                 "of wide networks, measured by width sweeps.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, need_config=True):
        p.add_argument("--config", help="experiment config JSON" if need_config
                       else argparse.SUPPRESS)
        p.add_argument("--out", help="output directory")
        p.add_argument("--jobs", type=int, default=None, help="worker processes")
        p.add_argument("--master-seed", type=int, default=None, dest="master_seed")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("norm-selftest", help="run the tensor norm invariant battery")
    common(p, need_config=False)
    p.add_argument("--cases", type=int, default=50)
    p.add_argument("--dump-csv", action="store_true", help="write selftest.csv into --out")
    p.add_argument("--inject-fault", choices=FAULTS, default=None,
                   help="break one invariant on purpose (exercises the failure path)")
    p.set_defaults(func=cmd_norm_selftest)

    for name, fn, text in (
        ("init-audit", cmd_init_audit, "layer-norm and normalization sweeps at initialization"),
        ("corr-sweep", cmd_corr_sweep, "width sweeps of derivative correlations"),
        ("ntk-deviation", cmd_ntk_deviation, "SGD against its kernel linearization"),
        ("paper-suite", cmd_suite, "every experiment plus a graded summary"),
    ):
        p = sub.add_parser(name, help=text)
        common(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("report", help="aggregate fit JSONs under --out")
    common(p, need_config=False)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (InputError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
