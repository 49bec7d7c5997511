"""Command-line entry point.

Subcommands: ``spectra``, ``pump-table``, ``verify-dynamics``,
``optimize``, ``sweep``, ``figures``.  Exit codes: 0 success, 1 config
error, 2 numerical/truncation failure, 3 cache error.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

from .cache import CacheError, JsonCache, TableCache, content_key, make_manifest
from .config import ConfigError, ExperimentConfig, load_config
from .dynamics import CalibrationError, TruncationError

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2
EXIT_CACHE = 3

CACHE_ENV = "RINGMUX_CACHE_DIR"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ringmux",
        description="Multiplexed heralded single-photon source simulator",
    )
    parser.add_argument("--config", required=True, help="YAML experiment config")
    parser.add_argument("--seed", type=int, help="override run.master_seed")
    parser.add_argument("--out", help="override run.output_dir")
    parser.add_argument("--jobs", type=int, help="override run.jobs")
    parser.add_argument(
        "--cache-dir",
        help=f"override run.cache_dir (or set ${CACHE_ENV})",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)
    sub.add_parser("spectra", help="filter spectra and tuning curves")
    sub.add_parser("pump-table", help="build and cache Monte-Carlo bin tables")
    sub.add_parser("verify-dynamics", help="trajectory vs density-matrix checks")
    sub.add_parser("optimize", help="optimize the driving protocol")
    p_sweep = sub.add_parser("sweep", help="parameter-grid sweeps (resumable)")
    p_sweep.add_argument("--figure", type=int, choices=(8, 9), default=8)
    p_fig = sub.add_parser("figures", help="assemble per-figure CSV bundles")
    p_fig.add_argument("--figure", type=int, choices=(3, 4, 6, 7, 8, 9),
                       required=True)
    return parser


def _resolve(args) -> tuple[ExperimentConfig, Path, Path, int]:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, run=replace(cfg.run, master_seed=args.seed))
    if args.out is not None:
        cfg = replace(cfg, run=replace(cfg.run, output_dir=args.out))
    if args.jobs is not None:
        cfg = replace(cfg, run=replace(cfg.run, jobs=args.jobs))
    cache_dir = args.cache_dir or os.environ.get(CACHE_ENV) or cfg.run.cache_dir
    out_dir = Path(cfg.run.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return cfg, out_dir, Path(cache_dir), cfg.run.jobs


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    started = time.time()
    try:
        cfg, out_dir, cache_dir, jobs = _resolve(args)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG

    from . import workflows as wf

    config_key = content_key(cfg.as_dict())
    table_cache = TableCache(cache_dir)
    result_cache = JsonCache(cache_dir)
    artifacts: dict[str, str] = {}
    try:
        if args.subcommand == "spectra":
            artifacts = wf.spectra_outputs(cfg, out_dir)
        elif args.subcommand == "pump-table":
            wf.build_all_tables(cfg, table_cache, jobs=jobs)
            path = wf.write_csv(
                out_dir / "tables.csv",
                ["tau_bin_s", "setting", "initial", "pump_scale",
                 "pair_fraction", "mean_signal", "mean_final_idler",
                 "max_shell_population", "cutoff"],
                wf.table_summary_rows(cfg, table_cache),
            )
            artifacts["tables"] = str(path)
        elif args.subcommand == "verify-dynamics":
            rows, ok = wf.run_verification(cfg, out_dir)
            artifacts["verify"] = str(out_dir / "verify.csv")
            if not ok:
                print("verification failed: trajectory/oracle disagreement",
                      file=sys.stderr)
                return EXIT_NUMERICAL
        elif args.subcommand == "optimize":
            wf.run_optimize(cfg, table_cache, out_dir)
            artifacts["optimize"] = str(out_dir / "optimize.csv")
            artifacts["policy"] = str(out_dir / "policy.json")
        elif args.subcommand == "sweep":
            fig_dir = out_dir / f"fig{args.figure}"
            fig_dir.mkdir(parents=True, exist_ok=True)
            artifacts = wf.assemble_figure(
                args.figure, cfg, table_cache, result_cache, fig_dir,
                jobs=jobs,
            )
        elif args.subcommand == "figures":
            fig_dir = out_dir / f"fig{args.figure}"
            artifacts = wf.assemble_figure(
                args.figure, cfg, table_cache, result_cache, fig_dir,
                jobs=jobs,
            )
    except CacheError as exc:
        print(f"cache error: {exc}", file=sys.stderr)
        print("hint: run `ringmux --config ... pump-table` to build the "
              "tables this step needs", file=sys.stderr)
        return EXIT_CACHE
    except (TruncationError, CalibrationError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG

    manifest = make_manifest(
        args.subcommand, config_key, cfg.run.master_seed, artifacts, started
    )
    manifest.write(out_dir / f"{args.subcommand}-manifest.json")
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
