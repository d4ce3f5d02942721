"""Command-line entry point: `bilevel-metarl <command> [options]`."""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .adapt import LambdaTooSmall
from .config import ConfigError, ExperimentConfig, load_config
from .mdp import NumericalError
from .tasks import GenerationError

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
EXIT_ASSERTION = 4

COMMANDS = ("gen-tasks", "train", "evaluate", "verify", "oracle", "repro-fig1")

log = logging.getLogger("bilevel_metarl")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI file (or its JSON mirror)")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", help="override a config value (repeatable)")
    common.add_argument("--seed", type=int, help="global seed (run.seed)")
    common.add_argument("--out", type=Path, help="parent directory for run folders (run.out)")
    common.add_argument("--mode", choices=("exact", "mc"), help="Q estimation (adapt.q_mode)")
    common.add_argument("--run-name", help="fixed run folder name instead of a timestamp")
    common.add_argument("-q", "--quiet", action="store_true", help="only warnings on stderr")

    p = argparse.ArgumentParser(prog="bilevel-metarl",
                                description="Bilevel meta-RL on tabular task distributions.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-tasks", parents=[common], help="generate and save task distributions")
    sub.add_parser("train", parents=[common], help="meta-train and write traces and policies")
    ev = sub.add_parser("evaluate", parents=[common],
                        help="optimality gap, bound and meta-test curves")
    ev.add_argument("--tasks", type=Path, help="saved task directory (default: config presets)")
    ev.add_argument("--meta", type=Path, help="meta-policy JSON (default: uniform)")
    sub.add_parser("verify", parents=[common], help="invariant and property checks")
    sub.add_parser("oracle", parents=[common],
                   help="Monte-Carlo, finite-difference and brute-force cross-checks")
    sub.add_parser("repro-fig1", parents=[common],
                   help="both presets, bilevel vs one-step baseline, tables and figures")
    return p


def resolve_config(args) -> ExperimentConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.out is not None:
        overrides.append(f"run.out={args.out}")
    if args.mode is not None:
        overrides.append(f"adapt.q_mode={args.mode}")
    return load_config(args.config, overrides)


def make_run_dir(cfg: ExperimentConfig, command: str, name: Optional[str] = None) -> Path:
    """Fresh directory under run.out holding the resolved config."""
    root = Path(cfg.run.out)
    if name is None:
        stamp = _dt.datetime.now(_dt.timezone.utc).strftime("%Y%m%dT%H%M%SZ")
        name = f"{command}-{stamp}-{cfg.digest()[:8]}"
    run = root / name
    k = 1
    while run.exists():
        run = root / f"{name}-{k}"
        k += 1
    run.mkdir(parents=True)
    (run / "config.ini").write_text(cfg.to_ini())
    (run / "config.json").write_text(json.dumps(cfg.to_json(), indent=2, sort_keys=True) + "\n")
    return run


def _setup_logging(run: Path, quiet: bool):
    log.setLevel(logging.INFO)
    log.handlers.clear()
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(message)s", "%H:%M:%S")
    err = logging.StreamHandler(sys.stderr)
    err.setLevel(logging.WARNING if quiet else logging.INFO)
    err.setFormatter(fmt)
    fh = logging.FileHandler(run / "run.log")
    fh.setFormatter(fmt)
    log.addHandler(err)
    log.addHandler(fh)


def _run_checks(table, seed: int, run: Path) -> int:
    from .checks import run_checks
    from .experiments import write_rows
    results = run_checks(table, seed)
    for r in results:
        print(r.line(), flush=True)
    write_rows(run / "checks.csv", ("name", "passed", "worst", "tolerance", "detail"),
               [{"name": r.name, "passed": r.passed, "worst": r.worst,
                 "tolerance": r.tolerance, "detail": r.detail} for r in results])
    failed = [r.name for r in results if not r.passed]
    if failed:
        log.error("failed checks: %s", ", ".join(failed))
        return EXIT_ASSERTION
    return EXIT_OK


def dispatch(args, cfg: ExperimentConfig, run: Path) -> int:
    from . import experiments as ex
    cmd = args.command
    if cmd == "gen-tasks":
        ex.gen_tasks(cfg, run)
    elif cmd == "train":
        ex.train(cfg, run)
    elif cmd == "evaluate":
        ex.evaluate(cfg, run, args.tasks, args.meta)
    elif cmd == "repro-fig1":
        ex.repro_fig1(cfg, run)
    elif cmd == "verify":
        from .checks import VERIFY_CHECKS
        return _run_checks(VERIFY_CHECKS, cfg.run.seed, run)
    elif cmd == "oracle":
        from .checks import ORACLE_CHECKS
        return _run_checks(ORACLE_CHECKS, cfg.run.seed, run)
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        run = make_run_dir(cfg, args.command, args.run_name)
    except OSError as exc:
        print(f"config error: run.out: cannot create run directory ({exc})", file=sys.stderr)
        return EXIT_VALIDATION
    _setup_logging(run, args.quiet)
    log.info("run directory %s", run)
    try:
        code = dispatch(args, cfg, run)
    except (ConfigError, LambdaTooSmall, FileNotFoundError) as exc:
        log.error("validation error: %s", exc)
        code = EXIT_VALIDATION
    except (NumericalError, GenerationError) as exc:
        log.error("numerical failure: %s", exc)
        code = EXIT_NUMERICAL
    except ValueError as exc:
        log.error("validation error: %s", exc)
        code = EXIT_VALIDATION
    except AssertionError as exc:
        log.error("assertion failed: %s", exc)
        code = EXIT_ASSERTION
    print(run)
    return code


if __name__ == "__main__":
    sys.exit(main())
