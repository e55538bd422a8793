"""Command line entry points.

Every subcommand works from the same config file plus ``--set`` overrides,
so a full run and a single resumed stage see identical settings.  Exit
codes: 0 success, 2 configuration problems, 3 missing prerequisites,
4 numeric faults during training.
"""
from __future__ import annotations

import argparse
import logging
import sys

from .config import Config, config_to_ini, load_config, output_root, save_config
from .errors import ConfigurationError, MissingPrerequisiteError, NumericFault
from .pipeline import STAGES, RunPaths, read_report, run_pipeline, run_stage

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PREREQ = 3
EXIT_NUMERIC = 4

_STAGE_COMMANDS = {
    "gen-data": "dataset",
    "train-teacher": "teacher",
    "train-student": "students",
    "train-nav": "nav",
    "train-gate": "gate",
    "eval": "eval",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splitnav",
        description="Split depth inference and gated navigation experiments.")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="debug-level logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="INI config file")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")
        p.add_argument("--output", default=None,
                       help="run directory (default: $SPLITNAV_OUTPUT or ./runs)")
        p.add_argument("--force", action="store_true",
                       help="rerun the stage even if its marker exists")

    for name in _STAGE_COMMANDS:
        common(sub.add_parser(name, help=f"run the {_STAGE_COMMANDS[name]} stage"))

    pipe = sub.add_parser("pipeline", help="run every stage in order")
    common(pipe)
    pipe.add_argument("--stages", default=None,
                      help="comma-separated subset of: " + ", ".join(STAGES))

    rep = sub.add_parser("report", help="print the metrics table of a finished run")
    common(rep)

    cfg_cmd = sub.add_parser("show-config", help="print the resolved configuration")
    common(cfg_cmd)

    serve = sub.add_parser("serve-tail", help="serve tail inference over TCP")
    common(serve)
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=4373)

    return parser


def _load(args) -> Config:
    return load_config(args.config, args.set)


def cmd_stage(args, stage: str) -> int:
    cfg = _load(args)
    paths = RunPaths(output_root(args.output))
    save_config(cfg, str(paths.config_snapshot))
    ran = run_stage(cfg, paths, stage, force=args.force)
    print(f"{stage}: {'completed' if ran else 'already done (marker present)'}")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = _load(args)
    stages = None
    if args.stages:
        stages = [s.strip() for s in args.stages.split(",") if s.strip()]
        unknown = [s for s in stages if s not in STAGES]
        if unknown:
            raise ConfigurationError(f"unknown stages {unknown}; choose from {STAGES}")
    paths = run_pipeline(cfg, output_root(args.output), force=args.force, stages=stages)
    print(f"pipeline finished; artifacts in {paths.root}")
    return EXIT_OK


def cmd_report(args) -> int:
    paths = RunPaths(output_root(args.output))
    if not paths.report.exists():
        raise MissingPrerequisiteError(
            f"{paths.report} is missing; run the eval stage first")
    rows = read_report(paths.report)
    header = f"{'model':<22} {'accuracy %':>10} {'steps/m':>9} {'KB/m':>9} {'mean c':>7}"
    print(header)
    print("-" * len(header))
    for r in rows:
        print(f"{r['model']:<22} {float(r['nav_accuracy_pct']):>10.1f} "
              f"{float(r['steps_per_meter']):>9.3f} {float(r['kb_per_meter']):>9.3f} "
              f"{float(r['mean_c']):>7.2f}")
    return EXIT_OK


def cmd_show_config(args) -> int:
    cfg = _load(args)
    print(config_to_ini(cfg), end="")
    return EXIT_OK


def cmd_serve_tail(args) -> int:
    import time

    from .nodes import TailServer
    from .pipeline import load_branches

    cfg = _load(args)
    paths = RunPaths(output_root(args.output))
    branches = load_branches(cfg, paths)
    server = TailServer(branches, host=args.host, port=args.port)
    server.start()
    print(f"serving {len(branches)} branches on {server.host}:{server.port}")
    try:
        while True:
            time.sleep(1.0)
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        if args.command in _STAGE_COMMANDS:
            return cmd_stage(args, _STAGE_COMMANDS[args.command])
        if args.command == "pipeline":
            return cmd_pipeline(args)
        if args.command == "report":
            return cmd_report(args)
        if args.command == "show-config":
            return cmd_show_config(args)
        if args.command == "serve-tail":
            return cmd_serve_tail(args)
        raise ConfigurationError(f"unhandled command {args.command!r}")
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingPrerequisiteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PREREQ
    except NumericFault as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
