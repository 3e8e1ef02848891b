"""Command-line entry point: `triobs <mode> [--config FILE|NAME] [flags]`.

Exit status: 0 when every check passes, 1 on a numerical or check failure,
2 on a usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys

from .harness import MODES, ConfigError, ExperimentConfig, apply_overrides, load_config, run_experiment

EXAMPLES = {"odp": "example2d-odp", "sodp": "example2d-sodp"}
HELP = {
    "simulate": "integrate the plant from the configured initial states",
    "synthesize": "build and check an observer gain schedule",
    "observe": "run the observer against simulated plants and check error envelopes",
    "switching": "plan switching windows and check the published estimate",
    "verify": "run every sampled certificate on a schedule",
}


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="config file, or the name of a shipped config")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--grid-dt", type=float, dest="grid_dt", help="schedule grid spacing")
    p.add_argument("--step", type=float, help="integration step h")
    p.add_argument("--horizon", type=float, help="synthesis and simulation horizon")
    p.add_argument("--system", help="registered system name (default example2d)")
    p.add_argument("--quiet", action="store_true", help="suppress progress lines")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="triobs", description="Time-varying high-gain observers "
                                     "for triangular systems: synthesis, simulation and verification.")
    sub = parser.add_subparsers(dest="command", required=True)
    for mode in MODES:
        p = sub.add_parser(mode, help=HELP[mode])
        _common(p)
        if mode in ("verify", "observe", "switching"):
            p.add_argument("--schedule", help="existing schedule (or plan) directory instead of synthesizing")
    p = sub.add_parser("example", help="reproduce the two-state example with a shipped config")
    _common(p)
    p.add_argument("--which", choices=sorted(EXAMPLES), default="sodp")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and 2
    log = (lambda msg: None) if args.quiet else (lambda msg: print(msg, file=sys.stderr, flush=True))
    try:
        if args.command == "example":
            doc = load_config(args.config or EXAMPLES[args.which])
            mode = None
        else:
            doc = load_config(args.config) if args.config else {"system": {"name": "example2d"}}
            mode = args.command
        if args.system:
            doc = dict(doc, system={"name": args.system})
        if getattr(args, "schedule", None):
            doc = dict(doc, schedule=args.schedule)
        doc = apply_overrides(doc, mode=mode, out=args.out, seed=args.seed, grid_dt=args.grid_dt,
                              step=args.step, horizon=args.horizon)
        doc.setdefault("out", f"runs/{doc.get('name') or doc['mode']}")
        cfg = ExperimentConfig.from_dict(doc)
    except (ConfigError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        res = run_experiment(cfg, log=log)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for c in res.checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name} {json.dumps(c.as_dict()['value'])}")
    if res.error:
        print(f"FAIL [{res.stage}] {res.error}")
    print(f"{'PASS' if res.passed else 'FAIL'} overall -> {res.out / 'summary.json'}")
    return res.exit_code


if __name__ == "__main__":
    sys.exit(main())
