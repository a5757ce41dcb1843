"""mecssc command line: run scenarios and sweep replication cost grids."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import yaml

from .bench import SweepConfigError, load_sweep_config, run_sweep, write_sweep
from .sim.scenario import ScenarioError, load_scenario, packaged_scenario, run_scenario, \
    write_artifacts

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2
OUT_ENV = "MECSSC_OUT"

log = logging.getLogger("mecssc")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def parse_sets(items) -> dict:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = yaml.safe_load(value)
    return out


def default_out(name: str, flag: str | None, configured: str | None = None) -> Path:
    if flag:
        return Path(flag)
    if configured:
        return Path(configured)
    return Path(os.environ.get(OUT_ENV) or "out") / name


def _resolve(arg: str) -> Path:
    path = Path(arg)
    if path.exists() or path.suffix:
        return path
    try:
        return packaged_scenario(arg)
    except ScenarioError:
        return path


def cmd_run(args) -> int:
    scenario = load_scenario(_resolve(args.scenario))
    overrides = parse_sets(args.set)
    result = run_scenario(scenario, seed=args.seed, overrides=overrides)
    out = default_out(scenario.name, args.out)
    paths = write_artifacts(result, out)
    for rep in result.reports:
        status = "ok" if rep.ok else f"failed: {rep.error}"
        print(f"replication {rep.strategy} {rep.source}->{rep.replica}: "
              f"{rep.moved_ues}/{rep.registered_ues} UEs, {rep.transmitted_bytes} B sent, "
              f"{rep.elapsed_ms:.3f} ms ({status})")
    for a in result.assertions:
        print(f"{'PASS' if a['ok'] else 'FAIL'} {a['name']}")
    print(f"artifacts in {out} ({', '.join(p.name for p in paths.values())})")
    return EXIT_OK if result.ok else EXIT_FAILED


def cmd_sweep(args) -> int:
    config = load_sweep_config(_resolve(args.config), parse_sets(args.set))
    rows = run_sweep(config, jobs=args.jobs)
    out = default_out("sweep", args.out, config.out)
    paths = write_sweep(out, rows)
    errors = [r for r in rows if "error" in r]
    for r in errors:
        log.warning("grid point %s/%s/%s: %s", r["strategy"], r["registered"], r["moved"],
                    r["error"])
    print(f"{len(rows)} rows ({len(errors)} errors) written to {paths['rows']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mecssc", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run a scenario file and check its assertions")
    run.add_argument("scenario", help="scenario YAML path or packaged scenario name")
    run.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    run.add_argument("--out", default=None, help=f"output directory (default ${OUT_ENV}/<name>)")
    run.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="override a timing constant")
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep", help="sweep strategies over a (registered, moved) grid")
    sweep.add_argument("--config", required=True, help="sweep YAML path or packaged config name")
    sweep.add_argument("--out", default=None, help=f"output directory (default ${OUT_ENV}/sweep)")
    sweep.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a timing constant")
    sweep.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    sweep.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ScenarioError, SweepConfigError) as exc:
        print(f"mecssc: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
