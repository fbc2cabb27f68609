"""Command line: simulate, validate, run, plot-data."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .settings import StudySettings

log = logging.getLogger("riskstrat")

# settings exposed as --flags; lists are comma separated
_LIST_FIELDS = ("outcome_ids", "negative_control_ids", "lambda_grid")
_SKIP_FIELDS = ("external_models", "bootstrap_reps")


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {s!r}")


def _add_settings_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("settings overrides (take precedence over the config file)")
    for f in dataclasses.fields(StudySettings):
        if f.name in _SKIP_FIELDS:
            continue
        flag = "--" + f.name.replace("_", "-")
        if f.name in _LIST_FIELDS:
            g.add_argument(flag, dest=f"settings.{f.name}", metavar="A,B,...")
        elif f.type in ("bool", bool):
            g.add_argument(flag, dest=f"settings.{f.name}", type=_bool, metavar="BOOL")
        elif f.type in ("int", int):
            g.add_argument(flag, dest=f"settings.{f.name}", type=int, metavar="N")
        elif f.type in ("float", float):
            g.add_argument(flag, dest=f"settings.{f.name}", type=float, metavar="X")
        else:
            g.add_argument(flag, dest=f"settings.{f.name}", metavar="VALUE")
    g.add_argument("--bootstrap-reps", dest="report.bootstrap_reps", type=int, metavar="N")
    g.add_argument("--emit-km-curves", dest="report.emit_km_curves", type=_bool,
                   metavar="BOOL")
    g.add_argument("--workers", dest="workers", type=int, metavar="N")


def _overrides(args) -> dict:
    out = {}
    for key, value in vars(args).items():
        if "." not in key and key != "workers" or value is None:
            continue
        name = key.split(".")[-1]
        if name in _LIST_FIELDS:
            parts = [x.strip() for x in value.split(",") if x.strip()]
            value = [float(x) for x in parts] if name == "lambda_grid" else parts
        out[key] = value
    return out


def cmd_simulate(args) -> int:
    from .cohort import write_bundle
    from .simulator import SimulationSpec, simulate

    spec = SimulationSpec.from_json(args.spec)
    cov, cohort, truth = simulate(spec)
    out = Path(args.out)
    write_bundle(cov, cohort, out)
    truth.write_csv(out / "truth.csv")
    log.info("wrote %d subjects to %s", len(cohort), out)
    return 0


def cmd_validate(args) -> int:
    from .runner import validate_config

    cfg, errors = validate_config(args.config, _overrides(args))
    if errors:
        for e in errors:
            print(f"error: {e}", file=sys.stderr)
        return 1
    print(f"{args.config}: ok ({len(cfg.settings.outcome_ids)} outcome(s), "
          f"{len(cfg.settings.negative_control_ids)} negative control(s))")
    return 0


def cmd_run(args) -> int:
    from .runner import StudyError, run_study, validate_config

    cfg, errors = validate_config(args.config, _overrides(args))
    if errors:
        for e in errors:
            print(f"error: {e}", file=sys.stderr)
        return 1
    out = Path(args.out) if args.out else cfg.output_dir
    if out is None:
        print("error: no output directory (use --out or output_dir)", file=sys.stderr)
        return 1
    try:
        bundle = run_study(cfg, output_dir=out)
    except StudyError as exc:
        print(f"fatal: {exc}", file=sys.stderr)
        print(json.dumps(exc.to_dict(), default=str), file=sys.stderr)
        return 1
    if args.plots:
        from .plots import emit_plot_data, render_figures
        emit_plot_data(out, out / "plots")
        render_figures(out / "plots")
    status = "all diagnostics pass" if bundle.all_diagnostics_pass else \
        "completed with failed diagnostics"
    print(f"{out}: {status}")
    return bundle.exit_code


def cmd_plot_data(args) -> int:
    from .plots import emit_plot_data, render_figures

    out = Path(args.out) if args.out else Path(args.bundle) / "plots"
    written = emit_plot_data(args.bundle, out)
    if not args.no_figures:
        render_figures(out)
    print(f"{out}: {len(written)} plot-data file(s)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="riskstrat",
                                description="Risk-stratified treatment effect analysis")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic bundle from a simulation spec")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("validate", help="check a study config")
    s.add_argument("--config", required=True)
    _add_settings_flags(s)
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("run", help="run a study and write the report bundle")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.add_argument("--plots", action="store_true",
                   help="also write plot data and figures under <out>/plots")
    _add_settings_flags(s)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("plot-data", help="plot-ready CSVs and figures from a report bundle")
    s.add_argument("--bundle", required=True)
    s.add_argument("--out")
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_plot_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
