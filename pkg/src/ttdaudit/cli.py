"""Command line entry point.

Subcommands: ``synth``, ``ttd``, ``audit``, ``report``. Options may come from
a JSON file given with ``--config``; flags on the command line override it.
Exit codes: 0 success, 1 usage, 2 data validation, 3 runtime.
Log level is read from ``TTDAUDIT_LOG_LEVEL`` (default WARNING).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import pipeline, synth
from .errors import DataValidationError, TTDAuditError

logger = logging.getLogger("ttdaudit")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

# flag dest -> RunConfig field
RUN_FLAGS = {
    "events": "events",
    "cohorts": "cohorts",
    "out": "out",
    "w": "w",
    "lam": "lam",
    "test_frac": "test_frac",
    "min_support": "min_support",
    "ratio": "ratio",
    "threshold": "threshold",
    "n_resamples": "n_resamples",
    "alpha": "alpha",
    "seed": "seed",
    "metrics": "metrics",
    "lookback_days": "lookback_days",
    "include_index_day": "include_index_day",
    "max_iter": "max_iter",
    "tol": "tol",
    "phenotypes": "phenotypes",
    "workers": "workers",
}


class UsageError(Exception):
    pass


def _csv_list(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _common_inputs(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON file of options; command-line flags take precedence")
    p.add_argument("--events", help="condition events CSV (patient_id,condition_code,occurred_on)")
    p.add_argument("--cohorts", help="cohort CSV (patient_id,group,age_at_index,index_date[,phenotype_id])")
    p.add_argument("--out", help="output directory")
    p.add_argument("--lookback-days", dest="lookback_days", type=int)
    p.add_argument(
        "--exclude-index-day",
        dest="include_index_day",
        action="store_const",
        const=False,
        help="drop events dated on the diagnosis day itself",
    )
    p.add_argument("--phenotypes", type=_csv_list, help="comma-separated subset of phenotype ids")
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ttdaudit", description="Time-to-diagnosis disparities and time-variant fairness audits."
    )
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", help="JSON file of SynthConfig fields")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-per-group", dest="n_per_group", type=int)
    p.add_argument("--n-phenotypes", dest="n_phenotypes", type=int)
    p.add_argument("--n-signal-codes", dest="n_signal_codes", type=int)
    p.add_argument("--n-noise-codes", dest="n_noise_codes", type=int)
    p.add_argument("--lead-mean-men", dest="lead_mean_A", type=float, help="mean signal lead time (days) for men")
    p.add_argument("--lead-mean-women", dest="lead_mean_B", type=float, help="mean signal lead time (days) for women")
    p.add_argument("--lead-sd", dest="lead_sd", type=float)

    p = sub.add_parser("ttd", help="time-to-diagnosis disparity tables")
    _common_inputs(p)
    p.add_argument("--min-support", dest="min_support", type=int)

    p = sub.add_parser("audit", help="time-variant fairness audit of per-phenotype classifiers")
    _common_inputs(p)
    p.add_argument("--w", "--window-days", dest="w", type=int, help="censoring window size in days (default 30)")
    p.add_argument("--lambda", dest="lam", type=float, help="L2 strength (default 1.0)")
    p.add_argument("--test-frac", dest="test_frac", type=float)
    p.add_argument("--ratio", type=int, help="matched controls per positive")
    p.add_argument("--threshold", type=float)
    p.add_argument("--n-resamples", dest="n_resamples", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--metrics", type=_csv_list, help="comma-separated subset of recall,specificity,precision,accuracy")
    p.add_argument("--max-iter", dest="max_iter", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--workers", type=int)

    p = sub.add_parser("report", help="rank phenotypes by MSD from an audit directory")
    p.add_argument("--audit-dir", dest="audit_dir", required=True)
    return parser


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    if not Path(path).is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return data


def resolve_run_config(args: argparse.Namespace) -> pipeline.RunConfig:
    """Defaults, then the config file, then explicit flags."""
    values = _load_config_file(args.config)
    if "lambda" in values:
        values["lam"] = values.pop("lambda")
    fields = set(pipeline.RunConfig.__dataclass_fields__)
    unknown = set(values) - fields
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    for dest, name in RUN_FLAGS.items():
        v = getattr(args, dest, None)
        if v is not None:
            values[name] = v
    for key in ("metrics", "phenotypes"):
        if key in values:
            values[key] = tuple(values[key])
    try:
        config = pipeline.RunConfig(**values)
        config.validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    if config.out is None:
        raise UsageError("--out is required")
    return config


def cmd_synth(args) -> int:
    values = _load_config_file(args.config)
    for name in ("seed", "n_per_group", "n_phenotypes", "n_signal_codes", "n_noise_codes", "lead_mean_A", "lead_mean_B", "lead_sd"):
        v = getattr(args, name)
        if v is not None:
            values[name] = v
    config = synth.config_from_dict(values)
    events, cohort, manifest = synth.generate(config)
    out = Path(args.out)
    pipeline.atomic_write(out / "events.csv", events)
    pipeline.atomic_write(out / "cohorts.csv", cohort)
    pipeline.atomic_write(out / "manifest.json", synth.manifest_to_json(manifest) + "\n")
    print(f"wrote {out / 'events.csv'}, {out / 'cohorts.csv'}, {out / 'manifest.json'}")
    return EXIT_OK


def cmd_ttd(args) -> int:
    config = resolve_run_config(args)
    summary = pipeline.run_ttd(config)
    cross = summary["cross_phenotype"]
    if cross is not None:
        u = cross["unweighted"]
        print(
            f"{cross['n_phenotypes']} phenotype(s), {cross['n_conditions_total']} condition rows; "
            f"women later in {u['frac_B_later']:.1%} of conditions (unweighted), "
            f"mean |diff| {u['mean_abs_diff']:.1f} days"
        )
    print(f"wrote {Path(config.out) / 'ttd_summary.json'}")
    return EXIT_OK


def cmd_audit(args) -> int:
    config = resolve_run_config(args)
    summary = pipeline.run_audit(config)
    for pid, metrics in summary["phenotypes"].items():
        parts = []
        for m, e in metrics.items():
            if e.get("msd") is not None:
                parts.append(f"{m} MSD {e['msd']:+.4f} [{e['ci'][0]:+.4f}, {e['ci'][1]:+.4f}]")
            else:
                parts.append(f"{m} MSD undefined")
        print(f"{pid}: " + "; ".join(parts))
    return EXIT_OK


def cmd_report(args) -> int:
    sys.stdout.write(pipeline.run_report(args.audit_dir))
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "ttd": cmd_ttd, "audit": cmd_audit, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    level = getattr(logging, os.environ.get("TTDAUDIT_LOG_LEVEL", "WARNING").upper(), logging.WARNING)
    if args.verbose:
        level = logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TTDAuditError, DataValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return getattr(exc, "exit_code", EXIT_DATA)
    except Exception as exc:  # noqa: BLE001
        logger.debug("unhandled error", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
