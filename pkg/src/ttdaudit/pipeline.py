"""End-to-end runs behind the ``ttd``, ``audit`` and ``report`` subcommands.

Randomness: every draw descends from the root seed through
:func:`derive_seed`, keyed by phenotype id and purpose (``negatives``,
``split``, ``bootstrap``), so a phenotype's results do not depend on which
other phenotypes are processed or in what order.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path

import numpy as np

from . import classifier, fairness, features, ingest, ttd
from .errors import DataValidationError, EmptyInputError, UndefinedMetricError

logger = logging.getLogger(__name__)

GAP_CONVENTION = "men minus women (positive favors men)"
TTD_CONVENTION = "diff_days = mean_ttd_women - mean_ttd_men (positive: women diagnosed later)"


@dataclass
class RunConfig:
    events: str | None = None
    cohorts: str | None = None
    out: str | None = None
    w: int = features.DEFAULT_WINDOW_DAYS
    lam: float = classifier.DEFAULT_LAMBDA
    test_frac: float = classifier.DEFAULT_TEST_FRAC
    min_support: int = ttd.DEFAULT_MIN_SUPPORT
    ratio: int = classifier.DEFAULT_RATIO
    threshold: float = 0.5
    n_resamples: int = fairness.DEFAULT_RESAMPLES
    alpha: float = 0.05
    seed: int = 0
    metrics: tuple[str, ...] = fairness.DEFAULT_METRICS
    lookback_days: int = ingest.DEFAULT_LOOKBACK_DAYS
    include_index_day: bool = True
    tol: float = classifier.DEFAULT_TOL
    max_iter: int = classifier.DEFAULT_MAX_ITER
    phenotypes: tuple[str, ...] = field(default=())
    workers: int = 1

    def validate(self):
        checks = [
            (self.w >= 1, "w must be >= 1"),
            (self.lam > 0, "lambda must be > 0"),
            (0 < self.test_frac < 1, "test_frac must lie in (0, 1)"),
            (self.min_support >= 1, "min_support must be >= 1"),
            (self.ratio >= 1, "ratio must be >= 1"),
            (0 < self.threshold < 1, "threshold must lie in (0, 1)"),
            (self.n_resamples >= 1, "n_resamples must be >= 1"),
            (0 < self.alpha < 1, "alpha must lie in (0, 1)"),
            (self.lookback_days >= 1, "lookback_days must be >= 1"),
            (self.workers >= 1, "workers must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)
        bad = [m for m in self.metrics if m not in fairness.METRICS]
        if bad:
            raise ValueError(f"unknown metric(s) {bad}; choose from {', '.join(fairness.METRICS)}")

    def to_dict(self) -> dict:
        """Analysis parameters; where and how fast the run writes are left out."""
        d = dataclasses.asdict(self)
        del d["out"], d["workers"]
        d["lambda"] = d.pop("lam")
        d["metrics"] = list(self.metrics)
        d["phenotypes"] = list(self.phenotypes)
        return d


def derive_seed(root: int, *parts: str) -> int:
    """64-bit seed from ``sha256("root/part1/part2...")``."""
    key = "/".join([str(root), *parts]).encode("utf-8")
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "big")


def atomic_write(path, data: str | bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _clean(x):
    """JSON-ready copy: NaN becomes null, numpy scalars become Python ones."""
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return [_clean(v) for v in x.tolist()]
    if isinstance(x, np.generic):
        x = x.item()
    if isinstance(x, float) and math.isnan(x):
        return None
    return x


def dumps(obj) -> str:
    return json.dumps(_clean(obj), indent=1, sort_keys=True, allow_nan=False) + "\n"


def load_inputs(config: RunConfig):
    """Parse both CSVs and build one CohortHistories per phenotype."""
    for name in ("events", "cohorts"):
        p = getattr(config, name)
        if p is None:
            raise ValueError(f"--{name} is required")
        if not Path(p).is_file():
            raise FileNotFoundError(f"{name} file not found: {p}")
    with open(config.cohorts, "rb") as fh:
        members = ingest.parse_cohort_file(fh.read())
    if not members:
        raise EmptyInputError(f"cohort file {config.cohorts} has no members")
    stem = Path(config.cohorts).stem
    members = [m if m.phenotype_id else dataclasses.replace(m, phenotype_id=stem) for m in members]
    with open(config.events, "rb") as fh:
        events = ingest.parse_condition_events(fh.read())
    by_patient = ingest.group_events_by_patient(events)
    by_pheno = ingest.split_by_phenotype(members)
    if config.phenotypes:
        missing = sorted(set(config.phenotypes) - set(by_pheno))
        if missing:
            raise DataValidationError(f"phenotype(s) not in cohort file: {', '.join(missing)}")
    cohorts = {}
    for pid, ms in by_pheno.items():
        cohorts[pid] = ingest.build_histories(
            by_patient,
            ms,
            config.lookback_days,
            phenotype_id=pid,
            include_index_day=config.include_index_day,
            warn_skipped=False,
        )
    # events of other phenotypes' members are expected; only strangers are worth a warning
    known = {m.patient_id for m in members}
    strangers = sum(len(evs) for pid, evs in by_patient.items() if pid not in known)
    if strangers:
        logger.warning("skipped %d event(s) for patients in no cohort", strangers)
    validation = {
        "n_events": len(events),
        "n_events_no_cohort": strangers,
        "n_members": len(members),
        "phenotypes": {pid: c.validation_report() for pid, c in cohorts.items()},
    }
    return cohorts, validation


def _selected(config: RunConfig, cohorts) -> list[str]:
    return list(config.phenotypes) if config.phenotypes else list(cohorts)


def run_ttd(config: RunConfig) -> dict:
    config.validate()
    cohorts, validation = load_inputs(config)
    out = Path(config.out)
    atomic_write(out / "validation.json", dumps(validation))

    tables = {}
    per_pheno = {}
    for pid in _selected(config, cohorts):
        table = ttd.condition_ttd_table(cohorts[pid], config.min_support)
        tables[pid] = table
        atomic_write(out / f"{pid}_ttd.csv", ttd.table_to_csv(table))
        if table:
            per_pheno[pid] = ttd.summary_to_dict(ttd.disparity_summary(table))
        else:
            logger.warning("%s: no condition reaches min_support=%d in both groups", pid, config.min_support)
            per_pheno[pid] = None

    nonempty = [(pid, ttd.disparity_summary(t)) for pid, t in tables.items() if t]
    summary = {
        "convention": TTD_CONVENTION,
        "config": config.to_dict(),
        "per_phenotype": per_pheno,
        "cross_phenotype": ttd.cross_phenotype_summary(nonempty) if nonempty else None,
        "pooled": ttd.summary_to_dict(ttd.pooled_summary(tables.values())) if nonempty else None,
    }
    atomic_write(out / "ttd_summary.json", dumps(summary))
    return summary


def _group_counts(cohort: classifier.LabeledCohort) -> dict:
    g = cohort.groups
    return {
        ingest.GROUP_NAMES[grp]: {
            "positives": int(np.sum((g == grp) & (cohort.labels == 1))),
            "negatives": int(np.sum((g == grp) & (cohort.labels == 0))),
        }
        for grp in ingest.GROUPS
    }


def audit_phenotype(pid: str, cohorts: dict, config: RunConfig) -> dict:
    """Match, split, train and evaluate one phenotype; returns its report."""
    positives = cohorts[pid]
    seen = {h.patient_id for h in positives.histories}
    pool = []
    for other, c in cohorts.items():
        if other == pid:
            continue
        for h in c.histories:
            if h.patient_id not in seen:
                seen.add(h.patient_id)
                pool.append(h)

    sample = classifier.sample_negatives(positives, pool, config.ratio, seed=derive_seed(config.seed, pid, "negatives"))
    labeled = classifier.LabeledCohort.from_cohorts(positives, sample.negatives)
    split_seed = derive_seed(config.seed, pid, "split")
    split = classifier.stratified_split(labeled, config.test_frac, seed=split_seed)
    train_set, test_set = labeled.subset(split.train_rows), labeled.subset(split.test_rows)

    X_train = features.full_matrix(train_set, vocabulary=labeled.vocabulary, horizon_days=config.lookback_days)
    model = classifier.train(
        X_train.matrix,
        train_set.labels,
        lam=config.lam,
        tol=config.tol,
        max_iter=config.max_iter,
        seed=split_seed,
        vocabulary=labeled.vocabulary,
    )

    spec = features.make_window_spec(config.lookback_days, config.w)
    evaluation = fairness.WindowEvaluation.from_model(model, test_set, spec, config.threshold)
    boot_seed = derive_seed(config.seed, pid, "bootstrap")

    metrics = {}
    for metric in config.metrics:
        series = evaluation.series(metric)
        entry = {
            "gap": series.values,
            "men": series.values_A,
            "women": series.values_B,
            "defined_windows": int(series.defined.sum()),
        }
        try:
            res = evaluation.bootstrap(metric, config.n_resamples, config.alpha, seed=boot_seed)
            entry.update(
                msd=res.msd,
                mean_gap=res.mean_gap,
                mse=res.mse,
                n_windows_used=res.n_windows_used,
                ci=[res.ci_low, res.ci_high],
                n_resamples=res.n_resamples,
                n_discarded=res.n_discarded,
            )
        except UndefinedMetricError as exc:
            logger.warning("%s/%s: %s", pid, metric, exc)
            entry["msd_error"] = str(exc)
        try:
            trend = fairness.gap_trend(series)
            entry["trend"] = {"slope": trend.slope, "intercept": trend.intercept, "n_points": trend.n_points}
        except UndefinedMetricError as exc:
            logger.warning("%s/%s: trend fit refused: %s", pid, metric, exc)
            entry["trend"] = {"error": f"trend fit refused: {exc}"}
        metrics[metric] = entry

    windows = []
    counts = evaluation.counts()
    for i, cutoff in enumerate(spec.cutoffs(), start=1):
        row = {"window_index": i, "day_cutoff": cutoff}
        for k, grp in enumerate(ingest.GROUPS):
            tp, fp, tn, fn = (int(v) for v in counts[i - 1, k])
            row[ingest.GROUP_NAMES[grp]] = {"tp": tp, "fp": fp, "tn": tn, "fn": fn}
        windows.append(row)

    report = {
        "phenotype_id": pid,
        "gap_convention": GAP_CONVENTION,
        "config": config.to_dict(),
        "seeds": {
            "negatives": derive_seed(config.seed, pid, "negatives"),
            "split": split_seed,
            "bootstrap": boot_seed,
        },
        "window_spec": {"horizon_days": spec.horizon_days, "w": spec.w, "b": spec.b},
        "cohort": {
            "n_positives": len(positives),
            "n_negatives": len(sample.negatives),
            "n_unmatched_positives": len(sample.unmatched),
            "n_train": int(split.train_rows.size),
            "n_test": int(split.test_rows.size),
            "train": _group_counts(train_set),
            "test": _group_counts(test_set),
            "vocabulary_size": len(labeled.vocabulary),
        },
        "model": {
            "lambda": model.lam,
            "iterations": model.iterations,
            "objective": model.objective,
            "grad_max_norm": model.grad_max_norm,
            "converged": model.converged,
        },
        "metrics": metrics,
        "windows": windows,
    }
    return {"report": report, "model_json": model.to_json(), "plot_csv": plot_data_csv(spec, metrics)}


def plot_data_csv(spec: features.WindowSpec, metrics: dict) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ["window_index", "day_cutoff"]
    for m in metrics:
        header += [f"{m}_men", f"{m}_women", f"{m}_gap"]
    writer.writerow(header)

    def cell(v):
        v = float(v)
        return "" if math.isnan(v) else repr(v)

    for i, cutoff in enumerate(spec.cutoffs()):
        row = [i + 1, cutoff]
        for entry in metrics.values():
            row += [cell(entry["men"][i]), cell(entry["women"][i]), cell(entry["gap"][i])]
        writer.writerow(row)
    return buf.getvalue()


def run_audit(config: RunConfig) -> dict:
    config.validate()
    cohorts, validation = load_inputs(config)
    if len(cohorts) < 2:
        raise DataValidationError("audit needs at least two phenotypes: controls are drawn from other phenotypes")
    out = Path(config.out)
    atomic_write(out / "validation.json", dumps(validation))
    pids = _selected(config, cohorts)

    job = partial(audit_phenotype, cohorts=cohorts, config=config)
    if config.workers > 1 and len(pids) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(job, pids))
    else:
        results = [job(pid) for pid in pids]

    summary = {"gap_convention": GAP_CONVENTION, "config": config.to_dict(), "phenotypes": {}}
    for pid, res in zip(pids, results):
        d = out / pid
        atomic_write(d / "report.json", dumps(res["report"]))
        atomic_write(d / "model.json", res["model_json"] + "\n")
        atomic_write(d / "plot_data.csv", res["plot_csv"])
        summary["phenotypes"][pid] = {
            m: {k: e.get(k) for k in ("msd", "ci", "mean_gap", "n_windows_used", "msd_error") if k in e}
            for m, e in res["report"]["metrics"].items()
        }
    atomic_write(out / "audit_summary.json", dumps(summary))
    return summary


RANKING_HEADER = ("metric", "phenotype_id", "msd", "ci_low", "ci_high", "mean_gap", "n_test", "favors")


def run_report(audit_dir) -> str:
    """Collect per-phenotype audit reports into an MSD ranking table."""
    audit_dir = Path(audit_dir)
    paths = sorted(audit_dir.glob("*/report.json"))
    if not paths:
        raise FileNotFoundError(f"no */report.json files under {audit_dir}")
    rows = []
    for p in paths:
        rep = json.loads(p.read_text(encoding="utf-8"))
        for metric, e in rep["metrics"].items():
            if e.get("msd") is None:
                continue
            msd = e["msd"]
            favors = "men" if msd > 0 else "women" if msd < 0 else "neither"
            rows.append((metric, rep["phenotype_id"], msd, e["ci"][0], e["ci"][1], e["mean_gap"], rep["cohort"]["n_test"], favors))
    rows.sort(key=lambda r: (r[0], -r[2], r[1]))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RANKING_HEADER)
    for r in rows:
        writer.writerow([r[0], r[1], repr(r[2]), repr(r[3]), repr(r[4]), repr(r[5]), r[6], r[7]])
    text = buf.getvalue()
    atomic_write(audit_dir / "msd_ranking.csv", text)
    return text
