import logging
from datetime import date, timedelta

import pytest

from ttdaudit import classifier, features, ingest, synth

_acceptance = []


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    if "test_acceptance.py" not in report.nodeid:
        return
    _acceptance.append((report.nodeid.split("::")[-1], report.outcome, report.duration))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome, duration in _acceptance:
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{status}  {name}  ({duration:.2f}s)")


def make_member(pid, group="A", age=50, index=date(2018, 6, 1), phenotype="P"):
    return ingest.CohortMember(pid, group, age, index, phenotype)


def make_history(pid, obs, group="A", age=50):
    return ingest.PatientHistory(make_member(pid, group, age), dict(sorted(obs.items())))


def event(pid, code, days_before, index=date(2018, 6, 1)):
    return ingest.ConditionEvent(pid, code, index - timedelta(days=days_before))


def load_synthetic(config: synth.SynthConfig):
    """Generate, parse and build per-phenotype histories for a synthetic config."""
    events_csv, cohort_csv, manifest = synth.generate(config)
    events = ingest.parse_condition_events(events_csv)
    members = ingest.parse_cohort_file(cohort_csv)
    by_patient = ingest.group_events_by_patient(events)
    cohorts = {
        pid: ingest.build_histories(by_patient, ms, config.lookback_days, warn_skipped=False)
        for pid, ms in ingest.split_by_phenotype(members).items()
    }
    return cohorts, manifest


def audit_setup(cohorts, phenotype="P01", seed=0, lam=1.0):
    """Matched labeled cohort, split, and a model trained on the full training matrix."""
    positives = cohorts[phenotype]
    pool = [h for pid, c in cohorts.items() if pid != phenotype for h in c.histories]
    sample = classifier.sample_negatives(positives, pool, seed=seed)
    labeled = classifier.LabeledCohort.from_cohorts(positives, sample.negatives)
    split = classifier.stratified_split(labeled, 0.2, seed=seed)
    train_set, test_set = labeled.subset(split.train_rows), labeled.subset(split.test_rows)
    X = features.full_matrix(train_set, vocabulary=labeled.vocabulary).matrix
    model = classifier.train(X, train_set.labels, lam=lam, vocabulary=labeled.vocabulary)
    return model, train_set, test_set


@pytest.fixture(autouse=True)
def _quiet_logs(caplog):
    caplog.set_level(logging.WARNING)
