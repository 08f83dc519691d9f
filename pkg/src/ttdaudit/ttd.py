"""Per-condition time to diagnosis and group disparity aggregates.

Sign convention: ``diff = mean_ttd_B - mean_ttd_A`` (women minus men), so a
positive diff means group B waited longer between first presenting the
condition and the phenotype diagnosis.
"""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

from .errors import EmptyInputError
from .ingest import GROUP_A, GROUP_B, CohortHistories

DEFAULT_MIN_SUPPORT = 10
LONG_DIFF_DAYS = 100

TTD_CSV_HEADER = ("condition_code", "n_men", "n_women", "mean_ttd_men", "mean_ttd_women", "diff_days")


@dataclass(frozen=True)
class ConditionTTDRow:
    condition_code: str
    n_A: int
    n_B: int
    mean_ttd_A: float
    mean_ttd_B: float
    diff: float


@dataclass(frozen=True)
class DisparitySummary:
    n_conditions: int
    frac_B_later: float
    mean_abs_diff: float
    frac_over_100d: float


SUMMARY_FIELDS = ("frac_B_later", "mean_abs_diff", "frac_over_100d")


def condition_ttd_table(histories: CohortHistories, min_support: int = DEFAULT_MIN_SUPPORT) -> list[ConditionTTDRow]:
    """One row per code carried by at least ``min_support`` patients in each group."""
    if min_support < 1:
        raise ValueError("min_support must be >= 1")
    lookback = histories.lookback_days
    ttds = {GROUP_A: defaultdict(list), GROUP_B: defaultdict(list)}
    for h in histories.histories:
        bucket = ttds[h.group]
        for code, offset in h.observations.items():
            bucket[code].append(lookback - offset)

    rows = []
    for code in histories.vocabulary:
        a, b = ttds[GROUP_A].get(code, ()), ttds[GROUP_B].get(code, ())
        if len(a) < min_support or len(b) < min_support:
            continue
        mean_a = sum(a) / len(a)
        mean_b = sum(b) / len(b)
        rows.append(ConditionTTDRow(code, len(a), len(b), mean_a, mean_b, mean_b - mean_a))
    return rows


def disparity_summary(table: Sequence[ConditionTTDRow]) -> DisparitySummary:
    if not table:
        raise EmptyInputError("disparity summary needs at least one condition row")
    n = len(table)
    return DisparitySummary(
        n_conditions=n,
        frac_B_later=sum(1 for r in table if r.diff > 0) / n,
        mean_abs_diff=sum(abs(r.diff) for r in table) / n,
        frac_over_100d=sum(1 for r in table if abs(r.diff) >= LONG_DIFF_DAYS) / n,
    )


def cross_phenotype_summary(summaries: Sequence[tuple[str, DisparitySummary]]) -> dict:
    """Average summaries over phenotypes.

    Both the plain mean over phenotypes and the mean weighted by each
    phenotype's condition count are returned.
    """
    if not summaries:
        raise EmptyInputError("cross-phenotype summary needs at least one phenotype")
    weights = [s.n_conditions for _, s in summaries]
    total = sum(weights)
    unweighted = {}
    weighted = {}
    for name in SUMMARY_FIELDS:
        values = [getattr(s, name) for _, s in summaries]
        unweighted[name] = sum(values) / len(values)
        weighted[name] = sum(w * v for w, v in zip(weights, values)) / total if total else float("nan")
    return {
        "n_phenotypes": len(summaries),
        "n_conditions_total": total,
        "unweighted": unweighted,
        "weighted_by_conditions": weighted,
    }


def pooled_summary(tables: Iterable[Sequence[ConditionTTDRow]]) -> DisparitySummary:
    """Summary over all (phenotype, condition) rows pooled together."""
    rows = [r for t in tables for r in t]
    return disparity_summary(rows)


def table_to_csv(table: Sequence[ConditionTTDRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TTD_CSV_HEADER)
    for r in table:
        writer.writerow([r.condition_code, r.n_A, r.n_B, repr(r.mean_ttd_A), repr(r.mean_ttd_B), repr(r.diff)])
    return buf.getvalue()


def summary_to_dict(summary: DisparitySummary) -> dict:
    return asdict(summary)
