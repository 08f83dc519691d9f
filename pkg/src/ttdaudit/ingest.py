"""Parsing and time alignment of condition events against phenotype cohorts.

Two CSV inputs are understood:

* condition events: ``patient_id,condition_code,occurred_on``
* cohort members:   ``patient_id,group,age_at_index,index_date[,phenotype_id]``

Events are aligned on a day-offset timeline that ends at each member's
index (diagnosis) date: offset 0 is ``lookback_days`` before diagnosis and
offset ``lookback_days`` is the diagnosis day itself.
"""

from __future__ import annotations

import csv
import io
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import date
from typing import IO, Iterable, Mapping, Sequence

from .errors import DataValidationError, EmptyInputError, ParseError

logger = logging.getLogger(__name__)

DEFAULT_LOOKBACK_DAYS = 1095
MIN_AGE = 13

GROUP_A = "A"  # men
GROUP_B = "B"  # women
GROUPS = (GROUP_A, GROUP_B)
GROUP_CODES = {"M": GROUP_A, "F": GROUP_B}
GROUP_NAMES = {GROUP_A: "men", GROUP_B: "women"}

EVENT_HEADER = ("patient_id", "condition_code", "occurred_on")
COHORT_HEADER = ("patient_id", "group", "age_at_index", "index_date")


@dataclass(frozen=True)
class ConditionEvent:
    patient_id: str
    condition_code: str
    occurred_on: date


@dataclass(frozen=True)
class CohortMember:
    patient_id: str
    group: str
    age_at_index: int
    index_date: date
    phenotype_id: str = ""

    def __post_init__(self):
        if self.group not in GROUPS:
            raise DataValidationError(f"unknown group {self.group!r} for patient {self.patient_id}")
        if self.age_at_index < MIN_AGE:
            raise DataValidationError(
                f"patient {self.patient_id}: age_at_index {self.age_at_index} is below the "
                f"minimum cohort age of {MIN_AGE}"
            )


@dataclass(frozen=True)
class PatientHistory:
    """One member plus the first in-window day offset of each condition code."""

    member: CohortMember
    observations: Mapping[str, int]

    @property
    def patient_id(self) -> str:
        return self.member.patient_id

    @property
    def group(self) -> str:
        return self.member.group

    def ttd(self, code: str, lookback_days: int = DEFAULT_LOOKBACK_DAYS) -> int:
        """Days between the first occurrence of ``code`` and diagnosis."""
        return lookback_days - self.observations[code]


@dataclass(frozen=True)
class CohortHistories:
    phenotype_id: str
    histories: tuple[PatientHistory, ...]
    vocabulary: tuple[str, ...]
    lookback_days: int = DEFAULT_LOOKBACK_DAYS
    # tallies are bookkeeping only; they do not take part in equality
    n_events_kept: int = field(default=0, compare=False)
    n_events_outside_window: int = field(default=0, compare=False)
    n_events_non_cohort: int = field(default=0, compare=False)

    def __len__(self) -> int:
        return len(self.histories)

    @property
    def patient_ids(self) -> tuple[str, ...]:
        return tuple(h.patient_id for h in self.histories)

    @property
    def groups(self) -> tuple[str, ...]:
        return tuple(h.group for h in self.histories)

    def validation_report(self) -> dict:
        return {
            "phenotype_id": self.phenotype_id,
            "n_members": len(self.histories),
            "n_members_without_events": sum(1 for h in self.histories if not h.observations),
            "n_events_kept": self.n_events_kept,
            "n_events_outside_window": self.n_events_outside_window,
            "n_events_non_cohort": self.n_events_non_cohort,
            "vocabulary_size": len(self.vocabulary),
            "lookback_days": self.lookback_days,
        }


def _text_stream(stream) -> IO[str]:
    if isinstance(stream, (bytes, bytearray)):
        return io.StringIO(stream.decode("utf-8"))
    if isinstance(stream, str):
        return io.StringIO(stream)
    if isinstance(stream, io.TextIOBase):
        return stream
    return io.TextIOWrapper(stream, encoding="utf-8", newline="")


def _rows(stream, header: Sequence[str], optional: Sequence[str] = ()):
    reader = csv.reader(_text_stream(stream))
    try:
        found = [c.strip() for c in next(reader)]
    except StopIteration:
        raise EmptyInputError("input is empty (no header row)") from None
    allowed = (list(header), list(header) + list(optional))
    if found not in allowed:
        raise ParseError(f"line 1: expected header {','.join(header)!r}, got {','.join(found)!r}")
    width = len(found)
    for row in reader:
        if not row or all(not c.strip() for c in row):
            continue
        line = reader.line_num
        if len(row) != width:
            raise ParseError(f"line {line}: expected {width} fields, got {len(row)}")
        yield line, [c.strip() for c in row]


def _parse_date(text: str, line: int) -> date:
    try:
        return date.fromisoformat(text)
    except ValueError:
        raise ParseError(f"line {line}: malformed date {text!r}") from None


def parse_condition_events(stream) -> list[ConditionEvent]:
    """Read the event CSV. Row order is preserved."""
    events = []
    for line, (pid, code, occurred) in _rows(stream, EVENT_HEADER):
        if not pid or not code:
            raise ParseError(f"line {line}: missing patient_id or condition_code")
        events.append(ConditionEvent(pid, code, _parse_date(occurred, line)))
    return events


def parse_cohort_file(stream) -> list[CohortMember]:
    """Read and validate the cohort CSV.

    Group codes are ``M`` (group A) and ``F`` (group B). An optional trailing
    ``phenotype_id`` column lets one file carry several cohorts; patient ids
    must be unique within each phenotype.
    """
    members = []
    seen = set()
    duplicates = []
    for line, row in _rows(stream, COHORT_HEADER, optional=("phenotype_id",)):
        pid, group_code, age_text, index_text = row[:4]
        phenotype = row[4] if len(row) > 4 else ""
        if not pid:
            raise ParseError(f"line {line}: missing patient_id")
        if group_code not in GROUP_CODES:
            raise DataValidationError(f"line {line}: unknown group code {group_code!r} (expected M or F)")
        try:
            age = int(age_text)
        except ValueError:
            raise ParseError(f"line {line}: malformed age {age_text!r}") from None
        if age < MIN_AGE:
            raise DataValidationError(
                f"line {line}: patient {pid} has age_at_index {age}; cohort members must be at least {MIN_AGE}"
            )
        key = (phenotype, pid)
        if key in seen:
            duplicates.append(pid)
        seen.add(key)
        members.append(CohortMember(pid, GROUP_CODES[group_code], age, _parse_date(index_text, line), phenotype))
    if duplicates:
        raise DataValidationError(f"duplicate patient_id(s) in cohort: {', '.join(sorted(set(duplicates)))}")
    return members


def group_events_by_patient(events: Iterable[ConditionEvent]) -> dict[str, list[ConditionEvent]]:
    by_patient = defaultdict(list)
    for ev in events:
        by_patient[ev.patient_id].append(ev)
    return by_patient


def build_histories(
    events,
    members: Sequence[CohortMember],
    lookback_days: int = DEFAULT_LOOKBACK_DAYS,
    *,
    phenotype_id: str | None = None,
    include_index_day: bool = True,
    warn_skipped: bool = True,
) -> CohortHistories:
    """Align events to each member's index date and keep first occurrences.

    ``events`` is either a list of events or the mapping returned by
    :func:`group_events_by_patient` (cheaper when building many cohorts from
    one extract). Events for patients outside ``members`` are skipped and
    tallied; members without surviving events are kept with no observations.
    """
    if lookback_days < 1:
        raise ValueError("lookback_days must be >= 1")
    by_patient = events if isinstance(events, Mapping) else group_events_by_patient(events)
    if phenotype_id is None:
        phenotype_id = members[0].phenotype_id if members else ""
    member_ids = set()
    histories = []
    kept = outside = 0
    min_delta = 0 if include_index_day else 1
    for m in members:
        if m.patient_id in member_ids:
            raise DataValidationError(f"duplicate patient_id in cohort: {m.patient_id}")
        member_ids.add(m.patient_id)
        first: dict[str, int] = {}
        for ev in by_patient.get(m.patient_id, ()):
            delta = (m.index_date - ev.occurred_on).days
            if not min_delta <= delta <= lookback_days:
                outside += 1
                continue
            kept += 1
            offset = lookback_days - delta
            prev = first.get(ev.condition_code)
            if prev is None or offset < prev:
                first[ev.condition_code] = offset
        histories.append(PatientHistory(m, dict(sorted(first.items()))))

    non_cohort = sum(len(evs) for pid, evs in by_patient.items() if pid not in member_ids)
    if non_cohort and warn_skipped:
        logger.warning("%s: skipped %d event(s) for patients outside the cohort", phenotype_id or "cohort", non_cohort)
    vocabulary = tuple(sorted({code for h in histories for code in h.observations}))
    return CohortHistories(
        phenotype_id=phenotype_id,
        histories=tuple(histories),
        vocabulary=vocabulary,
        lookback_days=lookback_days,
        n_events_kept=kept,
        n_events_outside_window=outside,
        n_events_non_cohort=non_cohort,
    )


def split_by_phenotype(members: Iterable[CohortMember]) -> dict[str, list[CohortMember]]:
    """Group members by phenotype id, in sorted phenotype order."""
    out = defaultdict(list)
    for m in members:
        out[m.phenotype_id].append(m)
    return {k: out[k] for k in sorted(out)}
