"""Synthetic multi-phenotype cohorts with controllable group disparities.

Each phenotype owns a handful of signal codes. Its members present every
signal code (with probability ``signal_prob``) some number of days before
diagnosis, drawn per group from a normal distribution truncated to the
lookback horizon. Signal codes of one phenotype leak into members of the
other phenotypes at a low rate, and noise codes are sprinkled over
everyone, so members of sibling phenotypes serve as realistic controls.

The manifest records, per phenotype, code and group, the empirical mean
TTD of exactly the first in-window occurrences written to the event file.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from datetime import date, timedelta

import numpy as np
from scipy.stats import truncnorm

from .errors import DataValidationError
from .ingest import DEFAULT_LOOKBACK_DAYS, GROUP_A, GROUP_B, MIN_AGE

GROUP_LETTER = {GROUP_A: "M", GROUP_B: "F"}


@dataclass(frozen=True)
class SynthConfig:
    n_per_group: int = 1000
    n_phenotypes: int = 2
    n_signal_codes: int = 5
    n_noise_codes: int = 40
    # mean days between a signal code's first occurrence and diagnosis
    lead_mean_A: float = 365.0
    lead_mean_B: float = 395.0
    lead_sd: float = 20.0
    signal_prob: float = 1.0
    leak_prob: float = 0.05
    noise_per_patient: float = 6.0
    repeat_prob: float = 0.2
    pre_window_per_patient: float = 0.5
    age_mean: float = 55.0
    age_sd: float = 15.0
    age_max: int = 90
    lookback_days: int = DEFAULT_LOOKBACK_DAYS
    index_start: str = "2013-01-01"
    index_end: str = "2019-01-01"
    seed: int = 0
    phenotype_ids: tuple[str, ...] = field(default=())

    @property
    def delta_days(self) -> float:
        """Nominal extra lead time of group B over group A."""
        return self.lead_mean_B - self.lead_mean_A

    def phenotypes(self) -> tuple[str, ...]:
        if self.phenotype_ids:
            return tuple(self.phenotype_ids)
        return tuple(f"P{k + 1:02d}" for k in range(self.n_phenotypes))

    def validate(self):
        counts = dict(
            n_per_group=self.n_per_group,
            n_phenotypes=self.n_phenotypes,
            n_signal_codes=self.n_signal_codes,
            n_noise_codes=self.n_noise_codes,
        )
        for name, v in counts.items():
            if v < 0:
                raise DataValidationError(f"{name} must be >= 0, got {v}")
        if self.phenotype_ids and len(self.phenotype_ids) != self.n_phenotypes:
            raise DataValidationError("phenotype_ids must list n_phenotypes ids")
        for name in ("lead_mean_A", "lead_mean_B"):
            v = getattr(self, name)
            if not 0 <= v <= self.lookback_days:
                raise DataValidationError(f"{name}={v} lies outside the lookback horizon [0, {self.lookback_days}]")
        if self.lead_sd <= 0:
            raise DataValidationError("lead_sd must be > 0")
        for name in ("signal_prob", "leak_prob", "repeat_prob"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise DataValidationError(f"{name} must be a probability, got {v}")
        if self.noise_per_patient < 0 or self.pre_window_per_patient < 0:
            raise DataValidationError("event rates must be >= 0")
        if self.noise_per_patient > self.n_noise_codes and self.n_noise_codes:
            raise DataValidationError("noise_per_patient exceeds the number of noise codes")
        if self.age_max < MIN_AGE:
            raise DataValidationError(f"age_max must be >= {MIN_AGE}")
        if date.fromisoformat(self.index_end) <= date.fromisoformat(self.index_start):
            raise DataValidationError("index_end must come after index_start")


def signal_codes(phenotype_id: str, n: int) -> list[str]:
    return [f"S_{phenotype_id}_{j:02d}" for j in range(n)]


def noise_codes(n: int) -> list[str]:
    return [f"N_{j:03d}" for j in range(n)]


def _lead_times(rng, mean, sd, horizon, size):
    a, b = (0 - mean) / sd, (horizon - mean) / sd
    draws = truncnorm.rvs(a, b, loc=mean, scale=sd, size=size, random_state=rng)
    return np.clip(np.rint(draws), 0, horizon).astype(np.int64)


def generate(config: SynthConfig) -> tuple[bytes, bytes, dict]:
    """Return ``(events_csv, cohort_csv, manifest)``; deterministic in ``config.seed``."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    horizon = config.lookback_days
    start = date.fromisoformat(config.index_start)
    span = (date.fromisoformat(config.index_end) - start).days
    phenos = config.phenotypes()
    signals = {p: signal_codes(p, config.n_signal_codes) for p in phenos}
    noise = noise_codes(config.n_noise_codes)
    lead_mean = {GROUP_A: config.lead_mean_A, GROUP_B: config.lead_mean_B}

    cohort_rows = []
    event_rows = []
    # first in-window TTD per (phenotype, code, group)
    ttd_log: dict[tuple[str, str, str], list[int]] = {}

    for p in phenos:
        others = [c for q in phenos if q != p for c in signals[q]]
        for g in (GROUP_A, GROUP_B):
            n = config.n_per_group
            ages = np.clip(np.rint(rng.normal(config.age_mean, config.age_sd, n)), MIN_AGE, config.age_max)
            offsets = rng.integers(0, span, size=n)
            sig_ttd = _lead_times(rng, lead_mean[g], config.lead_sd, horizon, (n, len(signals[p])))
            sig_on = rng.random((n, len(signals[p]))) < config.signal_prob
            for k in range(n):
                pid = f"{p}_{GROUP_LETTER[g]}{k:05d}"
                index_date = start + timedelta(days=int(offsets[k]))
                cohort_rows.append((pid, GROUP_LETTER[g], int(ages[k]), index_date.isoformat(), p))
                first: dict[str, int] = {}
                for j, code in enumerate(signals[p]):
                    if sig_on[k, j]:
                        first[code] = int(sig_ttd[k, j])
                for code in others:
                    if rng.random() < config.leak_prob:
                        first[code] = int(rng.integers(0, horizon + 1))
                if noise:
                    n_noise = min(int(rng.poisson(config.noise_per_patient)), len(noise))
                    for j in sorted(rng.choice(len(noise), size=n_noise, replace=False).tolist()):
                        first[noise[j]] = int(rng.integers(0, horizon + 1))
                patient_events = []
                for code, ttd in first.items():
                    patient_events.append((code, ttd))
                    ttd_log.setdefault((p, code, g), []).append(ttd)
                    if rng.random() < config.repeat_prob:
                        patient_events.append((code, int(rng.integers(0, ttd + 1))))
                if noise:
                    for _ in range(int(rng.poisson(config.pre_window_per_patient))):
                        code = noise[int(rng.integers(0, len(noise)))]
                        patient_events.append((code, int(rng.integers(horizon + 1, horizon + 366))))
                for code, ttd in patient_events:
                    event_rows.append((pid, code, (index_date - timedelta(days=ttd)).isoformat()))

    event_rows.sort()
    events_buf = io.StringIO()
    w = csv.writer(events_buf, lineterminator="\n")
    w.writerow(("patient_id", "condition_code", "occurred_on"))
    w.writerows(event_rows)

    cohort_buf = io.StringIO()
    w = csv.writer(cohort_buf, lineterminator="\n")
    w.writerow(("patient_id", "group", "age_at_index", "index_date", "phenotype_id"))
    w.writerows(cohort_rows)

    manifest = {
        "config": asdict(config),
        "delta_days": config.delta_days,
        "lookback_days": horizon,
        "phenotypes": {},
    }
    for p in phenos:
        codes = {}
        for (q, code, g), values in sorted(ttd_log.items()):
            if q != p:
                continue
            codes.setdefault(code, {})[g] = {"n": len(values), "mean_ttd": sum(values) / len(values)}
        manifest["phenotypes"][p] = {"signal_codes": signals[p], "codes": codes}
    return events_buf.getvalue().encode("utf-8"), cohort_buf.getvalue().encode("utf-8"), manifest


def manifest_to_json(manifest: dict) -> str:
    return json.dumps(manifest, indent=1, sort_keys=True)


def config_from_dict(d: dict) -> SynthConfig:
    known = set(SynthConfig.__dataclass_fields__)
    unknown = set(d) - known
    if unknown:
        raise DataValidationError(f"unknown synth config key(s): {', '.join(sorted(unknown))}")
    d = dict(d)
    if "phenotype_ids" in d:
        d["phenotype_ids"] = tuple(d["phenotype_ids"])
    return SynthConfig(**d)
