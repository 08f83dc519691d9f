"""Time-variant fairness gaps, mean squared discrimination and trend fits.

Every gap is signed group A minus group B (men minus women): a positive
value means the classifier does better for group A at that window.
Windows where either group's metric has a zero denominator are undefined
and carried as NaN; summaries average over the defined windows only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .classifier import LabeledCohort, LogRegModel, predict
from .errors import UndefinedMetricError
from .features import WindowSpec, censored_matrices
from .ingest import GROUP_A, GROUP_B, GROUPS

METRICS = ("recall", "specificity", "precision", "accuracy")
DEFAULT_METRICS = ("recall", "specificity", "precision")
DEFAULT_RESAMPLES = 1000
MAX_DISCARD_FRAC = 0.5


@dataclass(frozen=True)
class Confusion:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class GroupConfusion:
    A: Confusion
    B: Confusion

    def __getitem__(self, group: str) -> Confusion:
        return {GROUP_A: self.A, GROUP_B: self.B}[group]

    def swapped(self) -> "GroupConfusion":
        return GroupConfusion(self.B, self.A)


def confusion_by_group(y_true, y_pred, groups) -> GroupConfusion:
    y_true = np.asarray(y_true).astype(bool)
    y_pred = np.asarray(y_pred).astype(bool)
    groups = np.asarray(groups)
    if not (y_true.shape == y_pred.shape == groups.shape):
        raise ValueError(f"length mismatch: {y_true.shape}, {y_pred.shape}, {groups.shape}")
    unknown = set(np.unique(groups).tolist()) - set(GROUPS)
    if unknown:
        raise ValueError(f"unknown group label(s): {sorted(unknown)}")
    out = {}
    for g in GROUPS:
        m = groups == g
        t, p = y_true[m], y_pred[m]
        out[g] = Confusion(
            tp=int(np.sum(t & p)),
            fp=int(np.sum(~t & p)),
            tn=int(np.sum(~t & ~p)),
            fn=int(np.sum(t & ~p)),
        )
    return GroupConfusion(out[GROUP_A], out[GROUP_B])


def _ratio(num, den):
    return num / den if den else math.nan


def metric_value(metric: str, c: Confusion) -> float:
    if metric == "recall":
        return _ratio(c.tp, c.tp + c.fn)
    if metric == "specificity":
        return _ratio(c.tn, c.tn + c.fp)
    if metric == "precision":
        return _ratio(c.tp, c.tp + c.fp)
    if metric == "accuracy":
        return _ratio(c.tp + c.tn, c.total)
    raise ValueError(f"unknown metric {metric!r}; choose from {', '.join(METRICS)}")


def gap(metric: str, conf: GroupConfusion) -> float:
    """Metric for group A minus metric for group B; NaN when undefined."""
    a = metric_value(metric, conf.A)
    b = metric_value(metric, conf.B)
    if math.isnan(a) or math.isnan(b):
        return math.nan
    return a - b


@dataclass(frozen=True)
class GapSeries:
    metric: str
    values: np.ndarray
    values_A: np.ndarray
    values_B: np.ndarray
    spec: WindowSpec | None = None

    @property
    def defined(self) -> np.ndarray:
        return ~np.isnan(self.values)

    @property
    def window_indices(self) -> np.ndarray:
        return np.arange(1, len(self.values) + 1)

    def swapped(self) -> "GapSeries":
        return GapSeries(self.metric, -self.values, self.values_B, self.values_A, self.spec)


def _as_values(series) -> np.ndarray:
    if isinstance(series, GapSeries):
        return series.values
    return np.asarray(series, dtype=np.float64)


# Confusion counts are stacked as arrays of shape (b, 2, 4): window, group,
# (tp, fp, tn, fn). Gaps for many windows then come out in one vector op.


def _counts(preds: np.ndarray, labels: np.ndarray, group_masks, weights=None) -> np.ndarray:
    pos = labels.astype(bool)
    p = preds.astype(bool)
    out = np.empty((preds.shape[0], 2, 4), dtype=np.int64)
    for k, gm in enumerate(group_masks):
        w = gm.astype(np.int64) if weights is None else weights * gm
        out[:, k, 0] = (p & pos).astype(np.int64) @ w
        out[:, k, 1] = (p & ~pos).astype(np.int64) @ w
        out[:, k, 2] = (~p & ~pos).astype(np.int64) @ w
        out[:, k, 3] = (~p & pos).astype(np.int64) @ w
    return out


def _metric_from_counts(metric: str, counts: np.ndarray) -> np.ndarray:
    tp, fp, tn, fn = (counts[..., j].astype(np.float64) for j in range(4))
    if metric == "recall":
        num, den = tp, tp + fn
    elif metric == "specificity":
        num, den = tn, tn + fp
    elif metric == "precision":
        num, den = tp, tp + fp
    elif metric == "accuracy":
        num, den = tp + tn, tp + fp + tn + fn
    else:
        raise ValueError(f"unknown metric {metric!r}; choose from {', '.join(METRICS)}")
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1), np.nan)


def _series_from_counts(metric, counts, spec=None) -> GapSeries:
    vals = _metric_from_counts(metric, counts)
    a, b = vals[:, 0], vals[:, 1]
    return GapSeries(metric, a - b, a, b, spec)


class WindowEvaluation:
    """Predictions of one model on every censored window of a test cohort.

    ``predictions[i - 1, p]`` is the label predicted for patient ``p`` from
    T_i. Holding these lets gap series for several metrics, and bootstrap
    resamples of patients, reuse a single scoring pass.
    """

    def __init__(self, predictions: np.ndarray, labels, groups, spec: WindowSpec):
        self.predictions = np.asarray(predictions, dtype=np.int8)
        self.labels = np.asarray(labels, dtype=np.int8)
        self.groups = np.asarray(groups)
        self.spec = spec
        self._masks = [self.groups == g for g in GROUPS]

    @classmethod
    def from_model(cls, model: LogRegModel, cohort: LabeledCohort, spec: WindowSpec, threshold: float = 0.5):
        mats = censored_matrices(cohort, spec, vocabulary=model.vocabulary or None)
        preds = np.vstack([predict(model, t.matrix, threshold) for t in mats]) if mats else np.empty((0, len(cohort)))
        return cls(preds, cohort.labels, cohort.groups, spec)

    def confusion(self, i: int) -> GroupConfusion:
        return confusion_by_group(self.labels, self.predictions[i - 1], self.groups)

    def counts(self, rows=None) -> np.ndarray:
        if rows is None:
            return _counts(self.predictions, self.labels, self._masks)
        weights = np.bincount(rows, minlength=self.labels.shape[0]).astype(np.int64)
        return _counts(self.predictions, self.labels, self._masks, weights)

    def series(self, metric: str, rows=None) -> GapSeries:
        return _series_from_counts(metric, self.counts(rows), self.spec)

    def bootstrap(
        self,
        metric: str,
        n_resamples: int = DEFAULT_RESAMPLES,
        alpha: float = 0.05,
        seed: int = 0,
    ) -> "MsdResult":
        """Patient bootstrap, stratified by group, with percentile bounds."""
        if n_resamples < 1:
            raise ValueError("n_resamples must be >= 1")
        if not 0 < alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        point = msd(self.series(metric))
        strata = [np.flatnonzero(m) for m in self._masks]
        children = np.random.SeedSequence(seed).spawn(n_resamples)
        stats = []
        discarded = 0
        for child in children:
            rng = np.random.default_rng(child)
            rows = np.concatenate([s[rng.integers(0, s.size, size=s.size)] for s in strata if s.size])
            s = self.series(metric, rows)
            if not s.defined.any():
                discarded += 1
                continue
            stats.append(msd(s).msd)
        if discarded > MAX_DISCARD_FRAC * n_resamples:
            raise UndefinedMetricError(
                f"{metric}: {discarded} of {n_resamples} bootstrap resamples had no defined window"
            )
        lo, hi = np.quantile(np.asarray(stats), [alpha / 2, 1 - alpha / 2])
        return MsdResult(
            point.msd,
            point.mean_gap,
            point.mse,
            point.n_windows_used,
            float(lo),
            float(hi),
            n_resamples=n_resamples,
            n_discarded=discarded,
        )


def gap_series(model: LogRegModel, cohort: LabeledCohort, spec: WindowSpec, metric: str, threshold: float = 0.5) -> GapSeries:
    """Score T_1 .. T_b of the test cohort and take the gap at each window."""
    return WindowEvaluation.from_model(model, cohort, spec, threshold).series(metric)


@dataclass(frozen=True)
class MsdResult:
    msd: float
    mean_gap: float
    mse: float
    n_windows_used: int
    ci_low: float | None = None
    ci_high: float | None = None
    n_resamples: int = 0
    n_discarded: int = 0


def msd(series) -> MsdResult:
    """Mean squared discrimination over the defined windows.

    ``sign(mean gap) * mean(gap ** 2)`` with ``sign(0) = 0``.
    """
    v = _as_values(series)
    v = v[~np.isnan(v)]
    if v.size == 0:
        raise UndefinedMetricError("every window of the gap series is undefined")
    mean_gap = float(np.mean(v))
    mse = float(np.mean(v * v))
    return MsdResult(float(np.sign(mean_gap)) * mse, mean_gap, mse, int(v.size))


def bootstrap_msd(
    model: LogRegModel,
    cohort: LabeledCohort,
    spec: WindowSpec,
    metric: str,
    n_resamples: int = DEFAULT_RESAMPLES,
    alpha: float = 0.05,
    seed: int = 0,
    threshold: float = 0.5,
) -> MsdResult:
    ev = WindowEvaluation.from_model(model, cohort, spec, threshold)
    return ev.bootstrap(metric, n_resamples=n_resamples, alpha=alpha, seed=seed)


@dataclass(frozen=True)
class TrendFit:
    slope: float
    intercept: float
    n_points: int


def fit_line(x: Sequence[float], y: Sequence[float]) -> TrendFit:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2:
        raise UndefinedMetricError(f"a trend needs at least 2 defined windows, got {x.size}")
    xm, ym = x.mean(), y.mean()
    dx = x - xm
    sxx = float(dx @ dx)
    if sxx == 0:
        raise UndefinedMetricError("trend abscissae are all equal")
    slope = float(dx @ (y - ym)) / sxx
    return TrendFit(slope, float(ym - slope * xm), int(x.size))


def gap_trend(series) -> TrendFit:
    """Least-squares line through (window index, gap) over defined windows."""
    v = _as_values(series)
    idx = np.arange(1, v.size + 1)
    ok = ~np.isnan(v)
    return fit_line(idx[ok], v[ok])
