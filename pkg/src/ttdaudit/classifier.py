"""Per-phenotype diagnosis classifiers.

Positives are a phenotype's cohort; negatives are matched controls drawn
from other phenotypes (same group, age within five years). Models are
L2-penalized logistic regressions on one-hot condition features, fitted by
full-batch gradient descent with a backtracking line search.

Objective::

    f(w, b) = mean_i [log(1 + exp(z_i)) - y_i z_i] + lam / (2N) * ||w||^2,
    z = X w + b

The intercept is not penalized.
"""

from __future__ import annotations

import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .errors import DataValidationError, StratificationError
from .ingest import DEFAULT_LOOKBACK_DAYS, GROUPS, CohortHistories, PatientHistory

logger = logging.getLogger(__name__)

MAX_AGE_GAP = 5
DEFAULT_LAMBDA = 1.0
DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 1000
DEFAULT_TEST_FRAC = 0.2
DEFAULT_RATIO = 1


@dataclass(frozen=True)
class LabeledCohort:
    """Positives followed by negatives, with a shared column vocabulary."""

    phenotype_id: str
    histories: tuple[PatientHistory, ...]
    labels: np.ndarray
    vocabulary: tuple[str, ...]
    lookback_days: int = DEFAULT_LOOKBACK_DAYS

    @classmethod
    def from_cohorts(cls, positives: CohortHistories, negatives) -> "LabeledCohort":
        neg = tuple(negatives.histories if hasattr(negatives, "histories") else negatives)
        hs = tuple(positives.histories) + neg
        labels = np.concatenate([np.ones(len(positives.histories), dtype=np.int8), np.zeros(len(neg), dtype=np.int8)])
        vocab = tuple(sorted({c for h in hs for c in h.observations}))
        return cls(positives.phenotype_id, hs, labels, vocab, positives.lookback_days)

    def __len__(self) -> int:
        return len(self.histories)

    @property
    def groups(self) -> np.ndarray:
        return np.array([h.group for h in self.histories])

    @property
    def positives(self) -> tuple[PatientHistory, ...]:
        return tuple(h for h, y in zip(self.histories, self.labels) if y == 1)

    @property
    def negatives(self) -> tuple[PatientHistory, ...]:
        return tuple(h for h, y in zip(self.histories, self.labels) if y == 0)

    def subset(self, rows) -> "LabeledCohort":
        """Rows in the given order; the vocabulary is kept so columns stay aligned."""
        rows = np.asarray(rows, dtype=np.int64)
        return LabeledCohort(
            self.phenotype_id,
            tuple(self.histories[r] for r in rows),
            self.labels[rows],
            self.vocabulary,
            self.lookback_days,
        )


@dataclass(frozen=True)
class NegativeSample:
    negatives: tuple[PatientHistory, ...]
    matches: dict[str, tuple[str, ...]]
    unmatched: tuple[str, ...]


def sample_negatives(positives, candidate_pool: Sequence[PatientHistory], ratio: int = DEFAULT_RATIO, seed=0) -> NegativeSample:
    """Draw up to ``ratio`` matched controls per positive, without replacement.

    A control is eligible for a positive when it has the same group and an
    age at index within five years. Positives are served in cohort order and
    each picks uniformly among the controls still available. Positives left
    short are reported in ``unmatched`` and logged.
    """
    if ratio < 1:
        raise ValueError("ratio must be >= 1")
    pos = tuple(positives.histories if hasattr(positives, "histories") else positives)
    pos_ids = {h.patient_id for h in pos}
    overlap = sorted(h.patient_id for h in candidate_pool if h.patient_id in pos_ids)
    if overlap:
        raise DataValidationError(f"candidate pool contains positive patients: {', '.join(overlap[:10])}")

    rng = np.random.default_rng(seed)
    buckets: dict[tuple[str, int], list[int]] = defaultdict(list)
    for k, h in enumerate(candidate_pool):
        buckets[(h.group, h.member.age_at_index)].append(k)
    used = np.zeros(len(candidate_pool), dtype=bool)

    chosen: list[int] = []
    matches = {}
    unmatched = []
    for h in pos:
        age = h.member.age_at_index
        eligible = [
            k
            for a in range(age - MAX_AGE_GAP, age + MAX_AGE_GAP + 1)
            for k in buckets.get((h.group, a), ())
            if not used[k]
        ]
        eligible.sort()
        take = min(ratio, len(eligible))
        picks = rng.choice(len(eligible), size=take, replace=False) if take else []
        ids = []
        for p in picks:
            k = eligible[int(p)]
            used[k] = True
            chosen.append(k)
            ids.append(candidate_pool[k].patient_id)
        matches[h.patient_id] = tuple(ids)
        if take < ratio:
            unmatched.append(h.patient_id)
    if unmatched:
        logger.warning(
            "%d of %d positive(s) received fewer than %d matched control(s)", len(unmatched), len(pos), ratio
        )
    return NegativeSample(tuple(candidate_pool[k] for k in chosen), matches, tuple(unmatched))


def verify_matches(positives, sample: NegativeSample, candidate_pool: Sequence[PatientHistory]) -> list[str]:
    """Re-check every sampled control post hoc; returns a list of violations."""
    pos = {h.patient_id: h for h in (positives.histories if hasattr(positives, "histories") else positives)}
    pool = {h.patient_id: h for h in candidate_pool}
    problems = []
    seen = set()
    for pid, ctrl_ids in sample.matches.items():
        p = pos[pid]
        for cid in ctrl_ids:
            c = pool.get(cid)
            if c is None:
                problems.append(f"{cid}: not in candidate pool")
                continue
            if cid in seen:
                problems.append(f"{cid}: sampled more than once")
            seen.add(cid)
            if c.group != p.group:
                problems.append(f"{cid}: group {c.group} != {p.group} of {pid}")
            if abs(c.member.age_at_index - p.member.age_at_index) > MAX_AGE_GAP:
                problems.append(f"{cid}: age gap to {pid} exceeds {MAX_AGE_GAP}")
            if cid in pos:
                problems.append(f"{cid}: is also a positive")
    return problems


@dataclass(frozen=True)
class SplitIndices:
    train_rows: np.ndarray
    test_rows: np.ndarray
    seed: int


def stratified_split(cohort: LabeledCohort, test_frac: float = DEFAULT_TEST_FRAC, seed=0) -> SplitIndices:
    """Split rows so every (group, label) stratum keeps its share in the test set."""
    if not 0 < test_frac < 1:
        raise ValueError("test_frac must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    groups = cohort.groups
    train, test = [], []
    for g in GROUPS:
        for label in (1, 0):
            idx = np.flatnonzero((groups == g) & (cohort.labels == label))
            if idx.size == 0:
                continue
            if idx.size < 2:
                raise StratificationError(
                    f"stratum group={g} label={label} has {idx.size} member; at least 2 are needed to stratify"
                )
            n_test = math.floor(test_frac * idx.size + 0.5)
            n_test = min(max(n_test, 1), idx.size - 1)
            perm = rng.permutation(idx)
            test.append(perm[:n_test])
            train.append(perm[n_test:])
    return SplitIndices(np.sort(np.concatenate(train)), np.sort(np.concatenate(test)), seed)


def _check_dims(w, X, y=None):
    if X.ndim != 2 or X.shape[1] != w.shape[0]:
        raise ValueError(f"feature matrix has {X.shape[-1]} columns, weights have {w.shape[0]}")
    if y is not None and y.shape[0] != X.shape[0]:
        raise ValueError(f"{X.shape[0]} rows but {y.shape[0]} labels")


def loss_and_gradient(weights, intercept, X, y, lam):
    """Objective value and gradient ``(grad_w, grad_intercept)``."""
    w = np.asarray(weights, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_dims(w, X, y)
    if lam <= 0:
        raise ValueError("lambda must be > 0")
    n = X.shape[0]
    z = X @ w + intercept
    nll = np.mean(np.logaddexp(0.0, z) - y * z)
    obj = nll + lam / (2 * n) * float(w @ w)
    resid = expit(z) - y
    grad_w = X.T @ resid / n + (lam / n) * w
    grad_b = float(resid.mean())
    return float(obj), (np.asarray(grad_w).ravel(), grad_b)


@dataclass(frozen=True)
class LogRegModel:
    weights: np.ndarray
    intercept: float
    lam: float
    vocabulary: tuple[str, ...] = ()
    iterations: int = 0
    objective: float = float("nan")
    grad_max_norm: float = float("nan")
    converged: bool = False
    seed: int = 0
    objective_trace: tuple[float, ...] = field(default=(), compare=False, repr=False)

    def to_json(self) -> str:
        labels = self.vocabulary or tuple(str(j) for j in range(len(self.weights)))
        payload = {
            "lambda": self.lam,
            "intercept": self.intercept,
            "weights": [[c, float(v)] for c, v in zip(labels, self.weights.tolist())],
            "metadata": {
                "iterations": self.iterations,
                "objective": self.objective,
                "grad_max_norm": self.grad_max_norm,
                "converged": self.converged,
                "seed": self.seed,
            },
        }
        return json.dumps(payload, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "LogRegModel":
        d = json.loads(text)
        meta = d.get("metadata", {})
        return cls(
            weights=np.array([v for _, v in d["weights"]], dtype=np.float64),
            intercept=float(d["intercept"]),
            lam=float(d["lambda"]),
            vocabulary=tuple(c for c, _ in d["weights"]),
            iterations=int(meta.get("iterations", 0)),
            objective=float(meta.get("objective", float("nan"))),
            grad_max_norm=float(meta.get("grad_max_norm", float("nan"))),
            converged=bool(meta.get("converged", False)),
            seed=int(meta.get("seed", 0)),
        )


def train(
    X,
    y,
    lam: float = DEFAULT_LAMBDA,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    seed: int = 0,
    vocabulary: Sequence[str] = (),
) -> LogRegModel:
    """Fit the penalized logistic regression from a zero start.

    Steps start from a Barzilai-Borwein estimate and are halved until the
    Armijo condition holds, so every accepted step lowers the objective.
    Stops once the gradient max-norm drops below ``tol``; hitting
    ``max_iter`` leaves ``converged=False``. The fit itself draws no random
    numbers; ``seed`` is carried in the metadata.
    """
    if sp.issparse(X):
        X = sp.csr_matrix(X, dtype=np.float64)
    else:
        X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.shape[0] < 2:
        raise DataValidationError("need at least 2 training rows")
    if not (np.any(y == 1) and np.any(y == 0)):
        raise DataValidationError("training labels contain a single class")
    if lam <= 0:
        raise ValueError("lambda must be > 0")

    c = X.shape[1]
    theta = np.zeros(c + 1)  # weights then intercept

    def f_and_g(t):
        obj, (gw, gb) = loss_and_gradient(t[:c], t[c], X, y, lam)
        return obj, np.append(gw, gb)

    obj, g = f_and_g(theta)
    trace = [obj]
    step = 1.0
    prev_theta = prev_g = None
    converged = False
    it = 0
    while True:
        if np.max(np.abs(g)) < tol:
            converged = True
            break
        if it >= max_iter:
            break
        if prev_theta is not None:
            s, dg = theta - prev_theta, g - prev_g
            sy = float(s @ dg)
            if sy > 0:
                step = float(np.clip(s @ s / sy, 1e-10, 1e10))
        gg = float(g @ g)
        for _ in range(60):
            cand = theta - step * g
            cand_obj, cand_g = f_and_g(cand)
            if cand_obj <= obj - 1e-4 * step * gg:
                break
            step *= 0.5
        else:
            logger.warning("line search failed at iteration %d; stopping", it + 1)
            break
        prev_theta, prev_g = theta, g
        theta, obj, g = cand, cand_obj, cand_g
        trace.append(obj)
        it += 1

    if not converged:
        logger.info("optimizer stopped after %d iterations (grad max-norm %.3g)", it, np.max(np.abs(g)))
    return LogRegModel(
        weights=theta[:c].copy(),
        intercept=float(theta[c]),
        lam=float(lam),
        vocabulary=tuple(vocabulary),
        iterations=it,
        objective=float(obj),
        grad_max_norm=float(np.max(np.abs(g))),
        converged=converged,
        seed=int(seed),
        objective_trace=tuple(trace),
    )


def predict_proba(model: LogRegModel, X) -> np.ndarray:
    _check_dims(model.weights, X)
    return expit(np.asarray(X @ model.weights).ravel() + model.intercept)


def predict(model: LogRegModel, X, threshold: float = 0.5) -> np.ndarray:
    return (predict_proba(model, X) >= threshold).astype(np.int8)
