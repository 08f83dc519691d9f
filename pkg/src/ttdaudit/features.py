"""Right-censored binary feature matrices.

Window ``i`` of a :class:`WindowSpec` exposes every observation whose day
offset is at or before ``min(i * w, horizon_days)``. The last window is the
uncensored one-hot matrix.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .ingest import DEFAULT_LOOKBACK_DAYS, PatientHistory

DEFAULT_WINDOW_DAYS = 30


@dataclass(frozen=True)
class WindowSpec:
    horizon_days: int
    w: int

    @property
    def b(self) -> int:
        return math.ceil(self.horizon_days / self.w)

    def cutoff(self, i: int) -> int:
        self._check(i)
        return min(i * self.w, self.horizon_days)

    def cutoffs(self) -> list[int]:
        return [self.cutoff(i) for i in range(1, self.b + 1)]

    def _check(self, i: int):
        if not 1 <= i <= self.b:
            raise ValueError(f"window index {i} outside [1, {self.b}]")


def make_window_spec(horizon_days: int = DEFAULT_LOOKBACK_DAYS, w: int = DEFAULT_WINDOW_DAYS) -> WindowSpec:
    if w < 1:
        raise ValueError(f"window size must be >= 1 day, got {w}")
    if horizon_days < 1:
        raise ValueError(f"horizon must be >= 1 day, got {horizon_days}")
    return WindowSpec(int(horizon_days), int(w))


@dataclass(frozen=True)
class CensoredFeatureMatrix:
    window_index: int
    cutoff_day: int
    row_ids: tuple[str, ...]
    col_labels: tuple[str, ...]
    matrix: sp.csr_matrix

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    @property
    def nnz(self) -> int:
        return self.matrix.nnz

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()

    def dump(self, path) -> None:
        """Write ``row,col,1`` triplets plus a ``.labels.json`` sidecar."""
        coo = self.matrix.tocoo()
        with open(path, "w", encoding="utf-8") as fh:
            for r, c in sorted(zip(coo.row.tolist(), coo.col.tolist())):
                fh.write(f"{r},{c},1\n")
        sidecar = {
            "window_index": self.window_index,
            "cutoff_day": self.cutoff_day,
            "rows": list(self.row_ids),
            "cols": list(self.col_labels),
        }
        with open(f"{path}.labels.json", "w", encoding="utf-8") as fh:
            json.dump(sidecar, fh, indent=1)


def _unpack(histories, vocabulary):
    if hasattr(histories, "histories"):
        if vocabulary is None:
            vocabulary = histories.vocabulary
        histories = histories.histories
    elif vocabulary is None:
        vocabulary = sorted({code for h in histories for code in h.observations})
    return tuple(histories), tuple(vocabulary)


class _OffsetTriplets:
    """Row, column and day offset of every observation, computed once."""

    def __init__(self, histories: Sequence[PatientHistory], vocabulary: Sequence[str]):
        col_of = {code: j for j, code in enumerate(vocabulary)}
        rows, cols, offsets = [], [], []
        for r, h in enumerate(histories):
            for code, offset in h.observations.items():
                j = col_of.get(code)
                # codes outside the vocabulary (e.g. unseen at training) are dropped
                if j is not None:
                    rows.append(r)
                    cols.append(j)
                    offsets.append(offset)
        self.rows = np.asarray(rows, dtype=np.int64)
        self.cols = np.asarray(cols, dtype=np.int64)
        self.offsets = np.asarray(offsets, dtype=np.int64)
        self.shape = (len(histories), len(vocabulary))
        self.row_ids = tuple(h.patient_id for h in histories)
        self.col_labels = tuple(vocabulary)

    def matrix(self, window_index: int, cutoff: int) -> CensoredFeatureMatrix:
        keep = self.offsets <= cutoff
        data = np.ones(int(keep.sum()), dtype=np.float64)
        m = sp.csr_matrix((data, (self.rows[keep], self.cols[keep])), shape=self.shape)
        m.sum_duplicates()
        m.sort_indices()
        return CensoredFeatureMatrix(window_index, cutoff, self.row_ids, self.col_labels, m)


def censored_matrix(histories, spec: WindowSpec, i: int, vocabulary=None) -> CensoredFeatureMatrix:
    """Build T_i for ``histories``.

    ``histories`` may be a :class:`~ttdaudit.ingest.CohortHistories`, a
    labeled cohort, or a plain sequence of patient histories. Passing
    ``vocabulary`` fixes the column order (a trained model's columns, say).
    """
    cutoff = spec.cutoff(i)
    hs, vocab = _unpack(histories, vocabulary)
    return _OffsetTriplets(hs, vocab).matrix(i, cutoff)


def censored_matrices(histories, spec: WindowSpec, vocabulary=None) -> list[CensoredFeatureMatrix]:
    """All windows T_1 .. T_b in order, sharing one pass over the histories."""
    hs, vocab = _unpack(histories, vocabulary)
    triplets = _OffsetTriplets(hs, vocab)
    return [triplets.matrix(i, spec.cutoff(i)) for i in range(1, spec.b + 1)]


def full_matrix(histories, vocabulary=None, horizon_days: int | None = None) -> CensoredFeatureMatrix:
    """Uncensored one-hot matrix; identical to the last censored window."""
    if horizon_days is None:
        horizon_days = getattr(histories, "lookback_days", DEFAULT_LOOKBACK_DAYS)
    spec = make_window_spec(horizon_days, horizon_days)
    return censored_matrix(histories, spec, spec.b, vocabulary)
