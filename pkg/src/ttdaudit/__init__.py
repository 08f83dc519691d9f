"""Time-to-diagnosis disparities and time-variant fairness audits of diagnosis classifiers."""

from .classifier import LabeledCohort, LogRegModel, loss_and_gradient, predict, predict_proba, train
from .fairness import GapSeries, MsdResult, TrendFit, WindowEvaluation, gap, gap_series, gap_trend, msd
from .features import CensoredFeatureMatrix, WindowSpec, censored_matrix, full_matrix, make_window_spec
from .ingest import CohortHistories, CohortMember, ConditionEvent, PatientHistory, build_histories

__version__ = "0.1.0"
