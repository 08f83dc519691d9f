import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_history
from oracles import naive_objective
from ttdaudit import classifier, ingest
from ttdaudit.errors import DataValidationError, StratificationError


# -- negative sampling ------------------------------------------------------


def test_only_eligible_candidate_chosen():
    pos = [make_history("p", {}, "B", 55)]
    pool = [make_history("c1", {}, "B", 58), make_history("c2", {}, "A", 55)]
    s = classifier.sample_negatives(pos, pool, seed=0)
    assert [h.patient_id for h in s.negatives] == ["c1"]
    assert s.unmatched == ()


def test_age_gap_over_five_unmatched(caplog):
    pos = [make_history("p", {}, "B", 55)]
    s = classifier.sample_negatives(pos, [make_history("c", {}, "B", 61)], seed=0)
    assert s.negatives == () and s.unmatched == ("p",)
    assert "fewer than 1 matched control" in caplog.text


def test_age_gap_of_exactly_five_ok():
    pos = [make_history("p", {}, "A", 40)]
    s = classifier.sample_negatives(pos, [make_history("c", {}, "A", 35)], seed=0)
    assert len(s.negatives) == 1


def test_rich_pool_fully_matched_and_valid():
    rng = np.random.default_rng(7)
    pos = [make_history(f"p{i}", {}, "AB"[i % 2], int(rng.integers(20, 80))) for i in range(100)]
    pool = [make_history(f"c{i}", {}, "AB"[i % 2], int(rng.integers(20, 80))) for i in range(1000)]
    s = classifier.sample_negatives(pos, pool, ratio=1, seed=3)
    assert len(s.negatives) == 100
    assert len({h.patient_id for h in s.negatives}) == 100
    assert classifier.verify_matches(pos, s, pool) == []


def test_ratio_two():
    pos = [make_history("p", {}, "A", 40)]
    pool = [make_history(f"c{i}", {}, "A", 40 + i % 3) for i in range(10)]
    s = classifier.sample_negatives(pos, pool, ratio=2, seed=1)
    assert len(s.matches["p"]) == 2


def test_sampling_deterministic():
    pos = [make_history(f"p{i}", {}, "A", 50) for i in range(5)]
    pool = [make_history(f"c{i}", {}, "A", 50) for i in range(20)]
    a = classifier.sample_negatives(pos, pool, seed=11)
    b = classifier.sample_negatives(pos, pool, seed=11)
    assert a.matches == b.matches


def test_pool_overlap_rejected():
    pos = [make_history("p", {}, "A", 50)]
    with pytest.raises(DataValidationError):
        classifier.sample_negatives(pos, pos, seed=0)


def test_verifier_catches_bad_match():
    pos = [make_history("p", {}, "A", 50)]
    pool = [make_history("c", {}, "B", 50)]
    bogus = classifier.NegativeSample((pool[0],), {"p": ("c",)}, ())
    assert classifier.verify_matches(pos, bogus, pool)


# -- stratified split -------------------------------------------------------


def _labeled(n_pos_men, n_pos_women, n_neg_men=0, n_neg_women=0):
    hs, labels = [], []
    for label, counts in ((1, (n_pos_men, n_pos_women)), (0, (n_neg_men, n_neg_women))):
        for g, n in zip("AB", counts):
            for k in range(n):
                hs.append(make_history(f"{label}{g}{k}", {"X": k % 1000}, g))
                labels.append(label)
    return classifier.LabeledCohort("P", tuple(hs), np.array(labels, dtype=np.int8), ("X",))


def test_split_80_men_120_women():
    c = _labeled(40, 60, 40, 60)
    s = classifier.stratified_split(c, 0.2, seed=0)
    test_groups = c.groups[s.test_rows]
    assert (test_groups == "A").sum() == 16 and (test_groups == "B").sum() == 24


def test_split_even():
    c = _labeled(10, 10)
    s = classifier.stratified_split(c, 0.5, seed=0)
    g = c.groups[s.test_rows]
    assert (g == "A").sum() == 5 and (g == "B").sum() == 5


def test_split_deterministic_and_partition():
    c = _labeled(23, 31, 17, 29)
    a = classifier.stratified_split(c, 0.2, seed=42)
    b = classifier.stratified_split(c, 0.2, seed=42)
    assert np.array_equal(a.test_rows, b.test_rows) and np.array_equal(a.train_rows, b.train_rows)
    assert sorted(np.concatenate([a.train_rows, a.test_rows]).tolist()) == list(range(len(c)))
    assert not set(a.train_rows.tolist()) & set(a.test_rows.tolist())


def test_split_tiny_stratum_rejected():
    with pytest.raises(StratificationError):
        classifier.stratified_split(_labeled(5, 1), 0.2, seed=0)


@pytest.mark.parametrize("frac", [0.0, 1.0, -0.1])
def test_split_bad_fraction(frac):
    with pytest.raises(ValueError):
        classifier.stratified_split(_labeled(5, 5), frac, seed=0)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 60), st.integers(2, 60), st.integers(2, 60), st.integers(2, 60), st.floats(0.05, 0.95))
def test_split_each_stratum_within_one(a, b, c_, d, frac):
    c = _labeled(a, b, c_, d)
    s = classifier.stratified_split(c, frac, seed=1)
    for g in "AB":
        for label in (0, 1):
            stratum = (c.groups == g) & (c.labels == label)
            n = int(stratum.sum())
            n_test = int(stratum[s.test_rows].sum())
            assert abs(n_test - frac * n) <= 1


# -- objective and gradient -------------------------------------------------


def _random_instance(rng, n=30, c=12):
    X = (rng.random((n, c)) < 0.3).astype(float)
    y = (rng.random(n) < 0.5).astype(float)
    y[0], y[1] = 0, 1
    return sp.csr_matrix(X), y


def test_zero_weights_objective_ln2():
    X = sp.csr_matrix(np.eye(4))
    obj, _ = classifier.loss_and_gradient(np.zeros(4), 0.0, X, np.array([0, 1, 0, 1]), 1.0)
    assert obj == pytest.approx(np.log(2), abs=1e-15)


def test_objective_matches_naive_loop():
    rng = np.random.default_rng(0)
    X, y = _random_instance(rng)
    w = rng.normal(size=X.shape[1])
    obj, _ = classifier.loss_and_gradient(w, 0.3, X, y, 2.0)
    assert obj == pytest.approx(naive_objective(w.tolist(), 0.3, X.toarray().tolist(), y.tolist(), 2.0), rel=1e-12)


def test_gradient_finite_differences():
    rng = np.random.default_rng(1)
    for _ in range(10):
        X, y = _random_instance(rng, int(rng.integers(2, 40)), int(rng.integers(1, 20)))
        w = rng.normal(size=X.shape[1])
        b, lam, h = float(rng.normal()), float(rng.uniform(0.1, 5)), 1e-6
        _, (gw, gb) = classifier.loss_and_gradient(w, b, X, y, lam)
        fd = []
        for j in range(w.size):
            e = np.zeros_like(w)
            e[j] = h
            fp, _ = classifier.loss_and_gradient(w + e, b, X, y, lam)
            fm, _ = classifier.loss_and_gradient(w - e, b, X, y, lam)
            fd.append((fp - fm) / (2 * h))
        fp, _ = classifier.loss_and_gradient(w, b + h, X, y, lam)
        fm, _ = classifier.loss_and_gradient(w, b - h, X, y, lam)
        fd.append((fp - fm) / (2 * h))
        analytic = np.append(gw, gb)
        fd = np.array(fd)
        assert np.linalg.norm(analytic - fd) / max(np.linalg.norm(fd), 1e-12) < 1e-5


def test_intercept_not_penalized():
    X = sp.csr_matrix(np.zeros((4, 1)))
    y = np.array([0, 0, 1, 1])
    o1, _ = classifier.loss_and_gradient(np.zeros(1), 0.0, X, y, 1.0)
    o2, _ = classifier.loss_and_gradient(np.zeros(1), 0.0, X, y, 100.0)
    assert o1 == o2


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        classifier.loss_and_gradient(np.zeros(3), 0.0, sp.csr_matrix(np.eye(2)), np.array([0, 1]), 1.0)
    with pytest.raises(ValueError):
        classifier.loss_and_gradient(np.zeros(2), 0.0, sp.csr_matrix(np.eye(2)), np.array([0, 1, 1]), 1.0)


# -- training ---------------------------------------------------------------

SEPARABLE_X = np.array([[1, 0], [1, 0], [1, 1], [0, 1], [0, 1], [0, 0]], dtype=float)
SEPARABLE_Y = np.array([1, 1, 1, 0, 0, 0])


def test_separable_toy_fits_perfectly():
    m = classifier.train(sp.csr_matrix(SEPARABLE_X), SEPARABLE_Y, lam=1e-4)
    assert np.array_equal(classifier.predict(m, SEPARABLE_X), SEPARABLE_Y)


def test_single_class_rejected():
    with pytest.raises(DataValidationError):
        classifier.train(SEPARABLE_X, np.ones(6))


def test_retrain_bit_identical():
    rng = np.random.default_rng(5)
    X, y = _random_instance(rng, 40, 15)
    a = classifier.train(X, y, seed=9)
    b = classifier.train(X, y, seed=9)
    assert a.weights.tobytes() == b.weights.tobytes() and a.intercept == b.intercept


def test_objective_monotone_and_converged():
    rng = np.random.default_rng(6)
    X, y = _random_instance(rng, 40, 15)
    m = classifier.train(X, y, lam=1.0)
    trace = np.array(m.objective_trace)
    assert np.all(np.diff(trace) <= 0)
    assert m.converged and m.grad_max_norm < 1e-6
    assert np.all(np.isfinite(m.weights))


def test_max_iter_flagged():
    rng = np.random.default_rng(6)
    X, y = _random_instance(rng, 40, 15)
    m = classifier.train(X, y, lam=1.0, max_iter=2)
    assert not m.converged and m.iterations == 2


def test_optimum_beats_perturbations():
    rng = np.random.default_rng(8)
    X, y = _random_instance(rng, 35, 10)
    m = classifier.train(X, y, lam=0.5)
    for _ in range(100):
        dw = rng.normal(scale=1e-2, size=m.weights.size)
        db = float(rng.normal(scale=1e-2))
        obj, _ = classifier.loss_and_gradient(m.weights + dw, m.intercept + db, X, y, 0.5)
        assert m.objective <= obj


def test_weight_norm_shrinks_with_lambda():
    rng = np.random.default_rng(2)
    X, y = _random_instance(rng, 40, 10)
    norms = [np.linalg.norm(classifier.train(X, y, lam=lam).weights) for lam in (0.1, 1, 10, 100, 1e4, 1e6)]
    assert all(a >= b for a, b in zip(norms, norms[1:]))
    assert norms[-1] < 1e-3


# -- scoring ----------------------------------------------------------------


def test_zero_model_scores_half_and_predicts_positive():
    m = classifier.LogRegModel(np.zeros(3), 0.0, 1.0)
    X = sp.csr_matrix(np.eye(3))
    assert np.all(classifier.predict_proba(m, X) == 0.5)
    assert np.all(classifier.predict(m, X) == 1)


def test_threshold_tie_is_positive():
    m = classifier.LogRegModel(np.array([0.0]), 0.0, 1.0)
    assert classifier.predict(m, np.array([[1.0]]), threshold=0.5)[0] == 1


def test_predict_dimension_mismatch():
    m = classifier.LogRegModel(np.zeros(3), 0.0, 1.0)
    with pytest.raises(ValueError):
        classifier.predict_proba(m, sp.csr_matrix(np.eye(2)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_positive_weight_feature_never_lowers_proba(seed):
    rng = np.random.default_rng(seed)
    c = 8
    m = classifier.LogRegModel(rng.normal(size=c), float(rng.normal()), 1.0)
    row = (rng.random(c) < 0.4).astype(float)
    for j in np.flatnonzero((m.weights > 0) & (row == 0)):
        more = row.copy()
        more[j] = 1
        assert classifier.predict_proba(m, more[None, :])[0] >= classifier.predict_proba(m, row[None, :])[0]


def test_model_json_round_trip():
    rng = np.random.default_rng(3)
    X, y = _random_instance(rng, 30, 6)
    m = classifier.train(X, y, vocabulary=[f"c{j}" for j in range(6)])
    back = classifier.LogRegModel.from_json(m.to_json())
    assert back.weights.tobytes() == m.weights.tobytes()
    assert back.intercept == m.intercept and back.vocabulary == m.vocabulary
    assert np.array_equal(classifier.predict_proba(back, X), classifier.predict_proba(m, X))


# -- labeled cohorts --------------------------------------------------------


def test_labeled_cohort_layout():
    pos = ingest.CohortHistories("P", (make_history("p", {"X": 1}),), ("X",))
    neg = [make_history("n", {"Y": 2}, "B")]
    c = classifier.LabeledCohort.from_cohorts(pos, neg)
    assert c.labels.tolist() == [1, 0]
    assert c.vocabulary == ("X", "Y")
    sub = c.subset([1])
    assert sub.vocabulary == c.vocabulary and sub.labels.tolist() == [0]
    assert [h.patient_id for h in c.positives] == ["p"]
