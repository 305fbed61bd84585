import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from contestdml.blp import blp_fit
from contestdml.dataset import Dataset
from contestdml.dml import (NuisanceFit, aipw_scores, assign_folds, ate, audit_crossfit, common_support,
                            crossfit_nuisances, naive_difference, orthogonal_scores, read_scores_csv,
                            write_scores_csv)
from contestdml.errors import DataError, NumericError
from contestdml.forest import ForestParams

from conftest import make_dataset

FAST = ForestParams(n_trees=20, min_leaf=10)


def test_score_hand_values():
    assert aipw_scores(1, 1, 0.6, 0.4, 0.5) == pytest.approx(1.0, abs=1e-15)
    assert aipw_scores(0, 0, 0.6, 0.4, 0.5) == pytest.approx(1.0, abs=1e-15)


@settings(max_examples=100)
@given(st.floats(0.01, 0.99), st.floats(0.01, 0.99), st.sampled_from([0.0, 1.0]))
def test_perfect_equal_nuisances_give_zero(m, p, d):
    assert aipw_scores(m, d, m, m, p) == 0.0


def test_ate_of_constant_scores():
    est = ate(np.full(50, 0.25))
    assert est.estimate == 0.25 and est.std_error == 0.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=3, max_size=60))
def test_ate_equals_constant_only_blp(values):
    y = np.asarray(values)
    est, fit = ate(y), blp_fit(y)
    assert fit["const"] == pytest.approx(est.estimate, abs=1e-12)
    assert fit.se_of("const") == pytest.approx(est.std_error, abs=1e-12)


def test_cluster_se_with_singletons_equals_default():
    y = np.random.default_rng(0).normal(size=40)
    a, b = ate(y), ate(y, cluster=np.arange(40))
    assert b.std_error == pytest.approx(a.std_error, rel=1e-12)


def test_ate_interval_level():
    y = np.random.default_rng(1).normal(size=100)
    e90, e95 = ate(y), ate(y, level=0.95)
    assert e90.level == 0.9
    assert e95.ci_high - e95.ci_low > e90.ci_high - e90.ci_low
    with pytest.raises(DataError):
        ate([1.0])


def test_crossfit_audit_is_clean():
    ds = make_dataset(300)
    fit = crossfit_nuisances(ds, FAST, n_folds=3, seed=1)
    assert audit_crossfit(fit) == []
    assert np.all((fit.p_hat >= 0.01) & (fit.p_hat <= 0.99))
    assert sorted(np.unique(fit.fold_id)) == [0, 1, 2]


def test_audit_detects_leak():
    ds = make_dataset(100)
    fit = crossfit_nuisances(ds, FAST, seed=1)
    fit.train_rows[(0, "mu1")] = np.arange(100)
    assert audit_crossfit(fit)


def test_cluster_folds_partition_clusters():
    ds = make_dataset(400)
    fit = crossfit_nuisances(ds, FAST, cluster_folds=True, seed=2)
    assert audit_crossfit(fit, ds.cluster) == []
    for c in np.unique(ds.cluster):
        assert len(np.unique(fit.fold_id[ds.cluster == c])) == 1


def test_random_treatment_gives_half_propensity():
    rng = np.random.default_rng(3)
    n = 5000
    X = rng.random((n, 3))
    d = (rng.random(n) < 0.5).astype(float)
    ds = Dataset(y=(rng.random(n) < 0.4).astype(float), d=d, X=X, x_names=["a", "b", "c"], z_names=[])
    fit = crossfit_nuisances(ds, ForestParams(n_trees=30, min_leaf=20), seed=4)
    assert abs(fit.p_hat.mean() - 0.5) < 0.03


def test_trimming_is_logged():
    ds = make_dataset(200)
    fit = crossfit_nuisances(ds, FAST, seed=0, trim=(0.45, 0.55))
    assert fit.trim_log["low"] + fit.trim_log["high"] > 0
    assert fit.p_hat.min() >= 0.45 and fit.p_hat.max() <= 0.55


def test_fold_seeds_are_reproducible():
    ds = make_dataset(200)
    a = crossfit_nuisances(ds, FAST, seed=5)
    b = crossfit_nuisances(ds, FAST, seed=5, n_jobs=2)
    assert a.fingerprint() == b.fingerprint()


def test_score_errors():
    ds = make_dataset(20)
    bad = NuisanceFit(np.zeros(20), np.zeros(20), np.ones(20), np.zeros(20, int), ds.d)
    with pytest.raises(NumericError):
        orthogonal_scores(ds, bad)
    with pytest.raises(DataError):
        crossfit_nuisances(ds, FAST, n_folds=1)


def _nuisance(p, d):
    n = len(p)
    return NuisanceFit(np.zeros(n), np.zeros(n), np.asarray(p, float), np.zeros(n, int), np.asarray(d, float))


def test_support_flags():
    d = np.repeat([1.0, 0.0], 100)
    assert not common_support(_nuisance(np.full(200, 0.5), d)).flag
    assert common_support(_nuisance(np.where(d == 1, 0.9, 0.1), d)).flag
    rng = np.random.default_rng(0)
    p = rng.uniform(0.3, 0.7, 5000)
    assert not common_support(_nuisance(p, (rng.random(5000) < p).astype(float))).flag


def test_scores_roundtrip(tmp_path):
    ds = make_dataset(60)
    fit = crossfit_nuisances(ds, FAST, seed=1)
    scores = orthogonal_scores(ds, fit)
    path = write_scores_csv(tmp_path / "s.csv", fit, scores)
    fit2, scores2 = read_scores_csv(path, ds.d)
    np.testing.assert_array_equal(scores2.y_star, scores.y_star)
    np.testing.assert_array_equal(fit2.p_hat, fit.p_hat)
    with pytest.raises(DataError):
        read_scores_csv(path, ds.d[:-1])


def test_naive_difference():
    ds = make_dataset(200)
    est = naive_difference(ds)
    assert est.estimate == pytest.approx(ds.y[ds.d == 1].mean() - ds.y[ds.d == 0].mean())
