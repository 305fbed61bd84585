import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from contestdml.blp import (blp_fit, blp_iates, collinear_columns, gate_table, stars, base_gate_specs, home_pair_specs,
                            write_gate_table)
from contestdml.dml import ate
from contestdml.errors import DataError, RankDeficientError

from conftest import make_dataset


def _sandwich_oracle(y, X, cluster=None):
    """Textbook sandwich with explicit inverses, used as an independent check."""
    n, q = X.shape
    XtX_inv = np.linalg.inv(X.T @ X)
    beta = XtX_inv @ X.T @ y
    e = y - X @ beta
    if cluster is None:
        meat = (X * e[:, None] ** 2).T @ X
        return beta, n / (n - q) * XtX_inv @ meat @ XtX_inv
    G = len(np.unique(cluster))
    meat = np.zeros((q, q))
    for g in np.unique(cluster):
        s = X[cluster == g].T @ e[cluster == g]
        meat += np.outer(s, s)
    return beta, G / (G - 1) * (n - 1) / (n - q) * XtX_inv @ meat @ XtX_inv


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(["robust", "cluster"]))
def test_matches_sandwich_oracle(seed, se_type):
    rng = np.random.default_rng(seed)
    n = 80
    Z = rng.normal(size=(n, 2))
    y = 0.1 + Z @ [0.3, -0.2] + rng.normal(size=n)
    cl = rng.integers(0, 12, n)
    fit = blp_fit(y, Z, ["a", "b"], se_type, cl)
    beta, cov = _sandwich_oracle(y, np.column_stack([np.ones(n), Z]), cl if se_type == "cluster" else None)
    np.testing.assert_allclose(fit.coef, beta, atol=1e-10)
    np.testing.assert_allclose(fit.cov, cov, atol=1e-10)


def test_constant_only_is_mean():
    y = np.random.default_rng(0).normal(size=30)
    fit = blp_fit(y)
    assert fit["const"] == pytest.approx(y.mean(), abs=1e-12)
    np.testing.assert_allclose(blp_iates(fit, np.empty((5, 0))), y.mean(), atol=1e-12)


def test_saturated_binary_design_gives_group_means():
    rng = np.random.default_rng(1)
    home = (rng.random(200) < 0.3).astype(float)
    y = rng.normal(size=200)
    fit = blp_fit(y, home, ["home"])
    assert fit["const"] == pytest.approx(y[home == 0].mean(), abs=1e-12)
    assert fit["const"] + fit["home"] == pytest.approx(y[home == 1].mean(), abs=1e-12)
    assert set(np.round(blp_iates(fit, home), 12)) == {round(fit["const"], 12), round(fit["const"] + fit["home"], 12)}


def test_linear_effect_slope_recovered(generic_sim):
    # with the true nuisances the scores are unbiased for tau(x) = 0.05 + 0.1 x0
    sim = generic_sim
    ds = sim.dataset
    p = sim.extra["pi"]
    y_star = sim.p1 - sim.p0 + ds.d * (ds.y - sim.p1) / p - (1 - ds.d) * (ds.y - sim.p0) / (1 - p)
    fit = blp_fit(y_star, ds.column("x0"), ["x0"])
    assert abs(fit["x0"] - 0.1) < 2 * fit.se_of("x0")


def test_rank_deficiency():
    rng = np.random.default_rng(2)
    z = rng.random(50)
    with pytest.raises(RankDeficientError, match="b"):
        blp_fit(rng.random(50), np.column_stack([z, 2 * z]), ["a", "b"])
    fit = blp_fit(rng.random(50), np.column_stack([z, 2 * z]), ["a", "b"], drop_collinear=True)
    assert fit.dropped == ["b"] and fit.names == ["const", "a"]
    assert collinear_columns(np.column_stack([np.ones(50), np.ones(50)])) == [1]


def test_cluster_without_ids():
    with pytest.raises(DataError):
        blp_fit(np.arange(10.0), se_type="cluster")


def test_gate_table_layout(tmp_path):
    ds = make_dataset(300)
    y = np.random.default_rng(3).normal(size=300)
    specs = [("ATE", []), ("x1 only", ["x1"]), ("both", ["x0", "x1"])]
    fits = gate_table(y, ds, specs)
    assert [f.label for f in fits] == ["ATE", "x1 only", "both"]
    assert fits[0]["const"] == pytest.approx(ate(y).estimate, abs=1e-12)
    header = write_gate_table(tmp_path / "g.csv", fits).read_text().splitlines()[0].split(",")
    assert {"term", "estimate", "se", "t", "p"} <= set(header)


def test_orthogonal_column_keeps_intercept():
    n = 400
    y = np.tile([1.0, -1.0, 2.0, -2.0], n // 4)
    z = np.tile([1.0, 1.0, -1.0, -1.0], n // 4)  # mean zero, orthogonal to y
    assert blp_fit(y, z, ["z"])["const"] == pytest.approx(blp_fit(y)["const"], abs=1e-12)


def test_stars_and_specs():
    assert [stars(p) for p in (0.001, 0.03, 0.07, 0.2)] == ["***", "**", "*", ""]
    assert [s[0] for s in base_gate_specs("home", "cob", ["a"])] == ["ATE", "Home", "Country of birth", "All"]
    assert home_pair_specs("hi", "hj")[3][1] == ["hi", "hj"]
