import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from contestdml.errors import ConfigError, DataError
from contestdml.kernel_cate import (KernelSpec, cv_bandwidth, default_bandwidth_grid, gate_curve_by_group,
                                    kernel_cate, write_group_curves)


def test_two_point_hand_value():
    # used bandwidth 0.5: weights at z=0 are {1, exp(-2)}
    spec = KernelSpec(0.5, "gaussian", undersmoothing=1.0)
    curve = kernel_cate(np.array([0.0, 1.0]), np.array([0.0, 1.0]), spec, np.array([0.0]), min_ess=1)
    w = math.exp(-2)
    assert curve.theta[0] == pytest.approx(w / (1 + w), abs=1e-12)
    assert curve.theta[0] == pytest.approx(0.1192, abs=1e-4)


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.sampled_from(["gaussian", "epanechnikov"]))
def test_constant_scores(c, kernel):
    rng = np.random.default_rng(0)
    z = rng.random(300)
    curve = kernel_cate(np.full(300, c), z, KernelSpec(0.2, kernel), np.linspace(0.1, 0.9, 9))
    np.testing.assert_allclose(curve.theta, c, atol=1e-12)


def test_huge_bandwidth_gives_mean():
    rng = np.random.default_rng(1)
    y, z = rng.normal(size=500), rng.random(500)
    curve = kernel_cate(y, z, KernelSpec(1e8), np.linspace(0, 1, 5))
    np.testing.assert_allclose(curve.theta, y.mean(), atol=1e-10)


def test_nw_matches_direct_formula_2d():
    rng = np.random.default_rng(2)
    y, z = rng.normal(size=200), rng.random((200, 2))
    h = np.array([0.3, 0.2])
    grid = np.array([[0.5, 0.5], [0.2, 0.8]])
    curve = kernel_cate(y, z, KernelSpec(tuple(h), undersmoothing=1.0), grid)
    for g, theta in zip(grid, curve.theta):
        w = np.exp(-0.5 * (((z - g) / h) ** 2).sum(axis=1))
        assert theta == pytest.approx(w @ y / w.sum(), abs=1e-12)


def test_cv_constant_scores_pick_smallest():
    z = np.random.default_rng(3).random(200)
    grid = [(0.4,), (0.1,), (0.2,)]
    assert cv_bandwidth(np.ones(200), z, grid=grid) == (0.1,)
    assert cv_bandwidth(np.ones(200), z, grid=[(0.3,)]) == (0.3,)


def test_cv_step_function_prefers_narrow_bandwidth():
    rng = np.random.default_rng(4)
    z = rng.random(5000)
    y = np.where(z > 0.5, 1.0, 0.0)
    grid = [(h,) for h in (0.01, 0.03, 0.1, 0.3, 1.0)]
    h = cv_bandwidth(y, z, grid=grid, seed=1)
    assert h[0] < 0.5


def test_sparse_region_is_unavailable():
    z = np.concatenate([np.random.default_rng(5).random(200), [5.0]])
    curve = kernel_cate(np.ones(201), z, KernelSpec(0.05), np.array([0.5, 5.0]))
    assert curve.available.tolist() == [True, False]
    assert math.isnan(curve.theta[1])


def test_ci_uses_level():
    rng = np.random.default_rng(6)
    y, z = rng.normal(size=1000), rng.random(1000)
    a = kernel_cate(y, z, KernelSpec(0.2), np.array([0.5]), level=0.90)
    b = kernel_cate(y, z, KernelSpec(0.2), np.array([0.5]), level=0.95)
    assert (b.ci_high - b.ci_low)[0] > (a.ci_high - a.ci_low)[0]
    assert a.ci_low[0] < a.theta[0] < a.ci_high[0]


def test_groups():
    rng = np.random.default_rng(7)
    z = rng.random(600)
    y = rng.normal(size=600)
    g = np.tile([0, 1], 300)
    zz, yy = np.concatenate([z, z]), np.concatenate([y, y])
    a, b = gate_curve_by_group(yy, zz, np.repeat([0, 1], 600), np.linspace(0.1, 0.9, 5), bandwidth=0.2)
    np.testing.assert_array_equal(a.theta, b.theta)
    with pytest.raises(DataError, match="group 0"):
        gate_curve_by_group(y, z, np.ones(600), np.linspace(0.1, 0.9, 5), bandwidth=0.2)
    with pytest.raises(DataError):
        gate_curve_by_group(y, z, g * 2, np.linspace(0.1, 0.9, 5), bandwidth=0.2)


def test_group_gap_recovered_with_oracle_scores():
    rng = np.random.default_rng(8)
    n = 20_000
    z = rng.random(n)
    home = (rng.random(n) < 0.5).astype(int)
    tau = np.where(home == 1, 0.5, 1.0) * (0.05 + 0.1 * z)
    y = tau + rng.normal(0, 0.3, n)
    grid = np.linspace(0.2, 0.8, 7)
    away, at_home = gate_curve_by_group(y, z, home, grid, seed=1, bandwidth_grid=[(h,) for h in (0.03, 0.06, 0.12, 0.25)])
    gap = away.theta - at_home.theta
    se = np.sqrt(away.se**2 + at_home.se**2)
    truth = 0.5 * (0.05 + 0.1 * grid)
    assert np.all(np.abs(gap - truth) < 2.6 * se)


def test_write_and_errors(tmp_path):
    rng = np.random.default_rng(9)
    y, z = rng.normal(size=100), rng.random(100)
    curve = kernel_cate(y, z, KernelSpec(0.3), np.linspace(0.2, 0.8, 4))
    assert curve.write_csv(tmp_path / "c.csv").read_text().startswith("z,theta,ci_low,ci_high,ess\n")
    text = write_group_curves(tmp_path / "g.csv", {"a": curve, "b": curve}).read_text()
    assert text.splitlines()[0] == "group,z,theta,ci_low,ci_high,ess"
    with pytest.raises(DataError):
        kernel_cate(y, z, KernelSpec(0.3), np.array([0.5, 0.2]))
    with pytest.raises(ConfigError):
        KernelSpec(0.3, "box")
    with pytest.raises(DataError):
        default_bandwidth_grid(np.ones(10))
