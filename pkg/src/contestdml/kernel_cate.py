"""Nadaraya-Watson regression of the orthogonal scores on one or two
heterogeneity variables, with a cross-validated, undersmoothed bandwidth
and pointwise normal confidence bands."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numba import njit
from scipy import stats

from .csvio import write_rows
from .errors import ConfigError, DataError

KERNELS = ("gaussian", "epanechnikov")
MIN_ESS = 10.0


@dataclass(frozen=True)
class KernelSpec:
    bandwidth: tuple[float, ...]  # cross-validated bandwidth, one per dimension
    kernel: str = "gaussian"
    undersmoothing: float = 0.9

    def __post_init__(self):
        bw = tuple(float(b) for b in np.atleast_1d(self.bandwidth))
        object.__setattr__(self, "bandwidth", bw)
        if self.kernel not in KERNELS:
            raise ConfigError(f"unknown kernel {self.kernel!r}")
        if not all(b > 0 for b in bw):
            raise ConfigError("bandwidth must be positive")
        if not 0 < self.undersmoothing <= 1:
            raise ConfigError("undersmoothing factor must lie in (0, 1]")

    @property
    def used_bandwidth(self) -> np.ndarray:
        return self.undersmoothing * np.asarray(self.bandwidth)


@dataclass
class CateCurve:
    grid: np.ndarray  # (m,) or (m, 2)
    theta: np.ndarray
    se: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    ess: np.ndarray
    available: np.ndarray
    bandwidth: np.ndarray
    level: float = 0.90

    HEADER_1D = ("z", "theta", "ci_low", "ci_high", "ess")

    def rows(self, group: str | None = None):
        grid = self.grid.reshape(len(self.theta), -1)
        for k in range(len(self.theta)):
            yield (*([group] if group is not None else []), *grid[k], self.theta[k], self.ci_low[k],
                   self.ci_high[k], self.ess[k])

    def header(self, group: bool = False) -> tuple[str, ...]:
        dim = self.grid.reshape(len(self.theta), -1).shape[1]
        zs = ("z",) if dim == 1 else tuple(f"z{k + 1}" for k in range(dim))
        return (*(("group",) if group else ()), *zs, "theta", "ci_low", "ci_high", "ess")

    def write_csv(self, path: str | Path) -> Path:
        return write_rows(path, self.header(), self.rows())


def _as_2d(z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    if z.ndim != 2 or z.shape[1] not in (1, 2):
        raise DataError("heterogeneity input must have one or two columns")
    return z


# Gaussian weights are cut at |u| = 9, where they fall below 3e-18 of the peak.
GAUSS_CUTOFF = 9.0


@njit(cache=True, fastmath=False)
def _nw_sorted(y, z, e, inv_h, gaussian):
    """Kernel sums for evaluation points ``e`` against training points ``z``
    sorted by their first column.  Only the window ``|u_1| <= cutoff`` is
    visited.  ``y`` is expected to be centred, which keeps the one-pass
    residual sum well conditioned."""
    m, dim = e.shape
    cut = GAUSS_CUTOFF if gaussian else 1.0
    out = np.zeros((m, 4))  # sum w, sum w^2, sum w y, sum w y^2
    for i in range(m):
        lo = np.searchsorted(z[:, 0], e[i, 0] - cut / inv_h[0], side="left")
        hi = np.searchsorted(z[:, 0], e[i, 0] + cut / inv_h[0], side="right")
        sw = 0.0
        sw2 = 0.0
        swy = 0.0
        swyy = 0.0
        for j in range(lo, hi):
            w = 1.0
            for k in range(dim):
                u = (e[i, k] - z[j, k]) * inv_h[k]
                if gaussian:
                    w *= np.exp(-0.5 * u * u) if abs(u) <= cut else 0.0
                else:
                    w *= 0.75 * (1.0 - u * u) if abs(u) < 1.0 else 0.0
            sw += w
            sw2 += w * w
            swy += w * y[j]
            swyy += w * y[j] * y[j]
        out[i, 0] = sw
        out[i, 1] = sw2
        out[i, 2] = swy
        out[i, 3] = swyy
    return out


def _nw(y: np.ndarray, z_train: np.ndarray, z_eval: np.ndarray, h: np.ndarray, kernel: str):
    """Returns (theta, sum w, sum w^2, sum w (y - theta)^2) per evaluation point."""
    order = np.argsort(z_train[:, 0], kind="stable")
    center = float(np.mean(y)) if len(y) else 0.0
    out = _nw_sorted(np.ascontiguousarray(y[order] - center, dtype=float), np.ascontiguousarray(z_train[order]),
                     np.ascontiguousarray(z_eval, dtype=float), 1.0 / np.asarray(h, dtype=float),
                     kernel == "gaussian")
    sw, sw2, swy, swyy = out.T
    with np.errstate(invalid="ignore", divide="ignore"):
        dev = swy / sw
        swr = np.maximum(swyy - dev * swy, 0.0)
    theta = np.where(sw > 0, center + dev, np.nan)
    return theta, sw, sw2, swr


def default_bandwidth_grid(z, size: int = 15, low: float = 0.1, high: float = 4.0) -> list[tuple[float, ...]]:
    """Multiples of a rule-of-thumb bandwidth ``sd * n^(-1/5)``, per dimension."""
    z = _as_2d(z)
    sd = z.std(axis=0, ddof=1)
    if not np.all(sd > 0):
        raise DataError("heterogeneity variable has zero variance")
    base = sd * len(z) ** (-1 / 5)
    return [tuple(float(v) for v in c * base) for c in np.geomspace(low, high, size)]


def cv_bandwidth(scores, z, kernel: str = "gaussian", grid: Sequence | None = None, k_folds: int = 5,
                 seed: int = 0) -> tuple[float, ...]:
    """Bandwidth minimising the k-fold out-of-fold squared error of the kernel
    regression of the scores on ``z``; ties (1e-12 relative to the mean squared score) go to the smaller
    bandwidth.  Held-out points with no kernel mass are predicted by the
    training mean."""
    y = np.asarray(getattr(scores, "y_star", scores), dtype=float)
    z = _as_2d(z)
    dim = z.shape[1]
    if np.any(z.std(axis=0) == 0):
        raise DataError("heterogeneity variable has zero variance")
    if kernel not in KERNELS:
        raise ConfigError(f"unknown kernel {kernel!r}")
    grid = default_bandwidth_grid(z) if grid is None else list(grid)
    if not grid:
        raise ConfigError("empty bandwidth grid")
    hs = [np.broadcast_to(np.asarray(h, dtype=float), (dim,)).copy() for h in grid]
    if any(np.any(h <= 0) for h in hs):
        raise ConfigError("bandwidths must be positive")
    if len(hs) == 1:
        return tuple(hs[0])
    n = len(y)
    if n < k_folds:
        raise DataError(f"n={n} smaller than k_folds={k_folds}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB0D]))
    folds = np.empty(n, dtype=np.int64)
    folds[rng.permutation(n)] = np.arange(n) % k_folds
    errors = np.zeros(len(hs))
    for f in range(k_folds):
        test, train = folds == f, folds != f
        for j, h in enumerate(hs):
            theta, sw, _, _ = _nw(y[train], z[train], z[test], h, kernel)
            theta = np.where(sw > 0, theta, y[train].mean())
            errors[j] += np.sum((y[test] - theta) ** 2)
    errors /= n
    # relative ties, measured against the scale of the scores so that
    # round-off around an exact fit does not decide
    best = errors.min()
    scale = max(abs(best), float(np.mean(y * y)), 1e-300)
    tied = [j for j in range(len(hs)) if errors[j] - best <= 1e-12 * scale]
    j = min(tied, key=lambda k: (float(np.prod(hs[k])), k))
    return tuple(float(v) for v in hs[j])


def kernel_cate(scores, z, spec: KernelSpec, grid, level: float = 0.90, min_ess: float = MIN_ESS) -> CateCurve:
    """Evaluate the kernel-weighted mean of the scores at each grid point.

    Uses bandwidth ``spec.undersmoothing * spec.bandwidth``.  The pointwise
    variance is ``sigma2(z) * sum w^2 / (sum w)^2`` with ``sigma2(z)`` the
    kernel-weighted residual variance.  Grid points whose effective sample
    size ``(sum w)^2 / sum w^2`` falls below ``min_ess`` are left unavailable
    (NaN) instead of being extrapolated.
    """
    y = np.asarray(getattr(scores, "y_star", scores), dtype=float)
    z = _as_2d(z)
    if len(z) != len(y):
        raise DataError("scores and z have different lengths")
    g = np.asarray(grid, dtype=float)
    g2 = g[:, None] if g.ndim == 1 else g
    if g2.shape[1] != z.shape[1]:
        raise DataError("grid dimension does not match z")
    if z.shape[1] == 1 and len(g2) > 1 and not np.all(np.diff(g2[:, 0]) > 0):
        raise DataError("evaluation grid must be strictly increasing")
    h = spec.used_bandwidth
    if len(h) == 1 and z.shape[1] == 2:
        h = np.repeat(h, 2)
    if len(h) != z.shape[1]:
        raise ConfigError("bandwidth dimension does not match z")
    theta, sw, sw2, swr = _nw(y, z, g2, h, spec.kernel)
    with np.errstate(invalid="ignore", divide="ignore"):
        ess = np.where(sw2 > 0, sw * sw / sw2, 0.0)
        sigma2 = swr / sw
        se = np.sqrt(sigma2 * sw2) / sw
    available = (sw > 0) & (ess >= min_ess)
    theta = np.where(available, theta, np.nan)
    se = np.where(available, se, np.nan)
    crit = stats.norm.ppf(0.5 + level / 2)
    return CateCurve(g, theta, se, theta - crit * se, theta + crit * se, ess, available, h, level)


def gate_curve_by_group(scores, z, group, grid, kernel: str = "gaussian", bandwidth=None,
                        undersmoothing: float = 0.9, level: float = 0.90, min_ess: float = MIN_ESS,
                        bandwidth_grid: Sequence | None = None, k_folds: int = 5,
                        seed: int = 0) -> tuple[CateCurve, CateCurve]:
    """Kernel GATE curves computed separately for ``group == 0`` and ``group == 1``
    on a common grid; bandwidths are cross-validated within each group."""
    y = np.asarray(getattr(scores, "y_star", scores), dtype=float)
    z = _as_2d(z)
    group = np.asarray(group)
    if not np.isin(group, (0, 1)).all():
        raise DataError("group must be binary")
    curves = []
    for value in (0, 1):
        m = group == value
        if m.sum() == 0:
            raise DataError(f"group {value} is empty; its curve is unavailable")
        h = bandwidth if bandwidth is not None else cv_bandwidth(y[m], z[m], kernel, bandwidth_grid, k_folds, seed)
        curve = kernel_cate(y[m], z[m], KernelSpec(h, kernel, undersmoothing), grid, level, min_ess)
        if not curve.available.any():
            raise DataError(f"group {value} has too little kernel mass anywhere on the grid")
        curves.append(curve)
    return curves[0], curves[1]


def write_group_curves(path: str | Path, curves: dict[str, CateCurve]) -> Path:
    first = next(iter(curves.values()))
    rows = [row for label, c in curves.items() for row in c.rows(label)]
    return write_rows(path, first.header(group=True), rows)
