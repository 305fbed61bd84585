"""Sorted effects with weighted-bootstrap uniform bands, and classification
analysis (CLAN) of the most and least affected groups.

Both use the multiplier bootstrap with i.i.d. standard-exponential weights.
Replicate ``b`` draws its weights from ``SeedSequence([seed, b])`` so the
result does not depend on the order in which replicates are computed.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .csvio import write_rows
from .errors import ConfigError, DataError, NumericError

DEFAULT_U_GRID = np.round(np.arange(1, 100) / 100, 2)


def bootstrap_weights(n: int, seed: int, b: int, scheme: str = "exponential") -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, b]))
    if scheme == "exponential":
        return rng.standard_exponential(n)
    if scheme == "multinomial":
        return rng.multinomial(n, np.full(n, 1 / n)).astype(float)
    raise ConfigError(f"unknown bootstrap scheme {scheme!r}")


def weighted_quantile(values: np.ndarray, weights: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Interpolated weighted quantile; with equal weights it coincides with
    numpy's default (linear) quantile."""
    order = np.argsort(values, kind="stable")
    v, w = values[order], weights[order]
    keep = w > 0
    v, w = v[keep], w[keep]
    if len(v) == 1:
        return np.full(len(u), v[0])
    cw = np.cumsum(w)
    pos = (cw - w) / (cw[-1] - w[-1])
    return np.interp(u, pos, v)


@dataclass
class SortedCurve:
    u: np.ndarray
    theta: np.ndarray  # bias-corrected, monotone
    theta_raw: np.ndarray  # sorted IATEs before bias correction
    ci_low: np.ndarray
    ci_high: np.ndarray
    critical_value: float
    B: int
    level: float

    def write_csv(self, path: str | Path) -> Path:
        return write_rows(path, ("u", "theta", "ci_low", "ci_high"),
                          zip(self.u, self.theta, self.ci_low, self.ci_high))


def sorted_effects(
    iate_fn: Callable[[np.ndarray | None], np.ndarray],
    n_obs: int,
    B: int = 999,
    level: float = 0.90,
    seed: int = 0,
    u_grid: Sequence[float] | None = None,
    scheme: str = "exponential",
) -> SortedCurve:
    """Sorted individualized effects with bias correction and sup-t bands.

    ``iate_fn(weights)`` re-estimates the IATE vector with observation weights
    (``None`` means unit weights).  Replicate curves are weighted quantiles of
    the replicate IATEs.  The corrected curve is ``2 * main - mean(replicates)``
    and the band half-width at ``u`` is ``c * s(u)``, where ``s`` is the
    bootstrap standard deviation and ``c`` the ``level`` quantile of
    ``max_u |replicate(u) - main(u)| / s(u)``.  Point and band are then
    monotonically rearranged.
    """
    if B < 100:
        raise ConfigError("sorted effects need B >= 100 bootstrap replications")
    u = DEFAULT_U_GRID if u_grid is None else np.asarray(u_grid, dtype=float)
    iates = np.asarray(iate_fn(None), dtype=float)
    if len(iates) != n_obs or not np.isfinite(iates).all():
        raise NumericError("main IATE vector is non-finite or has the wrong length")
    main = np.quantile(iates, u)
    reps = np.empty((B, len(u)))
    for b in range(B):
        w = bootstrap_weights(n_obs, seed, b, scheme)
        rep = np.asarray(iate_fn(w), dtype=float)
        if not np.isfinite(rep).all():
            raise NumericError(f"non-finite IATE in bootstrap replicate {b}")
        reps[b] = weighted_quantile(rep, w, u)
    corrected = main - (reps - main).mean(axis=0)
    s = reps.std(axis=0, ddof=1)
    dev = np.abs(reps - main)
    with np.errstate(divide="ignore", invalid="ignore"):
        tstat = np.where(s > 0, dev / s, 0.0)
    crit = float(np.quantile(tstat.max(axis=1), level))
    lo, hi = corrected - crit * s, corrected + crit * s
    return SortedCurve(u, np.sort(corrected), main, np.sort(lo), np.sort(hi), crit, B, level)


@dataclass
class ClanRow:
    name: str
    estimate: float  # bias-corrected difference most - least affected
    raw_estimate: float
    std_error: float
    p_value: float
    joint_p_value: float
    mean_most: float
    mean_least: float


@dataclass
class ClanTable:
    rows: list[ClanRow]
    q: float
    B: int
    n_group: int

    HEADER = ("characteristic", "estimate", "se", "joint_p_value", "p_value", "raw_estimate", "mean_most",
              "mean_least")

    def __getitem__(self, name: str) -> ClanRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def write_csv(self, path: str | Path) -> Path:
        return write_rows(path, self.HEADER, [
            (r.name, r.estimate, r.std_error, r.joint_p_value, r.p_value, r.raw_estimate, r.mean_most,
             r.mean_least) for r in self.rows])


def _group_masks(iates: np.ndarray, weights: np.ndarray, q: float):
    """Most/least affected rows by cumulative weight share from either tail.
    With unit weights these are exactly the top and bottom floor(q n) rows."""
    order = np.argsort(iates, kind="stable")
    w = weights[order]
    total = w.sum()
    share_low = np.cumsum(w) / total
    share_high = np.cumsum(w[::-1])[::-1] / total
    eps = 1e-12
    least = np.zeros(len(iates), bool)
    most = np.zeros(len(iates), bool)
    least[order[share_low <= q + eps]] = True
    most[order[share_high <= q + eps]] = True
    return most, least


def _diff(chars: np.ndarray, w: np.ndarray, most: np.ndarray, least: np.ndarray):
    wm, wl = w * most, w * least
    if wm.sum() <= 0 or wl.sum() <= 0:
        return None
    mean_most = wm @ chars / wm.sum()
    mean_least = wl @ chars / wl.sum()
    return mean_most - mean_least, mean_most, mean_least


def clan(
    iates,
    characteristics,
    names: Sequence[str] | None = None,
    q: float = 0.10,
    B: int = 999,
    seed: int = 0,
    iate_fn: Callable[[np.ndarray | None], np.ndarray] | None = None,
    scheme: str = "exponential",
) -> ClanTable:
    """Difference in characteristic means, most minus least affected.

    Standard errors come from the weighted bootstrap; each replicate recomputes
    group membership (by weighted tail share) and weighted means.  By default
    the IATEs are held fixed; pass ``iate_fn`` to re-estimate them per replicate.
    Pointwise p-values compare ``|t_k|`` with the bootstrap distribution of
    ``|t*_k|``; joint p-values compare it with ``max_k |t*_k|``, so joint is
    never below pointwise.  Characteristics with zero variance get p = 1.
    """
    iates = np.asarray(iates, dtype=float)
    chars = np.asarray(characteristics, dtype=float)
    if chars.ndim == 1:
        chars = chars[:, None]
    n, k = chars.shape
    if k == 0:
        raise DataError("CLAN needs at least one characteristic")
    if len(iates) != n:
        raise DataError("IATEs and characteristics have different lengths")
    if not 0 < q <= 0.5:
        raise ConfigError("q must lie in (0, 0.5]")
    n_group = int(np.floor(q * n))
    if n_group < 2:
        raise DataError(f"floor(q n) = {n_group} < 2")
    names = list(names) if names is not None else [f"c{j}" for j in range(k)]
    ones = np.ones(n)
    most, least = _group_masks(iates, ones, q)
    est, mean_most, mean_least = _diff(chars, ones, most, least)

    reps = np.full((B, k), np.nan)
    for b in range(B):
        w = bootstrap_weights(n, seed, b, scheme)
        rep_iates = iates if iate_fn is None else np.asarray(iate_fn(w), dtype=float)
        m_b, l_b = _group_masks(rep_iates, w, q)
        out = _diff(chars, w, m_b, l_b)
        if out is not None:
            reps[b] = out[0]
    reps = reps[~np.isnan(reps).any(axis=1)]
    corrected = est - (reps - est).mean(axis=0)
    se = reps.std(axis=0, ddof=1)
    degenerate = chars.std(axis=0) == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        t_obs = np.where(se > 0, np.abs(est) / se, 0.0)
        t_rep = np.where(se > 0, np.abs(reps - est) / se, 0.0)
    t_rep[:, degenerate] = 0.0
    t_max = t_rep.max(axis=1)
    rows = []
    for j in range(k):
        if degenerate[j] or se[j] == 0:
            p, pj = 1.0, 1.0
        else:
            p = float(np.mean(t_rep[:, j] >= t_obs[j]))
            pj = float(np.mean(t_max >= t_obs[j]))
        rows.append(ClanRow(names[j], 0.0 if degenerate[j] else float(corrected[j]), float(est[j]),
                            float(se[j]), p, pj, float(mean_most[j]), float(mean_least[j])))
    return ClanTable(rows, q, len(reps), n_group)
