"""Best linear predictors of the effects: OLS of the orthogonal scores on a
constant plus heterogeneity variables, with HC1 or CR1 standard errors."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import linalg, stats

from .csvio import write_rows
from .dataset import Dataset
from .errors import DataError, RankDeficientError

SE_TYPES = ("robust", "cluster")
RANK_TOL = 1e-10


@dataclass
class BlpFit:
    names: list[str]
    coef: np.ndarray
    cov: np.ndarray
    se_type: str
    n: int
    n_clusters: int | None = None
    dropped: list[str] = field(default_factory=list)
    label: str = ""

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0, None))

    @property
    def t(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.coef / self.se

    @property
    def p(self) -> np.ndarray:
        return 2 * stats.norm.sf(np.abs(self.t))

    def __getitem__(self, name: str) -> float:
        return float(self.coef[self.names.index(name)])

    def se_of(self, name: str) -> float:
        return float(self.se[self.names.index(name)])

    def rows(self):
        for k, name in enumerate(self.names):
            yield name, self.coef[k], self.se[k], self.t[k], self.p[k], stars(self.p[k])


def stars(p: float) -> str:
    if not np.isfinite(p):
        return ""
    return "***" if p < 0.01 else "**" if p < 0.05 else "*" if p < 0.10 else ""


def _design(Z, n: int) -> np.ndarray:
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z.reshape(-1, 1) if Z.size else np.empty((n, 0))
    if Z.shape[0] != n:
        raise DataError(f"design has {Z.shape[0]} rows, scores have {n}")
    return np.column_stack([np.ones(n), Z])


def collinear_columns(X: np.ndarray, tol: float = RANK_TOL) -> list[int]:
    """Indices of columns whose uncentred R^2 on the earlier kept columns exceeds 1 - tol."""
    bad, kept = [], []
    for k in range(X.shape[1]):
        col = X[:, k]
        ss = float(col @ col)
        if ss == 0:
            bad.append(k)
            continue
        if kept:
            Q, _ = np.linalg.qr(X[:, kept])
            resid = col - Q @ (Q.T @ col)
            r2 = 1 - float(resid @ resid) / ss
        else:
            r2 = 0.0
        (bad if r2 > 1 - tol else kept).append(k)
    return bad


def blp_fit(
    scores,
    Z=None,
    names: Sequence[str] = (),
    se_type: str = "robust",
    cluster=None,
    weights=None,
    drop_collinear: bool = False,
    label: str = "",
) -> BlpFit:
    """Regress the scores on ``(1, Z)``.

    ``robust`` gives HC1 errors (factor n/(n-q)); ``cluster`` gives CR1
    errors (factor G/(G-1) * (n-1)/(n-q)).  Collinear columns raise
    :class:`RankDeficientError` unless ``drop_collinear`` is set, in which
    case they are removed and listed in ``BlpFit.dropped``.  ``weights`` turns
    the fit into weighted least squares (used by the weighted bootstrap).
    """
    y = np.asarray(getattr(scores, "y_star", scores), dtype=float)
    n = len(y)
    X = _design(np.empty((n, 0)) if Z is None else Z, n)
    all_names = ["const", *names]
    if len(all_names) != X.shape[1]:
        raise DataError(f"{len(names)} names given for {X.shape[1] - 1} design columns")
    if se_type not in SE_TYPES:
        raise DataError(f"se_type must be one of {SE_TYPES}")
    if se_type == "cluster" and cluster is None:
        raise DataError("cluster-robust standard errors requested without cluster ids")

    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    sw = np.sqrt(w)
    bad = collinear_columns(X * sw[:, None])
    if bad:
        if not drop_collinear:
            raise RankDeficientError([all_names[k] for k in bad])
        keep = [k for k in range(X.shape[1]) if k not in bad]
        dropped = [all_names[k] for k in bad]
        X, all_names = X[:, keep], [all_names[k] for k in keep]
    else:
        dropped = []
    q = X.shape[1]
    if n <= q:
        raise DataError(f"n={n} too small for {q} coefficients")

    Q, R = np.linalg.qr(X * sw[:, None])
    coef = linalg.solve_triangular(R, Q.T @ (y * sw))
    Rinv = linalg.solve_triangular(R, np.eye(q))
    bread = Rinv @ Rinv.T
    resid = y - X @ coef
    u = X * (w * resid)[:, None]
    n_clusters = None
    if se_type == "robust":
        meat = u.T @ u
        factor = n / (n - q)
    else:
        _, inv = np.unique(np.asarray(cluster), return_inverse=True)
        n_clusters = int(inv.max()) + 1
        if n_clusters < 2:
            raise DataError("cluster-robust standard errors need at least two clusters")
        sums = np.zeros((n_clusters, q))
        np.add.at(sums, inv, u)
        meat = sums.T @ sums
        factor = n_clusters / (n_clusters - 1) * (n - 1) / (n - q)
    cov = factor * bread @ meat @ bread
    cov = (cov + cov.T) / 2
    return BlpFit(all_names, coef, cov, se_type, n, n_clusters, dropped, label)


def blp_iates(fit: BlpFit, Z) -> np.ndarray:
    """Fitted values ``(1, z) @ beta`` for new rows ``Z`` (columns as in the fit,
    dropped columns excluded)."""
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z.reshape(-1, 1) if len(fit.names) > 1 else Z.reshape(-1, 0)
    if Z.shape[1] != len(fit.names) - 1:
        raise DataError(f"expected {len(fit.names) - 1} columns, got {Z.shape[1]}")
    return _design(Z, Z.shape[0]) @ fit.coef


def gate_table(
    scores,
    dataset: Dataset,
    specs: Sequence[tuple[str, Sequence[str]]],
    se_type: str = "robust",
    drop_collinear: bool = False,
) -> list[BlpFit]:
    """Fit one BLP per ``(label, terms)`` entry, in request order; an empty
    ``terms`` list gives the constant-only (ATE) column."""
    cluster = dataset.cluster if se_type == "cluster" else None
    fits = []
    for label, terms in specs:
        terms = list(terms)
        fits.append(blp_fit(scores, dataset.columns(terms), terms, se_type, cluster,
                            drop_collinear=drop_collinear, label=label))
    return fits


def base_gate_specs(home: str, country: str, all_terms: Sequence[str]) -> list[tuple[str, list[str]]]:
    """Four GATE models: ATE, home, country of birth, all covariates."""
    return [("ATE", []), ("Home", [home]), ("Country of birth", [country]), ("All", list(all_terms))]


def home_pair_specs(home_i: str, home_j: str) -> list[tuple[str, list[str]]]:
    return [("ATE", []), ("Home (i)", [home_i]), ("Home (j)", [home_j]), ("Home (i & j)", [home_i, home_j])]


GATE_HEADER = ("model", "term", "estimate", "se", "t", "p", "stars", "n")


def write_gate_table(path: str | Path, fits: Sequence[BlpFit]) -> Path:
    rows = []
    for fit in fits:
        for name, b, se, t, p, s in fit.rows():
            rows.append((fit.label, name, b, se, t, p, s, fit.n))
    return write_rows(path, GATE_HEADER, rows)
