"""Cross-fitted nuisance estimation, AIPW orthogonal scores and the ATE.

The three nuisance functions are the outcome means by arm, ``mu1(x)`` and
``mu0(x)``, and the propensity ``p(x)``.  Each is predicted for a fold by a
forest trained only on the other folds, so no observation contributes to the
model that predicts its own nuisance values.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .csvio import parse_float, read_rows, write_rows
from .dataset import Dataset
from .errors import DataError, NumericError
from .forest import ForestParams, cross_validate, fit_forest, predict

TRIM_BOUNDS = (0.01, 0.99)
NUISANCES = ("mu1", "mu0", "propensity")
SCORES_HEADER = ("row_id", "fold", "mu0_hat", "mu1_hat", "p_hat", "y_star")


@dataclass
class NuisanceFit:
    mu1_hat: np.ndarray
    mu0_hat: np.ndarray
    p_hat: np.ndarray
    fold_id: np.ndarray
    d: np.ndarray
    trim_log: dict = field(default_factory=lambda: {"low": 0, "high": 0})
    trim_bounds: tuple[float, float] = TRIM_BOUNDS
    p_raw: np.ndarray | None = None
    # (fold, nuisance) -> row indices the predicting forest was trained on
    train_rows: dict = field(default_factory=dict)
    tuned: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.p_hat)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.mu1_hat, self.mu0_hat, self.p_hat, self.fold_id):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


@dataclass
class ScoreVector:
    y_star: np.ndarray
    provenance: str = ""

    def __len__(self):
        return len(self.y_star)


@dataclass(frozen=True)
class EffectEstimate:
    estimate: float
    std_error: float
    t_value: float
    p_value: float
    ci_low: float
    ci_high: float
    level: float
    n: int


def inference(estimate: float, std_error: float, n: int, level: float = 0.90) -> EffectEstimate:
    """Normal-reference t, two-sided p and CI for a point estimate."""
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    if std_error > 0:
        t = estimate / std_error
        p = float(2 * stats.norm.sf(abs(t)))
    else:
        t = np.inf * np.sign(estimate) if estimate != 0 else np.nan
        p = 0.0 if estimate != 0 else 1.0
    half = float(stats.norm.ppf(0.5 + level / 2)) * std_error
    return EffectEstimate(float(estimate), float(std_error), float(t), p, estimate - half, estimate + half,
                          level, int(n))


def assign_folds(n: int, n_folds: int, seed: int, cluster: np.ndarray | None = None) -> np.ndarray:
    """Random partition into ``n_folds`` equal-sized folds, or whole clusters per fold."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF01D]))
    if cluster is None:
        fold = np.empty(n, dtype=np.int64)
        fold[rng.permutation(n)] = np.arange(n) % n_folds
        return fold
    uniq, inverse = np.unique(cluster, return_inverse=True)
    if len(uniq) < n_folds:
        raise DataError(f"{len(uniq)} clusters cannot fill {n_folds} folds")
    cluster_fold = np.empty(len(uniq), dtype=np.int64)
    cluster_fold[rng.permutation(len(uniq))] = np.arange(len(uniq)) % n_folds
    return cluster_fold[inverse]


def _fit_one(X, y, params: ForestParams | Sequence[ForestParams], seed: int, target: str, cv_folds: int,
             n_jobs: int):
    grid = [params] if isinstance(params, ForestParams) else list(params)
    grid = [replace(g, seed=seed) for g in grid]
    chosen = cross_validate(X, y, grid, k_folds=cv_folds, seed=seed, n_jobs=n_jobs) if len(grid) > 1 else grid[0]
    return fit_forest(X, y, chosen, training_target=target, n_jobs=n_jobs), chosen


def crossfit_nuisances(
    dataset: Dataset,
    learner: ForestParams | Sequence[ForestParams] = ForestParams(),
    n_folds: int = 2,
    cluster_folds: bool = False,
    seed: int = 0,
    trim: tuple[float, float] = TRIM_BOUNDS,
    cv_folds: int = 3,
    n_jobs: int = 1,
) -> NuisanceFit:
    """Estimate ``mu1``, ``mu0`` and ``p`` out of fold.

    For each fold, ``mu1`` is fit on the treated rows of the complement,
    ``mu0`` on its control rows and ``p`` on all of its rows with target ``d``.
    If ``learner`` is a sequence of parameter sets, each forest is tuned by
    ``cv_folds``-fold cross-validation on its training rows.  Propensities
    are clipped to ``trim`` and the clipped counts logged.
    """
    if n_folds < 2:
        raise DataError("n_folds must be >= 2")
    lo, hi = trim
    if not 0 < lo < hi < 1:
        raise DataError("trim bounds must satisfy 0 < low < high < 1")
    if cluster_folds and dataset.cluster is None:
        raise DataError("cluster_folds requested but the dataset has no cluster column")
    n = dataset.n
    X, y, d = dataset.X, dataset.y, dataset.d
    if X.shape[1] == 0:
        raise DataError("no confounders to fit nuisances on")
    fold = assign_folds(n, n_folds, seed, dataset.cluster if cluster_folds else None)

    mu1, mu0, p_raw = np.full(n, np.nan), np.full(n, np.nan), np.full(n, np.nan)
    train_rows, tuned = {}, {}
    for f in range(n_folds):
        test = np.flatnonzero(fold == f)
        train = np.flatnonzero(fold != f)
        d_test = d[test]
        if d_test.sum() == 0 or d_test.sum() == len(test):
            raise DataError(f"fold {f} lacks treated or control observations; re-seed or use more data")
        treated, control = train[d[train] == 1], train[d[train] == 0]
        if len(treated) == 0 or len(control) == 0:
            raise DataError(f"training complement of fold {f} has an empty treatment arm; re-seed or use more data")
        jobs = (("mu1", treated, y), ("mu0", control, y), ("propensity", train, d))
        for k, (name, rows, target) in enumerate(jobs):
            sub_seed = int(np.random.SeedSequence([seed, f, k]).generate_state(1, np.uint64)[0] >> np.uint64(1))
            model, chosen = _fit_one(X[rows], target[rows], learner, sub_seed, name, cv_folds, n_jobs)
            pred = predict(model, X[test])
            {"mu1": mu1, "mu0": mu0, "propensity": p_raw}[name][test] = pred
            train_rows[(f, name)] = rows
            tuned[(f, name)] = chosen

    p_hat = np.clip(p_raw, lo, hi)
    trim_log = {"low": int((p_raw < lo).sum()), "high": int((p_raw > hi).sum())}
    return NuisanceFit(mu1, mu0, p_hat, fold, d.copy(), trim_log, (lo, hi), p_raw, train_rows, tuned)


def audit_crossfit(nuisance: NuisanceFit, cluster: np.ndarray | None = None) -> list[str]:
    """Return a list of violations (empty when clean).

    Checks that no row lies in the training set of any forest that produced
    its predictions and, with ``cluster``, that no cluster spans two folds.
    """
    problems = []
    if not nuisance.train_rows:
        return ["no training-set record available (nuisances loaded from file?)"]
    for (f, name), rows in sorted(nuisance.train_rows.items()):
        predicted = np.flatnonzero(nuisance.fold_id == f)
        leak = np.intersect1d(predicted, rows)
        if len(leak):
            problems.append(f"fold {f} {name}: {len(leak)} rows predicted by a model trained on them")
    if cluster is not None:
        for c in np.unique(cluster):
            folds = np.unique(nuisance.fold_id[cluster == c])
            if len(folds) > 1:
                problems.append(f"cluster {c} appears in folds {folds.tolist()}")
    return problems


def aipw_scores(y, d, mu1, mu0, p) -> np.ndarray:
    y, d, mu1, mu0, p = (np.asarray(a, dtype=float) for a in (y, d, mu1, mu0, p))
    return mu1 - mu0 + d * (y - mu1) / p - (1 - d) * (y - mu0) / (1 - p)


def orthogonal_scores(dataset: Dataset, nuisance: NuisanceFit) -> ScoreVector:
    if nuisance.n != dataset.n:
        raise DataError(f"nuisance length {nuisance.n} does not match dataset size {dataset.n}")
    p = nuisance.p_hat
    if not np.all((p > 0) & (p < 1)):
        raise NumericError("propensity scores must lie strictly inside (0, 1)")
    y_star = aipw_scores(dataset.y, dataset.d, nuisance.mu1_hat, nuisance.mu0_hat, p)
    if not np.isfinite(y_star).all():
        raise NumericError("non-finite orthogonal score")
    h = hashlib.sha256((dataset.fingerprint() + nuisance.fingerprint()).encode()).hexdigest()
    return ScoreVector(y_star, h)


def _as_array(scores) -> np.ndarray:
    return np.asarray(scores.y_star if isinstance(scores, ScoreVector) else scores, dtype=float)


def ate(scores, level: float = 0.90, cluster=None) -> EffectEstimate:
    """Mean of the scores with SD/sqrt(n) (or CR1 cluster-robust) standard error."""
    y_star = _as_array(scores)
    n = len(y_star)
    if n < 2:
        raise DataError("ATE needs at least two scores")
    est = float(np.mean(y_star))
    if cluster is None:
        se = float(np.std(y_star, ddof=1) / np.sqrt(n))
    else:
        resid = y_star - est
        _, inv = np.unique(np.asarray(cluster), return_inverse=True)
        g = inv.max() + 1
        if g < 2:
            raise DataError("cluster-robust SE needs at least two clusters")
        sums = np.bincount(inv, weights=resid, minlength=g)
        se = float(np.sqrt(g / (g - 1) * np.sum(sums**2)) / n)
    return inference(est, se, n, level)


def naive_difference(dataset: Dataset, level: float = 0.90) -> EffectEstimate:
    """Unadjusted difference in outcome means between arms (Welch SE)."""
    t, c = dataset.y[dataset.d == 1], dataset.y[dataset.d == 0]
    se = float(np.sqrt(t.var(ddof=1) / len(t) + c.var(ddof=1) / len(c)))
    return inference(float(t.mean() - c.mean()), se, dataset.n, level)


@dataclass
class SupportReport:
    bin_edges: np.ndarray
    counts_treated: np.ndarray
    counts_control: np.ndarray
    min_treated: float
    max_treated: float
    min_control: float
    max_control: float
    share_outside: float
    flag: bool
    flagged_bins: list[int]

    def write_csv(self, path: str | Path) -> Path:
        rows = [
            (self.bin_edges[k], self.bin_edges[k + 1], self.counts_treated[k], self.counts_control[k],
             int(k in self.flagged_bins))
            for k in range(len(self.counts_treated))
        ]
        return write_rows(path, ("bin_low", "bin_high", "treated", "control", "flagged"), rows)

    def summary(self) -> dict:
        return {
            "min_treated": self.min_treated, "max_treated": self.max_treated,
            "min_control": self.min_control, "max_control": self.max_control,
            "share_outside_trim": self.share_outside, "support_concern": self.flag,
        }


def common_support(nuisance: NuisanceFit, bins: int = 20, min_mass: float = 0.01) -> SupportReport:
    """Histogram of propensities by arm on [0, 1].

    A bin holding at least ``min_mass`` of one arm but no observation of the
    other arm raises the support flag.
    """
    p = nuisance.p_raw if nuisance.p_raw is not None else nuisance.p_hat
    d = nuisance.d
    edges = np.linspace(0.0, 1.0, bins + 1)
    ct, _ = np.histogram(p[d == 1], edges)
    cc, _ = np.histogram(p[d == 0], edges)
    st, sc = ct / max(ct.sum(), 1), cc / max(cc.sum(), 1)
    flagged = [k for k in range(bins) if (st[k] >= min_mass and cc[k] == 0) or (sc[k] >= min_mass and ct[k] == 0)]
    lo, hi = nuisance.trim_bounds
    return SupportReport(
        edges, ct, cc, float(p[d == 1].min()), float(p[d == 1].max()), float(p[d == 0].min()),
        float(p[d == 0].max()), float(np.mean((p < lo) | (p > hi))), bool(flagged), flagged,
    )


def write_scores_csv(path: str | Path, nuisance: NuisanceFit, scores: ScoreVector) -> Path:
    rows = zip(range(nuisance.n), nuisance.fold_id, nuisance.mu0_hat, nuisance.mu1_hat, nuisance.p_hat,
               scores.y_star)
    return write_rows(path, SCORES_HEADER, rows)


def read_scores_csv(path: str | Path, d) -> tuple[NuisanceFit, ScoreVector]:
    """Load a scores file; ``d`` (the treatment vector) is supplied by the caller."""
    header, rows = read_rows(path)
    if tuple(header) != SCORES_HEADER:
        raise DataError(f"scores file header must be {','.join(SCORES_HEADER)}")
    arr = np.array([[parse_float(v) for v in r] for r in rows], dtype=float).reshape(-1, len(SCORES_HEADER))
    if not np.array_equal(arr[:, 0], np.arange(len(arr))):
        raise DataError("scores file rows must be ordered by row_id 0..n-1")
    d = np.asarray(d, dtype=float)
    if len(d) != len(arr):
        raise DataError(f"scores file has {len(arr)} rows, data has {len(d)}")
    nuisance = NuisanceFit(arr[:, 3], arr[:, 2], arr[:, 4], arr[:, 1].astype(np.int64), d)
    return nuisance, ScoreVector(arr[:, 5], hashlib.sha256(Path(path).read_bytes()).hexdigest())
