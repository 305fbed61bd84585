"""Random-forest regression written from scratch.

Trees are grown by exact CART: at every node a random subset of features is
scanned, candidate thresholds are the midpoints between consecutive distinct
sorted values, and the split minimising the children's summed squared error
is taken.  Growth stops when a node is pure or no split leaves both children
with at least ``min_leaf`` rows.

All randomness for tree ``t`` is derived from ``(seed, t)`` so a forest is
bit-identical whatever the number of worker threads.
"""
from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from numba import njit

from .errors import ConfigError, DataError

DEFAULT_MIN_LEAF_GRID = (2, 5, 10, 20)


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 1000
    subsample_fraction: float = 0.5
    features_per_split: int | None = None  # None -> ceil(sqrt(p))
    min_leaf: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ConfigError("n_trees must be >= 1")
        if not 0 < self.subsample_fraction <= 1:
            raise ConfigError("subsample_fraction must lie in (0, 1]")
        if self.min_leaf < 1:
            raise ConfigError("min_leaf must be >= 1")
        if self.features_per_split is not None and self.features_per_split < 1:
            raise ConfigError("features_per_split must be >= 1")

    def resolve_mtry(self, p: int) -> int:
        m = self.features_per_split if self.features_per_split is not None else math.ceil(math.sqrt(p))
        if m > p:
            raise ConfigError(f"features_per_split={m} exceeds the {p} available features")
        return m


def min_leaf_grid(base: ForestParams, values: Sequence[int] = DEFAULT_MIN_LEAF_GRID) -> list[ForestParams]:
    return [replace(base, min_leaf=int(v)) for v in values]


@dataclass(frozen=True)
class Tree:
    """Flat array representation; ``feature[k] == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_node: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def is_leaf(self, k: int) -> bool:
        return self.feature[k] < 0


@dataclass
class ForestModel:
    trees: list[Tree]
    params: ForestParams
    feature_names: list[str]
    training_target: str = "generic"
    n_features: int = 0
    _flat: tuple = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.trees) != self.params.n_trees:
            raise ValueError("number of trees does not match params.n_trees")
        offsets = np.cumsum([0] + [t.n_nodes for t in self.trees])
        feat = np.concatenate([t.feature for t in self.trees])
        thr = np.concatenate([t.threshold for t in self.trees])
        left = np.concatenate([t.left + o for t, o in zip(self.trees, offsets)])
        right = np.concatenate([t.right + o for t, o in zip(self.trees, offsets)])
        value = np.concatenate([t.value for t in self.trees])
        self._flat = (feat, thr, left, right, value, offsets[:-1].astype(np.int64))


# --- numba kernels -----------------------------------------------------------

_M1 = np.uint64(0x9E3779B97F4A7C15)
_M2 = np.uint64(0xBF58476D1CE4E5B9)
_M3 = np.uint64(0x94D049BB133111EB)


@njit(cache=True)
def _next_u64(state):
    # splitmix64
    state[0] = state[0] + _M1
    z = state[0]
    z = (z ^ (z >> np.uint64(30))) * _M2
    z = (z ^ (z >> np.uint64(27))) * _M3
    return z ^ (z >> np.uint64(31))


@njit(cache=True, nogil=True)
def _grow_tree(X, y, sample, min_leaf, mtry, seed):
    n = sample.size
    p = X.shape[1]
    cap = 2 * n + 1
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    value = np.zeros(cap)
    count = np.zeros(cap, np.int64)

    idx = sample.copy()
    st_node = np.empty(cap, np.int64)
    st_lo = np.empty(cap, np.int64)
    st_hi = np.empty(cap, np.int64)
    order = np.arange(p)
    xs = np.empty(n)
    state = np.empty(1, np.uint64)
    state[0] = np.uint64(seed)

    top = 1
    st_node[0] = 0
    st_lo[0] = 0
    st_hi[0] = n
    n_nodes = 1
    while top > 0:
        top -= 1
        node = st_node[top]
        lo = st_lo[top]
        hi = st_hi[top]
        m = hi - lo
        s = 0.0
        ymin = y[idx[lo]]
        ymax = ymin
        for t in range(lo, hi):
            v = y[idx[t]]
            s += v
            if v < ymin:
                ymin = v
            if v > ymax:
                ymax = v
        count[node] = m
        if ymin == ymax:
            value[node] = ymin
            continue
        mean = s / m
        value[node] = min(max(mean, ymin), ymax)
        if m < 2 * min_leaf:
            continue

        for k in range(p - 1, 0, -1):
            j = np.int64(_next_u64(state) % np.uint64(k + 1))
            tmp = order[k]
            order[k] = order[j]
            order[j] = tmp

        best_gain = -np.inf
        best_f = -1
        best_thr = 0.0
        used = 0
        for k in range(p):
            if used >= mtry:
                break
            f = order[k]
            for t in range(m):
                xs[t] = X[idx[lo + t], f]
            perm = np.argsort(xs[:m])
            sl = 0.0
            found = False
            for t in range(m - 1):
                sl += y[idx[lo + perm[t]]]
                nl = t + 1
                if nl < min_leaf:
                    continue
                if m - nl < min_leaf:
                    break
                a = xs[perm[t]]
                b = xs[perm[t + 1]]
                if a < b:
                    found = True
                    sr = s - sl
                    gain = sl * sl / nl + sr * sr / (m - nl)
                    if gain > best_gain:
                        best_gain = gain
                        best_f = f
                        mid = 0.5 * (a + b)
                        best_thr = mid if (mid >= a and mid < b) else a
            if found:
                used += 1
        if best_f < 0:
            continue

        # partition idx[lo:hi] in place: rows with x <= thr first
        i = lo
        j = hi - 1
        while i <= j:
            if X[idx[i], best_f] <= best_thr:
                i += 1
            else:
                tmp = idx[i]
                idx[i] = idx[j]
                idx[j] = tmp
                j -= 1
        feature[node] = best_f
        threshold[node] = best_thr
        left[node] = n_nodes
        right[node] = n_nodes + 1
        st_node[top] = n_nodes
        st_lo[top] = lo
        st_hi[top] = i
        top += 1
        st_node[top] = n_nodes + 1
        st_lo[top] = i
        st_hi[top] = hi
        top += 1
        n_nodes += 2

    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), value[:n_nodes].copy(), count[:n_nodes].copy())


@njit(cache=True, nogil=True)
def _predict_flat(X, feature, threshold, left, right, value, roots, out):
    n_trees = roots.size
    for i in range(X.shape[0]):
        acc = 0.0
        lo = np.inf
        hi = -np.inf
        for t in range(n_trees):
            node = roots[t]
            while feature[node] >= 0:
                if X[i, feature[node]] <= threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            v = value[node]
            acc += v
            if v < lo:
                lo = v
            if v > hi:
                hi = v
        # the mean of leaf values lies in [lo, hi]; clamping removes rounding drift
        out[i] = min(max(acc / n_trees, lo), hi)


# --- public API --------------------------------------------------------------

def _tree_seeds(seed: int, tree_index: int, n: int, k: int) -> tuple[np.ndarray, int]:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**63 - 1), tree_index]))
    sample = np.sort(rng.choice(n, size=k, replace=False)) if k < n else np.arange(n)
    return sample.astype(np.int64), int(rng.integers(1, 2**63 - 1))


def fit_forest(
    X,
    y,
    params: ForestParams = ForestParams(),
    feature_names: Sequence[str] | None = None,
    training_target: str = "generic",
    n_jobs: int = 1,
) -> ForestModel:
    X = np.ascontiguousarray(np.asarray(X, dtype=float))
    y = np.ascontiguousarray(np.asarray(y, dtype=float))
    if X.ndim != 2:
        raise DataError("X must be a 2-D matrix")
    n, p = X.shape
    if n == 0 or p == 0:
        raise DataError("empty data")
    if len(y) != n:
        raise DataError("X and y have different numbers of rows")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise DataError("missing or non-finite values in forest input")
    if np.ptp(y) == 0:
        warnings.warn(f"constant {training_target} target: every leaf predicts {y[0]!r}", stacklevel=2)
    mtry = params.resolve_mtry(p)
    k = max(1, int(math.floor(params.subsample_fraction * n)))

    def grow(t: int) -> Tree:
        sample, tree_seed = _tree_seeds(params.seed, t, n, k)
        return Tree(*_grow_tree(X, y, sample, params.min_leaf, mtry, tree_seed))

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            trees = list(pool.map(grow, range(params.n_trees)))
    else:
        trees = [grow(t) for t in range(params.n_trees)]
    names = list(feature_names) if feature_names is not None else [f"x{j}" for j in range(p)]
    return ForestModel(trees, params, names, training_target, n_features=p)


def predict(model: ForestModel, X) -> np.ndarray:
    X = np.ascontiguousarray(np.asarray(X, dtype=float))
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.shape[1] != model.n_features:
        raise DataError(f"expected {model.n_features} columns, got {X.shape[1]}")
    out = np.empty(X.shape[0])
    _predict_flat(X, *model._flat, out)
    return out


def kfold_ids(n: int, k_folds: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    ids = np.empty(n, dtype=np.int64)
    ids[rng.permutation(n)] = np.arange(n) % k_folds
    return ids


def fold_mse(X, y, params: ForestParams, folds: np.ndarray, n_jobs: int = 1) -> float:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    pred = np.empty(len(y))
    for f in np.unique(folds):
        test = folds == f
        model = fit_forest(X[~test], y[~test], params, n_jobs=n_jobs)
        pred[test] = predict(model, X[test])
    return float(np.mean((y - pred) ** 2))


def cross_validate(X, y, grid: Sequence[ForestParams], k_folds: int = 5, seed: int = 0,
                   n_jobs: int = 1) -> ForestParams:
    """Return the grid element with the smallest k-fold out-of-fold MSE.

    Ties (within 1e-12 relative) go to the smaller ``min_leaf``, then to grid order.
    """
    grid = list(grid)
    if not grid:
        raise ConfigError("empty tuning grid")
    if k_folds < 2:
        raise ConfigError("k_folds must be >= 2")
    n = len(y)
    if n < k_folds:
        raise DataError(f"n={n} is smaller than k_folds={k_folds}")
    if len(grid) == 1:
        return grid[0]
    folds = kfold_ids(n, k_folds, seed)
    scores = [fold_mse(X, y, params, folds, n_jobs) for params in grid]
    best = min(scores)
    tol = 1e-12 * max(abs(best), 1e-300)
    tied = [i for i, s in enumerate(scores) if s - best <= tol]
    return grid[min(tied, key=lambda i: (grid[i].min_leaf, i))]


def dump_forest(model: ForestModel, path: str | Path) -> Path:
    """Plain-text dump: one ``tree <t>`` block per tree, one line per node
    ``id feature threshold left right value n``; leaves have feature -1."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# forest target={model.training_target} n_trees={model.params.n_trees} "
                 f"features={','.join(model.feature_names)}\n")
        for t, tree in enumerate(model.trees):
            fh.write(f"tree {t}\n")
            for k in range(tree.n_nodes):
                fh.write(f"{k} {tree.feature[k]} {float(tree.threshold[k])!r} {tree.left[k]} "
                         f"{tree.right[k]} {float(tree.value[k])!r} {tree.n_node[k]}\n")
    return path
