"""Asymmetric Tullock contest with a built-in first-mover advantage, and a
simulator producing datasets with known treatment effects.

Contestant ``i`` has ability ``A_i`` and advantage parameter ``delta_i`` in
(0, 1]; smaller ``delta`` means a larger advantage when starting.  The
starter wins with probability ``A_i / (A_i + delta_i * A_j)``.  The right to
start is allocated with probability ``pi`` (the shootout).
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from pathlib import Path

import numpy as np

from .csvio import write_rows
from .dataset import ColumnSpec, Dataset, Schema
from .errors import ConfigError, DataError

PI_BOUNDS = (0.05, 0.95)
TAU_CLIP = (0.02, 0.98)


def _check_abilities(*abilities):
    for a in abilities:
        if np.any(np.asarray(a) <= 0) or not np.all(np.isfinite(a)):
            raise ValueError("abilities must be positive and finite")


def _check_delta(delta):
    delta = np.asarray(delta)
    if np.any(delta <= 0) or np.any(delta > 1):
        raise ValueError("advantage parameter delta must lie in (0, 1]")


def win_prob_starter(a_i, a_j, delta_i):
    """Probability that ``i`` wins when ``i`` starts."""
    _check_abilities(a_i, a_j)
    _check_delta(delta_i)
    return a_i / (a_i + delta_i * a_j)


def win_prob_nonstarter(a_i, a_j, delta_j):
    """Probability that ``i`` wins when ``j`` starts."""
    _check_abilities(a_i, a_j)
    _check_delta(delta_j)
    return a_i / (a_i + a_j / delta_j)


@dataclass(frozen=True)
class ContestConfig:
    a_i: float
    a_j: float
    delta_i: float
    delta_j: float
    pi: float

    def __post_init__(self):
        _check_abilities(self.a_i, self.a_j)
        _check_delta(self.delta_i)
        _check_delta(self.delta_j)
        if not 0 <= self.pi <= 1:
            raise ValueError("pi must lie in [0, 1]")


def win_prob_exante(cfg: ContestConfig) -> float:
    """Ex-ante win probability of ``i``: shootout-weighted mix of both branches."""
    return (cfg.pi * win_prob_starter(cfg.a_i, cfg.a_j, cfg.delta_i)
            + (1 - cfg.pi) * win_prob_nonstarter(cfg.a_i, cfg.a_j, cfg.delta_j))


def win_prob_exante_expanded(cfg: ContestConfig) -> float:
    """Same quantity written as a symmetric part plus a (1 - 2 pi) term."""
    ai, aj, di, dj, pi = cfg.a_i, cfg.a_j, cfg.delta_i, cfg.delta_j, cfg.pi
    denom = 2 * (ai + di * aj) * (dj * ai + aj)
    return (ai * aj * (1 + di * dj) + 2 * dj * ai**2) / denom + (1 - 2 * pi) * ai * aj * (di * dj - 1) / denom


def win_prob_equal_ability(delta_i, delta_j, pi):
    """Closed form of the ex-ante win probability when ``A_i = A_j``."""
    denom = 2 * (1 + delta_i) * (delta_j + 1)
    return ((1 + delta_i * delta_j) + 2 * delta_j) / denom + (1 - 2 * pi) * (delta_i * delta_j - 1) / denom


@dataclass(frozen=True)
class FairnessReport:
    fair: bool
    condition: str  # "no-BIA", "randomized-and-symmetric", "offsetting", "neither"
    win_prob: float


def fairness_check(cfg: ContestConfig) -> FairnessReport:
    """Decide whether equally able contestants have a 50% ex-ante chance.

    With equal abilities the ex-ante probability minus one half equals
    ``((1 - 2 pi)(delta_i delta_j - 1) + delta_j - delta_i) / (2 (1 + delta_i)(1 + delta_j))``.
    The zero set contains the two textbook cases (no advantage at all, or a
    fair coin with equal advantages) and a third, degenerate family where the
    allocation offsets unequal advantages (e.g. ``pi = 1`` with ``delta_i = 1``),
    reported as ``"offsetting"``.  The test is done in exact rational arithmetic.
    """
    if cfg.a_i != cfg.a_j:
        raise ValueError("fairness undefined for contestants with unequal abilities")
    di, dj, pi = Fraction(cfg.delta_i), Fraction(cfg.delta_j), Fraction(cfg.pi)
    fair = (1 - 2 * pi) * (di * dj - 1) + dj - di == 0
    if di == 1 and dj == 1:
        condition = "no-BIA"
    elif pi == Fraction(1, 2) and di == dj:
        condition = "randomized-and-symmetric"
    elif fair:
        condition = "offsetting"
    else:
        condition = "neither"
    return FairnessReport(fair, condition, float(win_prob_exante(cfg)))


# --- best-of-K leg model -----------------------------------------------------

def leg_starters(k: int, i_starts: bool, order: str = "alternate") -> np.ndarray:
    """Boolean vector: True where ``i`` starts leg ``l``."""
    if order == "alternate":
        first = np.arange(k) % 2 == 0
    elif order == "abba":
        first = np.isin(np.arange(k) % 4, (0, 3))
    else:
        raise ConfigError(f"unknown leg order {order!r}")
    return first if i_starts else ~first


@lru_cache(maxsize=None)
def _win_count_table(k: int, i_starts: bool, order: str) -> np.ndarray:
    """Enumerate all 2**K leg sequences; table[w1, w2] counts the sequences in
    which ``i`` wins the match with ``w1`` wins in own-start legs and ``w2``
    wins in opponent-start legs."""
    if k < 1 or k % 2 == 0 or k > 13:
        raise ConfigError(f"best-of-K requires odd K in [1, 13], got {k}")
    starts = leg_starters(k, i_starts, order)
    n1 = int(starts.sum())
    table = np.zeros((n1 + 1, k - n1 + 1))
    target = (k + 1) // 2
    for seq in itertools.product((0, 1), repeat=k):
        s = np.array(seq, dtype=bool)
        # first to `target` legs wins; with all K legs played that is the majority
        cum_i = np.cumsum(s)
        cum_j = np.cumsum(~s)
        reach_i = np.argmax(cum_i >= target) if cum_i[-1] >= target else k
        reach_j = np.argmax(cum_j >= target) if cum_j[-1] >= target else k
        if reach_i < reach_j:
            table[int(s[starts].sum()), int(s[~starts].sum())] += 1
    return table


def match_win_prob(k: int, q_own, q_opp, i_starts: bool, order: str = "alternate"):
    """Probability that ``i`` wins a best-of-K match by exhaustive enumeration.

    ``q_own``: probability ``i`` wins a leg it starts; ``q_opp``: probability
    ``i`` wins a leg the opponent starts.
    """
    table = _win_count_table(int(k), bool(i_starts), order)
    q_own = np.asarray(q_own, dtype=float)
    q_opp = np.asarray(q_opp, dtype=float)
    n1, n2 = table.shape[0] - 1, table.shape[1] - 1
    total = np.zeros(np.broadcast(q_own, q_opp).shape)
    for w1 in range(n1 + 1):
        for w2 in range(n2 + 1):
            c = table[w1, w2]
            if c:
                total = total + c * q_own**w1 * (1 - q_own) ** (n1 - w1) * q_opp**w2 * (1 - q_opp) ** (n2 - w2)
    return total


def simulate_legs(rng: np.random.Generator, k: np.ndarray, q_own, q_opp, i_starts, order="alternate"):
    """Play legs one by one until someone reaches (K+1)/2 wins; returns 1 if ``i`` wins."""
    k = np.asarray(k, dtype=np.int64)
    n = len(k)
    q_own = np.broadcast_to(np.asarray(q_own, float), (n,))
    q_opp = np.broadcast_to(np.asarray(q_opp, float), (n,))
    i_starts = np.broadcast_to(np.asarray(i_starts, bool), (n,))
    k_max = int(k.max())
    target = (k + 1) // 2
    wins_i = np.zeros(n, dtype=np.int64)
    wins_j = np.zeros(n, dtype=np.int64)
    u = rng.random((n, k_max))
    for leg in range(k_max):
        live = (wins_i < target) & (wins_j < target)
        if not live.any():
            break
        i_leg = np.where(i_starts, leg_starters(k_max, True, order)[leg], leg_starters(k_max, False, order)[leg])
        q = np.where(i_leg, q_own, q_opp)
        won = u[:, leg] < q
        wins_i += live & won
        wins_j += live & ~won
    return (wins_i >= target).astype(float)


# --- simulator ---------------------------------------------------------------

@dataclass(frozen=True)
class SimConfig:
    n_matches: int = 10_000
    seed: int = 0
    dgp_kind: str = "contest"  # "contest", "best-of-k", "generic-linear"
    # contest / best-of-k
    n_players: int = 400
    ability_sd: float = 0.5  # sd of log ability
    delta: float = 0.85
    home_share: float = 0.08
    home_gap_factor: float = 1.0  # multiplies (1 - delta) for a contestant playing at home
    pi_slope: float = 2.0  # logistic slope of the shootout on the log-ability gap
    pi_constant: float | None = None  # fixed shootout probability, overrides pi_slope
    covariate_noise: float = 0.0  # measurement noise on the ability proxies
    n_noise_covariates: int = 1
    best_of: tuple[int, ...] = (7, 9, 11)
    leg_order: str = "alternate"  # or "abba"
    catch_up: bool = False
    # generic-linear
    n_features: int = 3
    outcome_coefs: tuple[float, ...] = (0.3, 0.2, 0.2)  # intercept, then x0, x1, ...
    tau_coefs: tuple[float, ...] = (0.05, 0.1)  # intercept, slope on x0
    propensity_coefs: tuple[float, ...] = (-1.0, 0.0, 2.0)  # logit: intercept, then x0, x1, ...
    n_clusters: int = 200

    def __post_init__(self):
        if self.n_matches < 1:
            raise ConfigError("n_matches must be >= 1")
        if self.dgp_kind not in ("contest", "best-of-k", "generic-linear"):
            raise ConfigError(f"unknown dgp_kind {self.dgp_kind!r}")
        if not 0 < self.delta <= 1:
            raise ConfigError("delta must lie in (0, 1]")
        if self.home_gap_factor < 0 or 1 - (1 - self.delta) * self.home_gap_factor <= 0:
            raise ConfigError("home_gap_factor produces delta outside (0, 1]")
        if self.pi_constant is not None and not PI_BOUNDS[0] <= self.pi_constant <= PI_BOUNDS[1]:
            raise ConfigError(f"pi_constant must lie in {list(PI_BOUNDS)}")
        if not 0 <= self.home_share <= 1:
            raise ConfigError("home_share must lie in [0, 1]")
        if self.n_players < 2:
            raise ConfigError("n_players must be >= 2")
        if self.leg_order not in ("alternate", "abba"):
            raise ConfigError(f"unknown leg_order {self.leg_order!r}")
        for k in self.best_of:
            if k < 1 or k % 2 == 0 or k > 13:
                raise ConfigError("best_of values must be odd and <= 13")
        if len(self.tau_coefs) != 2:
            raise ConfigError("tau_coefs must be (intercept, slope)")
        for name in ("outcome_coefs", "propensity_coefs"):
            if len(getattr(self, name)) > self.n_features + 1:
                raise ConfigError(f"{name} has more entries than 1 + n_features")

    def pi_model(self, log_gap):
        if self.pi_constant is not None:
            return np.full(np.shape(log_gap), float(self.pi_constant))
        return np.clip(1 / (1 + np.exp(-self.pi_slope * log_gap)), *PI_BOUNDS)

    def delta_model(self, home):
        return 1 - (1 - self.delta) * np.where(np.asarray(home) > 0, self.home_gap_factor, 1.0)


@dataclass
class SimulatedDataset:
    dataset: Dataset
    p1: np.ndarray  # Pr(y = 1 | d = 1)
    p0: np.ndarray  # Pr(y = 1 | d = 0)
    y1: np.ndarray
    y0: np.ndarray
    tau: np.ndarray
    config: SimConfig = field(default=None)
    extra: dict = field(default_factory=dict)

    def save(self, directory: str | Path, stem: str = "simulated") -> tuple[Path, Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        ds = self.dataset
        schema = ds.schema
        cols = {ds.schema.by_role("outcome")[0].name: ds.y, ds.schema.by_role("treatment")[0].name: ds.d}
        for name in ds.x_names:
            cols[name] = ds.column(name)
        if ds.cluster is not None:
            cols[schema.by_role("cluster")[0].name] = ds.cluster
        header = [c.name for c in schema.columns]
        ints = {c.name for c in schema.columns if c.kind in ("binary", "count") or c.role == "cluster"}
        data = [
            [int(cols[h][r]) if h in ints else float(cols[h][r]) for h in header]
            for r in range(ds.n)
        ]
        obs = write_rows(directory / f"{stem}.csv", header, data)
        truth = write_rows(
            directory / f"{stem}_truth.csv",
            ("row_id", "p1", "p0", "y1", "y0", "tau"),
            zip(range(ds.n), self.p1, self.p0, self.y1.astype(int), self.y0.astype(int), self.tau),
        )
        spec = directory / f"{stem}_columns.yaml"
        schema.dump(spec)
        return obs, truth, spec


def _contest_rows(cfg: SimConfig, rng: np.random.Generator):
    n = cfg.n_matches
    log_ability = rng.normal(0.0, cfg.ability_sd, cfg.n_players)
    pi_player = rng.integers(0, cfg.n_players, n)
    pj_player = (pi_player + rng.integers(1, cfg.n_players, n)) % cfg.n_players
    la_i, la_j = log_ability[pi_player], log_ability[pj_player]
    a_i, a_j = np.exp(la_i), np.exp(la_j)
    home_i = (rng.random(n) < cfg.home_share).astype(float)
    home_j = (rng.random(n) < cfg.home_share).astype(float)
    delta_i = cfg.delta_model(home_i)
    delta_j = cfg.delta_model(home_j)
    pi = cfg.pi_model(la_i - la_j)
    d = (rng.random(n) < pi).astype(float)
    # ability proxy on a 3-dart-average-like scale
    avg_i = 92 + 9 * la_i + cfg.covariate_noise * rng.normal(size=n)
    avg_j = 92 + 9 * la_j + cfg.covariate_noise * rng.normal(size=n)
    cols = {"avg_i": avg_i, "avg_j": avg_j, "home_i": home_i, "home_j": home_j}
    for k in range(cfg.n_noise_covariates):
        cols[f"noise{k}"] = rng.normal(size=n)
    return dict(n=n, a_i=a_i, a_j=a_j, delta_i=delta_i, delta_j=delta_j, pi=pi, d=d,
                cluster=pi_player, cols=cols)


def simulate(cfg: SimConfig) -> SimulatedDataset:
    """Draw a dataset whose potential outcomes and effects are known.

    ``contest``: one row per match from the perspective of contestant ``i``;
    the shootout depends on the ability gap, which also drives the win
    probability, so a naive comparison of starters and non-starters is biased.
    ``best-of-k``: as ``contest`` but the match is played leg by leg.
    ``generic-linear``: ``Y(d) ~ Bernoulli(m(x) + d tau(x))`` on uniform features.
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5EED]))
    extra = {}
    if cfg.dgp_kind in ("contest", "best-of-k"):
        r = _contest_rows(cfg, rng)
        n, d = r["n"], r["d"]
        cols = r["cols"]
        if cfg.dgp_kind == "contest":
            p1 = win_prob_starter(r["a_i"], r["a_j"], r["delta_i"])
            p0 = win_prob_nonstarter(r["a_i"], r["a_j"], r["delta_j"])
            u1, u0 = rng.random(n), rng.random(n)
            y1, y0 = (u1 < p1).astype(float), (u0 < p0).astype(float)
        else:
            k = rng.choice(np.asarray(cfg.best_of), n)
            if cfg.catch_up:
                q_own = q_opp = r["a_i"] / (r["a_i"] + r["a_j"])
            else:
                q_own = win_prob_starter(r["a_i"], r["a_j"], r["delta_i"])
                q_opp = win_prob_nonstarter(r["a_i"], r["a_j"], r["delta_j"])
            q_own = np.broadcast_to(q_own, (n,))
            q_opp = np.broadcast_to(q_opp, (n,))
            p1, p0 = np.empty(n), np.empty(n)
            for kk in np.unique(k):
                m = k == kk
                p1[m] = match_win_prob(kk, q_own[m], q_opp[m], True, cfg.leg_order)
                p0[m] = match_win_prob(kk, q_own[m], q_opp[m], False, cfg.leg_order)
            y1 = simulate_legs(rng, k, q_own, q_opp, True, cfg.leg_order)
            y0 = simulate_legs(rng, k, q_own, q_opp, False, cfg.leg_order)
            cols["best_of"] = k.astype(float)
        cluster = r["cluster"]
        extra.update(a_i=r["a_i"], a_j=r["a_j"], delta_i=r["delta_i"], delta_j=r["delta_j"], pi=r["pi"])
        specs = [ColumnSpec("won", "binary", "outcome"), ColumnSpec("starts", "binary", "treatment")]
        for name in cols:
            kind = "binary" if name.startswith("home") else ("count" if name == "best_of" else "continuous")
            specs.append(ColumnSpec(name, kind, "heterogeneity"))
        specs.append(ColumnSpec("player_i", "count", "cluster"))
    else:
        n, p = cfg.n_matches, cfg.n_features
        x = rng.random((n, p))

        def linear(coefs):
            coefs = np.asarray(coefs, dtype=float)
            return coefs[0] + x[:, : len(coefs) - 1] @ coefs[1:]

        m = linear(cfg.outcome_coefs)
        tau_lin = cfg.tau_coefs[0] + cfg.tau_coefs[1] * x[:, 0]
        pi = np.clip(1 / (1 + np.exp(-linear(cfg.propensity_coefs))), *PI_BOUNDS)
        p0 = np.clip(m, *TAU_CLIP)
        p1 = np.clip(m + tau_lin, *TAU_CLIP)
        d = (rng.random(n) < pi).astype(float)
        y1 = (rng.random(n) < p1).astype(float)
        y0 = (rng.random(n) < p0).astype(float)
        cols = {f"x{j}": x[:, j] for j in range(p)}
        cluster = rng.integers(0, cfg.n_clusters, n)
        extra.update(pi=pi)
        specs = [ColumnSpec("y", "binary", "outcome"), ColumnSpec("d", "binary", "treatment")]
        specs += [ColumnSpec(name, "continuous", "heterogeneity") for name in cols]
        specs.append(ColumnSpec("cluster", "count", "cluster"))

    if not (np.all((p1 > 0) & (p1 < 1)) and np.all((p0 > 0) & (p0 < 1))):
        raise ConfigError("configuration yields outcome probabilities outside (0, 1)")
    y = d * y1 + (1 - d) * y0
    schema = Schema(tuple(specs))
    dataset = Dataset(
        y=y, d=d, X=np.column_stack(list(cols.values())), x_names=list(cols), z_names=list(cols),
        cluster=cluster, schema=schema,
        provenance={"source": f"simulate({cfg.dgp_kind}, seed={cfg.seed})", "n_source_rows": n,
                    "n_loaded": n, "dropped": {}},
    )
    return SimulatedDataset(dataset, p1, p0, y1, y0, p1 - p0, cfg, extra)


def true_ate(sim_data) -> float:
    """Finite-population mean of ``p1 - p0`` over the simulated rows."""
    if not isinstance(sim_data, SimulatedDataset):
        raise DataError("true_ate needs a simulated dataset with hidden truth")
    return float(np.mean(sim_data.p1 - sim_data.p0))


def exhaustive_match_ate(k: int, q_own: float, q_opp: float, order: str = "alternate") -> float:
    """Match-level effect of starting for a single (K, leg probabilities) cell."""
    return float(match_win_prob(k, q_own, q_opp, True, order) - match_win_prob(k, q_own, q_opp, False, order))


def default_darts_config(n_matches: int = 20_000, seed: int = 0, **overrides) -> SimConfig:
    """Confounded darts-like scenario with a true ATE of roughly 0.08."""
    params = dict(n_matches=n_matches, seed=seed, dgp_kind="contest", delta=0.835, pi_slope=1.0,
                  ability_sd=0.5, home_gap_factor=1.0)
    params.update(overrides)
    return SimConfig(**params)

