"""Data model, CSV ingestion, derived variables and balance statistics.

A :class:`Dataset` stores one row per match side: the binary outcome ``y``
(match won), the binary treatment ``d`` (starts the first leg), the
confounder matrix ``X`` and, optionally, a contestant identifier used for
clustering.  Heterogeneity variables are a named subset of the confounders.

Column specifications are YAML files of the form::

    version: 1
    columns:
      - {name: won, kind: binary, role: outcome}
      - {name: starts, kind: binary, role: treatment}
      - {name: avg_i, kind: continuous, role: heterogeneity}
      - {name: player_i, kind: count, role: cluster}
"""
from __future__ import annotations

import hashlib
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import yaml

from .csvio import read_rows, write_rows
from .errors import ConfigError, DataError

KINDS = ("binary", "continuous", "count")
ROLES = ("outcome", "treatment", "confounder", "heterogeneity", "cluster", "ignore")
MISSING_TOKENS = frozenset({"", "na", "nan", "null", "none"})


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str
    role: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.role not in ROLES:
            raise ConfigError(f"column {self.name!r}: unknown role {self.role!r}")


@dataclass(frozen=True)
class Schema:
    columns: tuple[ColumnSpec, ...]

    def __post_init__(self):
        names = [c.name for c in self.columns]
        dup = [n for n, k in Counter(names).items() if k > 1]
        if dup:
            raise ConfigError(f"duplicate column names in spec: {dup}")
        for role in ("outcome", "treatment"):
            count = sum(c.role == role for c in self.columns)
            if count != 1:
                raise ConfigError(f"column spec needs exactly one {role} column, found {count}")
            kind = self.by_role(role)[0].kind
            if kind != "binary":
                raise ConfigError(f"{role} column must be binary, got {kind}")
        if sum(c.role == "cluster" for c in self.columns) > 1:
            raise ConfigError("at most one cluster column allowed")

    def by_role(self, *roles: str) -> list[ColumnSpec]:
        return [c for c in self.columns if c.role in roles]

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    def kind_of(self, name: str) -> str:
        for c in self.columns:
            if c.name == name:
                return c.kind
        raise KeyError(name)

    @classmethod
    def from_mapping(cls, spec: Mapping) -> "Schema":
        if not isinstance(spec, Mapping):
            raise ConfigError("column spec must be a mapping with 'version' and 'columns'")
        unknown = set(spec) - {"version", "columns"}
        if unknown:
            raise ConfigError(f"unknown keys in column spec: {sorted(unknown)}")
        if spec.get("version") != 1:
            raise ConfigError(f"unsupported column spec version {spec.get('version')!r}")
        cols = []
        for entry in spec.get("columns") or []:
            extra = set(entry) - {"name", "kind", "role"}
            if extra:
                raise ConfigError(f"unknown keys in column entry: {sorted(extra)}")
            try:
                cols.append(ColumnSpec(str(entry["name"]), entry["kind"], entry["role"]))
            except KeyError as exc:
                raise ConfigError(f"column entry missing {exc.args[0]!r}") from None
        return cls(tuple(cols))

    @classmethod
    def load(cls, path: str | Path) -> "Schema":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"column spec not found: {path}")
        with open(path, encoding="utf-8") as fh:
            return cls.from_mapping(yaml.safe_load(fh))

    def to_mapping(self) -> dict:
        return {
            "version": 1,
            "columns": [{"name": c.name, "kind": c.kind, "role": c.role} for c in self.columns],
        }

    def dump(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            yaml.safe_dump(self.to_mapping(), fh, sort_keys=False)


@dataclass(frozen=True)
class ObservationRecord:
    y: int
    d: int
    x: dict[str, float]
    z_index: tuple[str, ...]
    cluster_id: int | None = None
    weight: float = 1.0


@dataclass
class Dataset:
    """Column-oriented store of observation records.

    ``X`` holds every confounder and heterogeneity column in schema order;
    ``z_names`` names the heterogeneity subset.
    """

    y: np.ndarray
    d: np.ndarray
    X: np.ndarray
    x_names: list[str]
    z_names: list[str]
    cluster: np.ndarray | None = None
    weight: np.ndarray | None = None
    schema: Schema | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.d = np.asarray(self.d, dtype=float)
        self.X = np.asarray(self.X, dtype=float).reshape(len(self.y), -1)
        n = len(self.y)
        if len(self.d) != n or self.X.shape[0] != n:
            raise DataError("y, d and X must have the same number of rows")
        if self.X.shape[1] != len(self.x_names):
            raise DataError("x_names does not match the width of X")
        if n < 2:
            raise DataError(f"dataset needs at least 2 rows, got {n}")
        if not np.isin(self.y, (0.0, 1.0)).all() or not np.isin(self.d, (0.0, 1.0)).all():
            raise DataError("y and d must be binary")
        if self.d.sum() == 0 or self.d.sum() == n:
            raise DataError("both treatment arms must be non-empty")
        if not np.isfinite(self.X).all():
            raise DataError("X contains missing or non-finite values")
        for z in self.z_names:
            if self.x_names.count(z) != 1:
                raise DataError(f"heterogeneity variable {z!r} does not resolve to one X column")
        if self.cluster is not None:
            self.cluster = np.asarray(self.cluster, dtype=np.int64)
            if (self.cluster < 0).any():
                raise DataError("cluster ids must be non-negative")
        self.weight = np.ones(n) if self.weight is None else np.asarray(self.weight, dtype=float)
        if (self.weight < 0).any():
            raise DataError("weights must be non-negative")

    @property
    def n(self) -> int:
        return len(self.y)

    def column(self, name: str) -> np.ndarray:
        try:
            return self.X[:, self.x_names.index(name)]
        except ValueError:
            raise DataError(f"unknown column {name!r}") from None

    def columns(self, names: Sequence[str]) -> np.ndarray:
        return np.column_stack([self.column(n) for n in names]) if names else np.empty((self.n, 0))

    def record(self, i: int) -> ObservationRecord:
        return ObservationRecord(
            y=int(self.y[i]),
            d=int(self.d[i]),
            x=dict(zip(self.x_names, self.X[i].tolist())),
            z_index=tuple(self.z_names),
            cluster_id=None if self.cluster is None else int(self.cluster[i]),
            weight=float(self.weight[i]),
        )

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.y, self.d, self.X):
            h.update(np.ascontiguousarray(arr).tobytes())
        if self.cluster is not None:
            h.update(self.cluster.tobytes())
        h.update("|".join(self.x_names).encode())
        return h.hexdigest()


def load_csv(path: str | Path, schema: Schema | str | Path) -> Dataset:
    """Read a CSV file into a :class:`Dataset`.

    Rows with a missing value in any required column are dropped and counted
    in ``provenance["dropped"]``; malformed rows and non-binary values in
    binary columns raise :class:`DataError`.
    """
    if not isinstance(schema, Schema):
        schema = Schema.load(schema)
    path = Path(path)
    if not path.exists():
        raise DataError(f"input file not found: {path}")
    header, rows = read_rows(path)
    header = [h.strip() for h in header]
    unknown = [h for h in header if h not in schema.names]
    if unknown:
        raise DataError(f"unknown column(s) in {path.name}: {unknown}")
    absent = [c for c in schema.names if c not in header]
    if absent:
        raise DataError(f"column(s) declared in spec but absent from header: {absent}")

    used = [c for c in schema.columns if c.role != "ignore"]
    pos = {c.name: header.index(c.name) for c in used}
    x_cols = schema.by_role("confounder", "heterogeneity")
    dropped: Counter = Counter()
    values: dict[str, list[float]] = {c.name: [] for c in used}

    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise DataError(f"malformed row {i} (line {i + 2}): expected {len(header)} fields, got {len(row)}")
        parsed = {}
        missing_role = None
        for c in used:
            text = row[pos[c.name]].strip()
            if text.lower() in MISSING_TOKENS:
                missing_role = missing_role or ("confounder" if c.role == "heterogeneity" else c.role)
                continue
            try:
                v = float(text)
            except ValueError:
                raise DataError(f"malformed value {text!r} in column {c.name!r}, row {i} (line {i + 2})") from None
            if not math.isfinite(v):
                raise DataError(f"non-finite value in column {c.name!r}, row {i} (line {i + 2})")
            if c.kind == "binary" and v not in (0.0, 1.0):
                raise DataError(f"non-binary value {text!r} in binary column {c.name!r}, row {i} (line {i + 2})")
            if c.role == "cluster" and (v < 0 or not v.is_integer()):
                raise DataError(f"cluster id must be a non-negative integer, row {i} (line {i + 2})")
            parsed[c.name] = v
        if missing_role is not None:
            dropped[f"missing {missing_role}"] += 1
            continue
        for name, v in parsed.items():
            values[name].append(v)

    (y_col,) = schema.by_role("outcome")
    (d_col,) = schema.by_role("treatment")
    clusters = schema.by_role("cluster")
    n = len(values[y_col.name])
    X = np.column_stack([values[c.name] for c in x_cols]) if x_cols else np.empty((n, 0))
    provenance = {
        "source": str(path),
        "n_source_rows": len(rows),
        "n_loaded": n,
        "dropped": dict(sorted(dropped.items())),
    }
    return Dataset(
        y=values[y_col.name],
        d=values[d_col.name],
        X=X,
        x_names=[c.name for c in x_cols],
        z_names=[c.name for c in schema.by_role("heterogeneity")],
        cluster=values[clusters[0].name] if clusters else None,
        schema=schema,
        provenance=provenance,
    )


def drop_log(dataset: Dataset) -> list[str]:
    """Human-readable drop reasons, e.g. ``["missing treatment: 1"]``."""
    return [f"{k}: {v}" for k, v in dataset.provenance.get("dropped", {}).items()]


def standardize_prize_money(values: Mapping[tuple, float]) -> dict[tuple, float]:
    """Min-max normalise prize money over the whole pool of tournament-years."""
    if not values:
        raise DataError("empty prize pool")
    lo, hi = min(values.values()), max(values.values())
    if not hi > lo:
        raise DataError("degenerate prize range")
    return {k: (v - lo) / (hi - lo) for k, v in values.items()}


def derive_home(distance_km: float, radius_km: float = 100.0) -> int:
    """1 if the hometown lies within ``radius_km`` of the venue (inclusive)."""
    if not (math.isfinite(distance_km) and math.isfinite(radius_km)):
        raise DataError("distance and radius must be finite")
    if distance_km < 0:
        raise DataError(f"negative distance {distance_km}")
    if radius_km <= 0:
        raise DataError(f"radius must be positive, got {radius_km}")
    return int(distance_km <= radius_km)


def add_pair_differences(dataset: Dataset, pairs: Sequence[tuple[str, str]]) -> Dataset:
    """Append ``diff_<a>_<b> = a - b`` confounders (player-pair differences)."""
    cols = [dataset.column(a) - dataset.column(b) for a, b in pairs]
    names = [f"diff_{a}_{b}" for a, b in pairs]
    return Dataset(
        y=dataset.y,
        d=dataset.d,
        X=np.column_stack([dataset.X, *cols]) if cols else dataset.X,
        x_names=dataset.x_names + names,
        z_names=list(dataset.z_names),
        cluster=dataset.cluster,
        weight=dataset.weight,
        schema=dataset.schema,
        provenance=dict(dataset.provenance),
    )


def standardized_difference(values, d) -> float:
    """100 * |mean_1 - mean_0| / sqrt((var_1 + var_0) / 2), sample variances."""
    values = np.asarray(values, dtype=float)
    d = np.asarray(d, dtype=float)
    treated, control = values[d == 1], values[d == 0]
    if len(treated) == 0 or len(control) == 0:
        raise DataError("both treatment arms must be non-empty")
    var1 = treated.var(ddof=1) if len(treated) > 1 else 0.0
    var0 = control.var(ddof=1) if len(control) > 1 else 0.0
    pooled = (var1 + var0) / 2
    if not pooled > 0:
        raise DataError("constant variable")
    return 100.0 * abs(treated.mean() - control.mean()) / math.sqrt(pooled)


@dataclass
class DescriptiveRow:
    variable: str
    role: str
    kind: str
    mean: float
    sd: float
    mean_treated: float
    mean_control: float
    diff: float
    diff_type: str  # "raw" for outcomes, "std" for characteristics, "" otherwise


@dataclass
class DescriptivesTable:
    rows: list[DescriptiveRow]
    n: int

    HEADER = ("variable", "role", "kind", "mean", "sd", "mean_treated", "mean_control", "diff", "diff_type")

    def __getitem__(self, name: str) -> DescriptiveRow:
        for r in self.rows:
            if r.variable == name:
                return r
        raise KeyError(name)

    def write_csv(self, path: str | Path) -> Path:
        body = [
            (r.variable, r.role, r.kind, r.mean, r.sd, r.mean_treated, r.mean_control, r.diff, r.diff_type)
            for r in self.rows
        ]
        body.append(("observations", "", "", self.n, None, None, None, None, ""))
        return write_rows(path, self.HEADER, body)


def descriptives(dataset: Dataset) -> DescriptivesTable:
    """Means, SDs and by-arm means; raw difference for the outcome,
    standardized difference for every characteristic."""
    d = dataset.d
    schema = dataset.schema

    def kind(name, default):
        try:
            return schema.kind_of(name) if schema else default
        except KeyError:
            return default

    def row(name, role, k, v, diff_type):
        t, c = v[d == 1], v[d == 0]
        sd = float(v.std(ddof=1)) if len(v) > 1 else 0.0
        if diff_type == "raw":
            diff = float(t.mean() - c.mean())
        elif diff_type == "std":
            try:
                diff = standardized_difference(v, d)
            except DataError:
                diff = math.nan
        else:
            diff = math.nan
        return DescriptiveRow(name, role, k, float(v.mean()), sd, float(t.mean()), float(c.mean()), diff, diff_type)

    y_name = schema.by_role("outcome")[0].name if schema else "y"
    d_name = schema.by_role("treatment")[0].name if schema else "d"
    rows = [row(y_name, "outcome", "binary", dataset.y, "raw"), row(d_name, "treatment", "binary", d, "")]
    for name in dataset.x_names:
        role = "heterogeneity" if name in dataset.z_names else "confounder"
        rows.append(row(name, role, kind(name, "continuous"), dataset.column(name), "std"))
    return DescriptivesTable(rows, dataset.n)
