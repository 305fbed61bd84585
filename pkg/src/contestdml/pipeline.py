"""Run configuration and the simulate / estimate / report / descriptives /
support stages.  Every stage writes CSV files with fixed headers plus a JSON
manifest; nothing run-specific (paths, clocks, thread counts) enters an
output file unless explicitly requested, so reruns are byte-identical.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import platform
import time
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import __version__
from .blp import blp_fit, gate_table, write_gate_table
from .contest import SimConfig, simulate, true_ate
from .csvio import read_rows, write_rows
from .dataset import Dataset, Schema, descriptives, drop_log, load_csv
from .dml import (EffectEstimate, ScoreVector, ate, common_support, crossfit_nuisances, orthogonal_scores,
                  read_scores_csv, write_scores_csv)
from .errors import ConfigError, DataError
from .forest import ForestParams
from .kernel_cate import KernelSpec, cv_bandwidth, gate_curve_by_group, kernel_cate, write_group_curves
from .sorted_clan import clan, sorted_effects

CONFIG_VERSION = 1
MANIFEST = "manifest.json"


def _load_yaml(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must contain a mapping")
    return raw


def _check_keys(section: str, raw: dict, allowed: set[str]):
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {sorted(unknown)}")


# --- configuration -----------------------------------------------------------

@dataclass
class LearnerConfig:
    n_trees: int = 1000
    subsample_fraction: float = 0.5
    features_per_split: int | None = None
    min_leaf: list[int] = field(default_factory=lambda: [2, 5, 10, 20])
    cv_folds: int = 3

    def grid(self) -> list[ForestParams]:
        return [ForestParams(self.n_trees, self.subsample_fraction, self.features_per_split, int(m))
                for m in self.min_leaf]


@dataclass
class CateConfig:
    name: str
    z: list[str]
    group: str | None = None
    grid_points: int = 50
    kernel: str = "gaussian"
    undersmoothing: float = 0.9
    bandwidth: list[float] | None = None
    min_ess: float = 10.0
    grid_quantiles: tuple[float, float] = (0.02, 0.98)


@dataclass
class SortedConfig:
    B: int = 999


@dataclass
class ClanConfig:
    characteristics: list[str] = field(default_factory=list)
    q: float = 0.10
    B: int = 999
    mode: str = "fixed"  # or "full": re-estimate the IATEs in every replicate


@dataclass
class RunConfig:
    data: str
    columns: str
    output_dir: str
    seed: int
    scores: str | None = None
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    folds: int = 2
    cluster_folds: bool = False
    trim: tuple[float, float] = (0.01, 0.99)
    se_type: str = "robust"
    level: float = 0.90
    support_bins: int = 20
    gates: list[tuple[str, list[str]]] = field(default_factory=list)
    cates: list[CateConfig] = field(default_factory=list)
    iate_terms: list[str] = field(default_factory=list)
    sorted: SortedConfig | None = None
    clan: ClanConfig | None = None
    threads: int = 1
    base_dir: str = "."

    TOP_KEYS = {"version", "data", "columns", "output_dir", "seed", "scores", "learner", "folds",
                "cluster_folds", "trim", "se_type", "level", "support_bins", "gates", "cates", "iate_terms",
                "sorted", "clan", "threads"}

    @classmethod
    def from_mapping(cls, raw: dict, base_dir: str | Path = ".") -> "RunConfig":
        _check_keys("run config", raw, cls.TOP_KEYS)
        if raw.get("version") != CONFIG_VERSION:
            raise ConfigError(f"run config needs 'version: {CONFIG_VERSION}'")
        for key in ("data", "columns", "seed"):
            if raw.get(key) is None:
                raise ConfigError(f"run config is missing mandatory key {key!r}")
        learner_raw = raw.get("learner") or {}
        _check_keys("learner", learner_raw, {f.name for f in dataclasses.fields(LearnerConfig)})
        learner = LearnerConfig(**learner_raw)
        if isinstance(learner.min_leaf, int):
            learner.min_leaf = [learner.min_leaf]
        gates = []
        for g in raw.get("gates") or []:
            _check_keys("gates entry", g, {"label", "terms"})
            gates.append((str(g["label"]), list(g.get("terms") or [])))
        cates = []
        for c in raw.get("cates") or []:
            _check_keys("cates entry", c, {f.name for f in dataclasses.fields(CateConfig)})
            cate = CateConfig(**c)
            cate.z = [cate.z] if isinstance(cate.z, str) else list(cate.z)
            if len(cate.z) not in (1, 2):
                raise ConfigError(f"cate {cate.name!r}: z must name one or two columns")
            cates.append(cate)
        sorted_cfg = clan_cfg = None
        if raw.get("sorted") is not None:
            _check_keys("sorted", raw["sorted"], {"B"})
            sorted_cfg = SortedConfig(**raw["sorted"])
        if raw.get("clan") is not None:
            _check_keys("clan", raw["clan"], {f.name for f in dataclasses.fields(ClanConfig)})
            clan_cfg = ClanConfig(**raw["clan"])
            if clan_cfg.mode not in ("fixed", "full"):
                raise ConfigError("clan.mode must be 'fixed' or 'full'")
        se_type = raw.get("se_type", "robust")
        if se_type not in ("robust", "cluster"):
            raise ConfigError("se_type must be 'robust' or 'cluster'")
        level = float(raw.get("level", 0.90))
        if not 0 < level < 1:
            raise ConfigError("level must lie in (0, 1)")
        cfg = cls(
            data=str(raw["data"]), columns=str(raw["columns"]),
            output_dir=str(raw.get("output_dir") or "run"), seed=int(raw["seed"]),
            scores=raw.get("scores"), learner=learner, folds=int(raw.get("folds", 2)),
            cluster_folds=bool(raw.get("cluster_folds", False)),
            trim=tuple(float(t) for t in raw.get("trim", (0.01, 0.99))), se_type=se_type, level=level,
            support_bins=int(raw.get("support_bins", 20)), gates=gates, cates=cates,
            iate_terms=list(raw.get("iate_terms") or []), sorted=sorted_cfg, clan=clan_cfg,
            threads=int(raw.get("threads", 1)), base_dir=str(base_dir),
        )
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_mapping(_load_yaml(path), Path(path).parent)

    def resolve(self, p: str | None) -> Path | None:
        if p is None:
            return None
        path = Path(p)
        return path if path.is_absolute() else Path(self.base_dir) / path

    def validate_columns(self, schema: Schema):
        known = set(schema.names)
        referenced = [t for _, terms in self.gates for t in terms] + list(self.iate_terms)
        for c in self.cates:
            referenced += c.z + ([c.group] if c.group else [])
        if self.clan:
            referenced += self.clan.characteristics
        missing = sorted({r for r in referenced if r not in known})
        if missing:
            raise ConfigError(f"config references columns absent from the column spec: {missing}")
        if (self.sorted or self.clan) and not self.iate_terms:
            raise ConfigError("sorted effects / CLAN need 'iate_terms'")

    def canonical(self) -> dict:
        """Result-relevant settings (paths to outputs and thread counts excluded)."""
        d = dataclasses.asdict(self)
        for k in ("output_dir", "threads", "base_dir", "data", "columns", "scores"):
            d.pop(k)
        return d

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.canonical(), sort_keys=True, default=str).encode()).hexdigest()


# --- manifest ----------------------------------------------------------------

@dataclass
class RunManifest:
    command: str
    config_hash: str
    data_hash: str
    versions: dict
    outputs: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)
    timings: dict | None = None
    summary: dict = field(default_factory=dict)

    def write(self, directory: Path) -> Path:
        out = {k: v for k, v in dataclasses.asdict(self).items() if v is not None}
        path = directory / MANIFEST
        path.write_text(json.dumps(out, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @staticmethod
    def read(directory: Path) -> dict:
        path = Path(directory) / MANIFEST
        if not path.exists():
            raise DataError(f"no manifest in {directory}")
        return json.loads(path.read_text(encoding="utf-8"))


def _versions() -> dict:
    import scipy
    return {"contestdml": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class _Stages:
    def __init__(self, record: bool):
        self.record = record
        self.times: dict[str, float] = {}

    @contextmanager
    def __call__(self, name: str):
        start = time.perf_counter()
        try:
            yield
        except Exception as exc:
            if not getattr(exc, "stage", None):
                exc.stage = name
            raise
        finally:
            self.times[name] = round(time.perf_counter() - start, 3)

    def as_dict(self):
        return self.times if self.record else None


def _finish(manifest: RunManifest, out: Path, files: list[Path], caught: list) -> RunManifest:
    for w in caught:
        msg = f"{w.category.__name__}: {w.message}"
        if msg not in manifest.warnings:
            manifest.warnings.append(msg)
    manifest.outputs = {p.name: _sha(p) for p in sorted(files, key=lambda p: p.name)}
    manifest.write(out)
    return manifest


# --- simulate ----------------------------------------------------------------

SIM_KEYS = {f.name for f in dataclasses.fields(SimConfig)}


def sim_config_from_mapping(raw: dict) -> SimConfig:
    _check_keys("simulation", raw, SIM_KEYS)
    kwargs = dict(raw)
    for key in ("best_of", "outcome_coefs", "tau_coefs", "propensity_coefs"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    return SimConfig(**kwargs)


def run_simulate(cfg: SimConfig, output_dir: str | Path, stem: str = "simulated",
                 record_timings: bool = False) -> RunManifest:
    out = Path(output_dir)
    stages = _Stages(record_timings)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        with stages("simulate"):
            sim = simulate(cfg)
        with stages("write"):
            files = list(sim.save(out, stem))
    cfg_hash = hashlib.sha256(json.dumps(dataclasses.asdict(cfg), sort_keys=True).encode()).hexdigest()
    manifest = RunManifest("simulate", cfg_hash, sim.dataset.fingerprint(), _versions(), timings=stages.as_dict(),
                           summary={"n": sim.dataset.n, "true_ate": true_ate(sim),
                                    "treated_share": float(sim.dataset.d.mean())})
    return _finish(manifest, out, files, caught)


# --- estimate ----------------------------------------------------------------

def _ate_rows(est: EffectEstimate):
    return [("ATE", est.estimate, est.std_error, est.t_value, est.p_value, est.ci_low, est.ci_high, est.level,
             est.n)]


def _cate_grid(z: np.ndarray, c: CateConfig) -> np.ndarray:
    lo_q, hi_q = c.grid_quantiles
    axes = [np.linspace(*np.quantile(z[:, k], [lo_q, hi_q]), c.grid_points) for k in range(z.shape[1])]
    if len(axes) == 1:
        return axes[0]
    g1, g2 = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([g1.ravel(), g2.ravel()])


def _iate_fn(y_star: np.ndarray, dataset: Dataset, terms: list[str]):
    Z = dataset.columns(terms)

    def fn(weights):
        fit = blp_fit(y_star, Z, terms, weights=weights, drop_collinear=True)
        keep = [terms.index(t) for t in fit.names[1:]]
        return np.column_stack([np.ones(len(y_star)), Z[:, keep]]) @ fit.coef

    return fn


def run_estimate(cfg: RunConfig, record_timings: bool = False) -> RunManifest:
    out = cfg.resolve(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    stages = _Stages(record_timings)
    files: list[Path] = []
    warn: list[str] = []
    summary: dict[str, Any] = {}
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        with stages("load"):
            schema = Schema.load(cfg.resolve(cfg.columns))
            cfg.validate_columns(schema)
            dataset = load_csv(cfg.resolve(cfg.data), schema)
            warn += [f"dropped rows ({r})" for r in drop_log(dataset)]
            if cfg.se_type == "cluster" and dataset.cluster is None:
                raise ConfigError("se_type 'cluster' needs a cluster column")

        with stages("nuisance"):
            if cfg.scores:
                nuisance, scores = read_scores_csv(cfg.resolve(cfg.scores), dataset.d)
            else:
                learner = cfg.learner.grid()
                nuisance = crossfit_nuisances(dataset, learner if len(learner) > 1 else learner[0], cfg.folds,
                                              cfg.cluster_folds, cfg.seed, cfg.trim, cfg.learner.cv_folds,
                                              cfg.threads)
                scores = orthogonal_scores(dataset, nuisance)
                if nuisance.trim_log["low"] or nuisance.trim_log["high"]:
                    warn.append(f"propensity clipped: {nuisance.trim_log['low']} at {cfg.trim[0]}, "
                                f"{nuisance.trim_log['high']} at {cfg.trim[1]}")
            files.append(write_scores_csv(out / "scores.csv", nuisance, scores))

        cluster = dataset.cluster if cfg.se_type == "cluster" else None
        with stages("support"):
            support = common_support(nuisance, cfg.support_bins)
            files.append(support.write_csv(out / "support.csv"))
            summary["support"] = support.summary()
            if support.flag:
                warn.append(f"support concern in propensity bins {support.flagged_bins}")

        with stages("ate"):
            est = ate(scores, cfg.level, cluster)
            files.append(write_rows(out / "ate.csv", ("effect", "estimate", "se", "t", "p", "ci_low", "ci_high",
                                                      "level", "n"), _ate_rows(est)))
            summary["ate"] = dataclasses.asdict(est)

        if cfg.gates:
            with stages("gates"):
                fits = gate_table(scores, dataset, cfg.gates, cfg.se_type, drop_collinear=True)
                for fit in fits:
                    if fit.dropped:
                        warn.append(f"gate {fit.label!r}: dropped collinear columns {fit.dropped}")
                files.append(write_gate_table(out / "gates.csv", fits))

        for c in cfg.cates:
            with stages(f"cate:{c.name}"):
                z = dataset.columns(c.z)
                grid = _cate_grid(z, c)
                if c.group:
                    group = dataset.column(c.group)
                    curves = gate_curve_by_group(scores, z, group, grid, c.kernel, c.bandwidth, c.undersmoothing,
                                                 cfg.level, c.min_ess, seed=cfg.seed)
                    named = {f"{c.group}=0": curves[0], f"{c.group}=1": curves[1]}
                    path = write_group_curves(out / f"cate_{c.name}.csv", named)
                else:
                    h = c.bandwidth or cv_bandwidth(scores, z, c.kernel, seed=cfg.seed)
                    curve = kernel_cate(scores, z, KernelSpec(h, c.kernel, c.undersmoothing), grid, cfg.level,
                                        c.min_ess)
                    named = {"all": curve}
                    path = curve.write_csv(out / f"cate_{c.name}.csv")
                files.append(path)
                for label, curve in named.items():
                    missing = int((~curve.available).sum())
                    if missing:
                        warn.append(f"cate {c.name!r} ({label}): {missing} grid points below the mass floor")

        if cfg.sorted or cfg.clan:
            fn = _iate_fn(scores.y_star, dataset, list(cfg.iate_terms))
        if cfg.sorted:
            with stages("sorted"):
                curve = sorted_effects(fn, dataset.n, cfg.sorted.B, cfg.level, cfg.seed)
                files.append(curve.write_csv(out / "sorted_effects.csv"))
        if cfg.clan:
            with stages("clan"):
                table = clan(fn(None), dataset.columns(cfg.clan.characteristics), cfg.clan.characteristics,
                             cfg.clan.q, cfg.clan.B, cfg.seed, iate_fn=fn if cfg.clan.mode == "full" else None)
                files.append(table.write_csv(out / "clan.csv"))

    manifest = RunManifest("estimate", cfg.hash(), dataset.fingerprint(), _versions(), warnings=warn,
                           timings=stages.as_dict(), summary=summary)
    return _finish(manifest, out, files, caught)


def run_support(cfg: RunConfig, out_path: str | Path) -> dict:
    schema = Schema.load(cfg.resolve(cfg.columns))
    dataset = load_csv(cfg.resolve(cfg.data), schema)
    if cfg.scores:
        nuisance, _ = read_scores_csv(cfg.resolve(cfg.scores), dataset.d)
    else:
        learner = cfg.learner.grid()
        nuisance = crossfit_nuisances(dataset, learner if len(learner) > 1 else learner[0], cfg.folds,
                                      cfg.cluster_folds, cfg.seed, cfg.trim, cfg.learner.cv_folds, cfg.threads)
    report = common_support(nuisance, cfg.support_bins)
    report.write_csv(out_path)
    return report.summary()


def run_descriptives(data: str | Path, columns: str | Path, out_path: str | Path) -> Path:
    dataset = load_csv(data, Schema.load(columns))
    return descriptives(dataset).write_csv(out_path)


# --- report ------------------------------------------------------------------

REPORT_SECTIONS = (
    ("ate", "ate.csv"),
    ("gates", "gates.csv"),
    ("support", "support.csv"),
    ("sorted effects", "sorted_effects.csv"),
    ("clan", "clan.csv"),
)


def _table_text(path: Path) -> str:
    header, rows = read_rows(path)
    fmt_rows = [[_short(v) for v in r] for r in [header, *rows]]
    widths = [max(len(r[k]) for r in fmt_rows) for k in range(len(header))]
    return "\n".join("  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in fmt_rows)


def _short(v: str) -> str:
    try:
        f = float(v)
    except ValueError:
        return v
    return v if f.is_integer() and "." not in v else f"{f:.4f}"


def run_report(run_dir: str | Path) -> Path:
    """Collect the plot data of a finished run into ``<run>/report`` and write
    a plain-text summary.  Missing stage files are reported as absent."""
    run_dir = Path(run_dir)
    manifest = RunManifest.read(run_dir)
    report = run_dir / "report"
    report.mkdir(exist_ok=True)
    lines = [f"contestdml report (estimate config {manifest['config_hash'][:12]}, "
             f"data {manifest['data_hash'][:12]})", ""]

    ate_row = None
    if (run_dir / "ate.csv").exists():
        _, rows = read_rows(run_dir / "ate.csv")
        ate_row = rows[0]
    for title, name in REPORT_SECTIONS:
        lines.append(f"== {title} ==")
        path = run_dir / name
        lines.append(_table_text(path) if path.exists() else "(absent)")
        lines.append("")

    sorted_path = run_dir / "sorted_effects.csv"
    if sorted_path.exists():
        header, rows = read_rows(sorted_path)
        extra = ("ate", "ate_ci_low", "ate_ci_high")
        ate_vals = [ate_row[1], ate_row[5], ate_row[6]] if ate_row else ["", "", ""]
        write_rows(report / "figure_sorted_effects.csv", (*header, *extra), [(*r, *ate_vals) for r in rows])
    for path in sorted(run_dir.glob("cate_*.csv")):
        header, rows = read_rows(path)
        write_rows(report / f"figure_{path.name}", header, rows)
        lines.append(f"== kernel GATE curve {path.stem[5:]} ==")
        lines.append(_table_text(path))
        lines.append("")
    if not list(run_dir.glob("cate_*.csv")):
        lines += ["== kernel GATE curves ==", "(absent)", ""]

    lines.append("== warnings ==")
    lines += manifest.get("warnings") or ["(none)"]
    out = report / "summary.txt"
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out
