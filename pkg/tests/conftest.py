import numpy as np
import pytest
import yaml

from contestdml.contest import SimConfig, simulate
from contestdml.dataset import Dataset


def write_spec(path, columns):
    path.write_text(yaml.safe_dump({"version": 1, "columns": [
        {"name": n, "kind": k, "role": r} for n, k, r in columns]}))
    return path


@pytest.fixture
def small_spec(tmp_path):
    return write_spec(tmp_path / "cols.yaml", [
        ("won", "binary", "outcome"),
        ("starts", "binary", "treatment"),
        ("avg", "continuous", "confounder"),
        ("home", "binary", "heterogeneity"),
    ])


def make_dataset(n=400, seed=0, p=2):
    rng = np.random.default_rng(seed)
    X = rng.random((n, p))
    d = (rng.random(n) < 0.5).astype(float)
    d[:2] = (0, 1)
    y = (rng.random(n) < 0.3 + 0.2 * d).astype(float)
    names = [f"x{j}" for j in range(p)]
    return Dataset(y=y, d=d, X=X, x_names=names, z_names=names, cluster=rng.integers(0, 20, n))


@pytest.fixture(scope="session")
def generic_sim():
    return simulate(SimConfig(n_matches=2000, seed=3, dgp_kind="generic-linear"))
