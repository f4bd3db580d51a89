import numpy as np
import pytest

from sysform.data import make_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def linear_collection(n_systems=10, n_points=20, seed=0, noise_sd=0.0):
    """Datasets from the y = a*x + b family with per-system (a, b)."""
    gen = np.random.default_rng(seed)
    out = []
    for i in range(n_systems):
        a = gen.uniform(1.0, 3.0)
        b = gen.uniform(-1.0, 1.0)
        x = np.linspace(0.0, 1.0, n_points)
        y = a * x + b
        if noise_sd > 0:
            y = y + gen.normal(0.0, noise_sd, n_points)
        out.append(make_dataset(f"s{i:02d}", x, y, {"a": a, "b": b}))
    return out


def spearman(a, b) -> float:
    """Spearman rank correlation, hand-rolled to stay dependency-free."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ra = np.argsort(np.argsort(a)).astype(float)
    rb = np.argsort(np.argsort(b)).astype(float)
    ra -= ra.mean()
    rb -= rb.mean()
    return float(np.sum(ra * rb) / np.sqrt(np.sum(ra * ra) * np.sum(rb * rb)))
