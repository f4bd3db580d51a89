"""Dataset ingestion and the synthetic multi-system generators.

A dataset is one system's observations (x strictly increasing); a
collection holds D labeled datasets plus a provenance manifest.  The CSV
schema is ``system_id,x,y`` (UTF-8, LF, header mandatory).  Two generators
reproduce the study cases: exponential sensor degradation over working
cycles, and projectile-with-drag trajectories for a sweep of the controlled
property G.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .expr import DomainError

__all__ = [
    "Dataset",
    "DatasetCollection",
    "SchemaError",
    "EmptySystem",
    "make_dataset",
    "load_csv",
    "write_csv",
    "write_annotations",
    "gen_exponential",
    "gen_projectile",
    "projectile_height",
]

CSV_HEADER = "system_id,x,y"


class SchemaError(ValueError):
    """CSV header or row shape does not match the documented schema."""


class EmptySystem(ValueError):
    """A system has fewer than two observations (or the file has none)."""


@dataclass(frozen=True, eq=False)
class Dataset:
    """Observations of one system; ``x`` strictly increasing, all finite."""

    system_id: str
    x: np.ndarray
    y: np.ndarray
    annotations: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.x.shape != self.y.shape or self.x.ndim != 1:
            raise ValueError("x and y must be 1-D arrays of equal length")
        if self.x.size < 2:
            raise EmptySystem(f"system {self.system_id!r} has {self.x.size} point(s)")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.y))):
            raise ValueError(f"system {self.system_id!r} contains non-finite values")
        if np.any(np.diff(self.x) <= 0):
            raise ValueError(f"system {self.system_id!r} has duplicate or unsorted x values")

    def __len__(self) -> int:
        return int(self.x.size)

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.x.tolist(), self.y.tolist()))


def make_dataset(system_id: str, x, y, annotations: dict | None = None) -> Dataset:
    """Build a dataset, sorting observations by x first."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    order = np.argsort(x, kind="stable")
    return Dataset(system_id, x[order], y[order], dict(annotations or {}))


@dataclass(frozen=True, eq=False)
class DatasetCollection:
    """D datasets ordered by system id, plus a provenance manifest."""

    datasets: tuple[Dataset, ...]
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.datasets:
            raise EmptySystem("collection has no datasets")
        ids = [ds.system_id for ds in self.datasets]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate system ids in collection")

    def __iter__(self):
        return iter(self.datasets)

    def __len__(self) -> int:
        return len(self.datasets)

    @property
    def system_ids(self) -> list[str]:
        return [ds.system_id for ds in self.datasets]


def _sorted_collection(datasets: list[Dataset], manifest: dict) -> DatasetCollection:
    return DatasetCollection(tuple(sorted(datasets, key=lambda d: d.system_id)), manifest)


# ---------------------------------------------------------------------------
# CSV I/O


def load_csv(path) -> DatasetCollection:
    """Read the ``system_id,x,y`` schema; rows are grouped by system and
    sorted by x.  The manifest records the file's content hash."""
    with open(path, "rb") as fh:
        raw = fh.read()
    digest = hashlib.sha256(raw).hexdigest()
    text = raw.decode("utf-8")
    lines = text.splitlines()
    if not lines or lines[0].strip() != CSV_HEADER:
        raise SchemaError(f"expected header {CSV_HEADER!r}, got {lines[0]!r}" if lines
                          else "empty file")
    groups: dict[str, list[tuple[float, float]]] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != 3:
            raise SchemaError(f"line {lineno}: expected 3 cells, got {len(cells)}")
        sid = cells[0].strip()
        try:
            xv = float(cells[1])
            yv = float(cells[2])
        except ValueError as err:
            raise ValueError(f"line {lineno}: non-numeric cell ({err})") from None
        if not (math.isfinite(xv) and math.isfinite(yv)):
            raise ValueError(f"line {lineno}: non-finite value")
        groups.setdefault(sid, []).append((xv, yv))
    if not groups:
        raise EmptySystem("file has a header but no data rows")
    datasets = []
    for sid, pts in groups.items():
        xs = [p[0] for p in pts]
        ys = [p[1] for p in pts]
        datasets.append(make_dataset(sid, xs, ys))
    manifest = {"source": "csv", "path": str(path), "sha256": digest}
    return _sorted_collection(datasets, manifest)


def write_csv(collection: DatasetCollection, path) -> None:
    """Inverse of :func:`load_csv`; floats use shortest round-trip repr."""
    lines = [CSV_HEADER]
    for ds in collection:
        for xv, yv in zip(ds.x.tolist(), ds.y.tolist()):
            lines.append(f"{ds.system_id},{xv!r},{yv!r}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def write_annotations(collection: DatasetCollection, path) -> None:
    """Sidecar CSV: one row per system with its intrinsic annotations."""
    keys = sorted({k for ds in collection for k in ds.annotations})
    lines = [",".join(["system_id"] + keys)]
    for ds in collection:
        cells = [ds.system_id] + [repr(float(ds.annotations[k])) if k in ds.annotations else ""
                                  for k in keys]
        lines.append(",".join(cells))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# generators


def gen_exponential(
    n_systems: int,
    alpha_range=(0.01, 0.05),
    scale_range=(0.5, 2.0),
    offset_range=(1.0, 10.0),
    cycles: int = 150,
    noise_sd: float = 0.0,
    seed: int = 0,
) -> DatasetCollection:
    """Exponential degradation curves ``y = scale * exp(alpha*c) + offset``
    sampled at integer cycles ``c = 1..cycles``.

    Intrinsics draw uniformly from the given ranges (a range may be a single
    point); Gaussian noise has sd ``noise_sd`` times the system's noiseless
    y-range.  Annotations record the exact drawn values.
    """
    if n_systems < 1:
        raise ValueError("n_systems must be >= 1")
    if cycles < 2:
        raise ValueError("cycles must be >= 2")
    rng = np.random.default_rng(seed)
    width = len(str(n_systems - 1))
    c = np.arange(1.0, cycles + 1.0)
    datasets = []
    for i in range(n_systems):
        alpha = float(rng.uniform(*alpha_range))
        scale = float(rng.uniform(*scale_range))
        offset = float(rng.uniform(*offset_range))
        y = scale * np.exp(alpha * c) + offset
        if noise_sd > 0.0 and np.ptp(y) > 0:
            y = y + rng.normal(0.0, noise_sd * float(np.ptp(y)), size=c.size)
        datasets.append(Dataset(
            f"sys{i:0{width}d}", c.copy(), y,
            {"alpha": alpha, "scale": scale, "offset": offset},
        ))
    manifest = {
        "source": "gen_exponential",
        "n_systems": n_systems,
        "alpha_range": list(alpha_range),
        "scale_range": list(scale_range),
        "offset_range": list(offset_range),
        "cycles": cycles,
        "noise_sd": noise_sd,
        "seed": seed,
    }
    return _sorted_collection(datasets, manifest)


def projectile_height(x, g_value: float, launch_angle: float):
    """Trajectory height ``y = (sec(a)/G + tan(a)) x + ln(1 - x sec(a)/G)``;
    valid for ``x < G cos(a)``."""
    sec = 1.0 / math.cos(launch_angle)
    return (sec / g_value + math.tan(launch_angle)) * np.asarray(x) \
        + np.log(1.0 - np.asarray(x) * sec / g_value)


def gen_projectile(
    g_values,
    launch_angle: float,
    n_points: int = 50,
    x_max_fraction: float = 0.8,
    noise_sd: float = 0.0,
    seed: int = 0,
) -> DatasetCollection:
    """One trajectory per G value, sampled at ``n_points`` equally spaced x
    on ``(0, x_max_fraction * G * cos(angle)]``.

    ``launch_angle`` is in radians and shared by all systems.  Raises
    :class:`~sysform.expr.DomainError` when ``x_max_fraction >= 1`` (the
    trajectory is singular at ``x = G cos(angle)``).
    """
    g_values = [float(g) for g in g_values]
    if not g_values:
        raise ValueError("need at least one G value")
    if x_max_fraction >= 1.0:
        raise DomainError("x_max_fraction must be < 1: the log argument vanishes at 1")
    if x_max_fraction <= 0.0:
        raise ValueError("x_max_fraction must be positive")
    if n_points < 2:
        raise ValueError("n_points must be >= 2")
    rng = np.random.default_rng(seed)
    width = len(str(len(g_values) - 1))
    datasets = []
    for i, g in enumerate(g_values):
        x_max = x_max_fraction * g * math.cos(launch_angle)
        x = np.linspace(x_max / n_points, x_max, n_points)
        y = projectile_height(x, g, launch_angle)
        if noise_sd > 0.0 and np.ptp(y) > 0:
            y = y + rng.normal(0.0, noise_sd * float(np.ptp(y)), size=x.size)
        datasets.append(Dataset(
            f"sys{i:0{width}d}", x, y,
            {"G": g, "launch_angle": launch_angle},
        ))
    manifest = {
        "source": "gen_projectile",
        "g_values": list(g_values),
        "launch_angle": launch_angle,
        "n_points": n_points,
        "x_max_fraction": x_max_fraction,
        "noise_sd": noise_sd,
        "seed": seed,
    }
    return _sorted_collection(datasets, manifest)
