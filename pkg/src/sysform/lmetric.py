"""The candidate-ranking metric L = L1 + L2.

L1 is the mean over systems of the per-system mean squared fit residual
(raw units), produced by the fitting layer.  L2 sums, over parameter slots,
the held-out mean squared error of predicting each slot's fitted values
across systems from the slots before it: slot 0 from its training mean,
slot k from slots 0..k-1 through a small regression tree.  Strongly
dependent parameters predict each other, contributing nearly nothing, so L2
acts as a proxy for the number of independent hidden properties.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "TreeParams",
    "RegressionTree",
    "L2Report",
    "InsufficientSystems",
    "tree_fit",
    "l2_score",
    "total_metric",
    "MIN_SYSTEMS_FOR_L2",
]

MIN_SYSTEMS_FOR_L2 = 8


class InsufficientSystems(ValueError):
    """Fewer systems than needed for a meaningful train/test split."""


@dataclass(frozen=True)
class TreeParams:
    max_depth: int = 4
    min_samples_leaf: int = 2


@dataclass(frozen=True)
class _Node:
    feature: int = -1
    threshold: float = 0.0
    left: "_Node | None" = None
    right: "_Node | None" = None
    value: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.left is None


@dataclass(frozen=True)
class RegressionTree:
    """CART regression tree: axis-aligned splits, leaf = mean of its targets."""

    root: _Node
    params: TreeParams

    def predict(self, features: np.ndarray) -> np.ndarray:
        features = np.atleast_2d(np.asarray(features, dtype=float))
        out = np.empty(features.shape[0])

        def walk(node: _Node, idx: np.ndarray) -> None:
            if node.is_leaf:
                out[idx] = node.value
                return
            mask = features[idx, node.feature] <= node.threshold
            walk(node.left, idx[mask])
            walk(node.right, idx[~mask])

        walk(self.root, np.arange(features.shape[0]))
        return out


def best_split(features: np.ndarray, targets: np.ndarray, min_samples_leaf: int):
    """Greedy best axis-aligned split by sum-of-squared-error reduction.

    Candidate thresholds are midpoints between consecutive distinct sorted
    values; ties resolve to the lowest feature index, then lowest threshold.
    Returns ``(feature, threshold, sse_reduction)`` or ``None``.
    """
    n, k = features.shape
    parent_sse = float(np.sum((targets - targets.mean()) ** 2))
    best = None
    for j in range(k):
        order = np.argsort(features[:, j], kind="stable")
        xs = features[order, j]
        ys = targets[order]
        csum = np.cumsum(ys)
        csum2 = np.cumsum(ys * ys)
        total, total2 = csum[-1], csum2[-1]
        for i in range(min_samples_leaf, n - min_samples_leaf + 1):
            if xs[i - 1] >= xs[i]:
                continue
            threshold = (xs[i - 1] + xs[i]) / 2.0
            if not xs[i - 1] <= threshold < xs[i]:
                continue  # adjacent floats: the midpoint fails to separate
            sse_left = csum2[i - 1] - csum[i - 1] ** 2 / i
            nr = n - i
            sse_right = (total2 - csum2[i - 1]) - (total - csum[i - 1]) ** 2 / nr
            reduction = parent_sse - (sse_left + sse_right)
            if best is None or reduction > best[2]:
                best = (j, threshold, float(reduction))
    return best


def tree_fit(
    features: np.ndarray,
    targets: np.ndarray,
    params: TreeParams = TreeParams(),
    rng=None,
) -> RegressionTree:
    """Grow a CART tree; deterministic, ``rng`` accepted for interface
    uniformity but unused (ties are broken by feature/threshold order)."""
    features = np.atleast_2d(np.asarray(features, dtype=float))
    targets = np.asarray(targets, dtype=float)
    if features.shape[0] < 1 or features.shape[1] < 1:
        raise ValueError("need at least one sample and one feature")
    if features.shape[0] != targets.shape[0]:
        raise ValueError("features and targets disagree on sample count")

    def grow(rows: np.ndarray, depth: int) -> _Node:
        y = targets[rows]
        leaf = _Node(value=float(y.mean()))
        if depth >= params.max_depth or rows.size < 2 * params.min_samples_leaf:
            return leaf
        if float(np.var(y)) == 0.0:
            return leaf
        split = best_split(features[rows], y, params.min_samples_leaf)
        if split is None or split[2] <= 0.0:
            return leaf
        j, thr, _ = split
        mask = features[rows, j] <= thr
        if not mask.any() or mask.all():
            return leaf
        return _Node(
            feature=j,
            threshold=thr,
            left=grow(rows[mask], depth + 1),
            right=grow(rows[~mask], depth + 1),
            value=leaf.value,
        )

    return RegressionTree(grow(np.arange(features.shape[0]), 0), params)


@dataclass(frozen=True)
class L2Report:
    """Per-slot held-out MSE contributions and their sum."""

    contributions: tuple[float, ...]
    l2_total: float
    train_indices: tuple[int, ...]
    test_indices: tuple[int, ...]
    split_ratio: float


def l2_score(
    theta_matrix: np.ndarray,
    split_ratio: float = 0.7,
    rng=None,
    tree_params: TreeParams = TreeParams(),
) -> L2Report:
    """Chain-score the fitted parameter matrix (rows = systems, columns =
    slots in canonical template order).

    Rows are shuffled by ``rng`` and split train/test by ``split_ratio``.
    Slot 0's contribution is the test MSE of the train-mean predictor; slot
    k's is the test MSE of a tree predicting it from slots 0..k-1.  All in
    raw units.  Raises :class:`InsufficientSystems` when D < 8.
    """
    theta = np.atleast_2d(np.asarray(theta_matrix, dtype=float))
    d, t = theta.shape
    if d < MIN_SYSTEMS_FOR_L2:
        raise InsufficientSystems(f"need at least {MIN_SYSTEMS_FOR_L2} systems, got {d}")
    if not 0.0 < split_ratio < 1.0:
        raise ValueError("split_ratio must be in (0, 1)")
    if rng is None:
        rng = np.random.default_rng(0)
    perm = rng.permutation(d)
    n_train = min(max(int(round(split_ratio * d)), 1), d - 1)
    train, test = perm[:n_train], perm[n_train:]

    contributions = []
    mean0 = float(theta[train, 0].mean())
    contributions.append(float(np.mean((theta[test, 0] - mean0) ** 2)))
    for k in range(1, t):
        tree = tree_fit(theta[train, :k], theta[train, k], tree_params)
        pred = tree.predict(theta[test, :k])
        contributions.append(float(np.mean((theta[test, k] - pred) ** 2)))

    return L2Report(
        contributions=tuple(contributions),
        l2_total=float(sum(contributions)),
        train_indices=tuple(int(i) for i in train),
        test_indices=tuple(int(i) for i in test),
        split_ratio=split_ratio,
    )


def total_metric(fit_result, l2_report: L2Report | None) -> float:
    """L = L1 + L2; with no L2 report (single dataset) L reduces to L1."""
    if l2_report is None:
        return float(fit_result.mean_l1)
    return float(fit_result.mean_l1 + l2_report.l2_total)
