import numpy as np
import pytest

from sysform.fit import FitResult
from sysform.lmetric import (
    InsufficientSystems,
    TreeParams,
    best_split,
    l2_score,
    total_metric,
    tree_fit,
)


def brute_force_best_split(features, targets, min_leaf=2):
    """Independent oracle: enumerate all (feature, midpoint) splits."""
    n, k = features.shape
    parent = float(np.sum((targets - targets.mean()) ** 2))
    best = None
    for j in range(k):
        xs = np.sort(features[:, j], kind="stable")
        for i in range(min_leaf, n - min_leaf + 1):
            if xs[i - 1] >= xs[i]:
                continue
            thr = (xs[i - 1] + xs[i]) / 2.0
            if not xs[i - 1] <= thr < xs[i]:
                continue
            mask = features[:, j] <= thr
            left, right = targets[mask], targets[~mask]
            sse = float(np.sum((left - left.mean()) ** 2)
                        + np.sum((right - right.mean()) ** 2))
            reduction = parent - sse
            if best is None or reduction > best[2]:
                best = (j, thr, reduction)
    return best


class TestTreeFit:
    def test_constant_targets_single_leaf(self):
        x = np.arange(10.0).reshape(-1, 1)
        y = np.full(10, 3.5)
        tree = tree_fit(x, y)
        assert tree.root.is_leaf
        assert np.allclose(tree.predict(x), 3.5)
        assert float(np.mean((tree.predict(x) - y) ** 2)) == 0.0

    def test_step_function(self, rng):
        x = rng.uniform(-1, 1, 100).reshape(-1, 1)
        y = (x[:, 0] >= 0).astype(float)
        tree = tree_fit(x, y)
        # one split near zero, training data reproduced exactly
        assert not tree.root.is_leaf
        assert tree.root.left.is_leaf and tree.root.right.is_leaf
        assert abs(tree.root.threshold) < 0.2
        assert float(np.mean((tree.predict(x) - y) ** 2)) == 0.0
        # held-out error is bounded by the training gap around the step:
        # only points between the straddling training samples can miss
        below = x[x[:, 0] < 0, 0].max()
        above = x[x[:, 0] >= 0, 0].min()
        gap = above - below
        x_test = rng.uniform(-1, 1, 4000).reshape(-1, 1)
        y_test = (x_test[:, 0] >= 0).astype(float)
        mse = float(np.mean((tree.predict(x_test) - y_test) ** 2))
        assert mse <= max(1e-3, gap)

    def test_depth1_matches_brute_force(self):
        gen = np.random.default_rng(2024)
        for _ in range(50):
            x = gen.uniform(-2, 2, (20, 3))
            y = gen.normal(size=20)
            got = best_split(x, y, 2)
            want = brute_force_best_split(x, y, 2)
            assert got is not None and want is not None
            assert got[0] == want[0]
            assert got[1] == pytest.approx(want[1], rel=0, abs=0)
            assert got[2] == pytest.approx(want[2], rel=1e-9)

    def test_min_samples_leaf_respected(self):
        x = np.arange(6.0).reshape(-1, 1)
        y = np.array([0.0, 0, 0, 1, 1, 1])
        tree = tree_fit(x, y, TreeParams(max_depth=8, min_samples_leaf=3))
        # only one admissible split point
        assert tree.root.threshold == 2.5

    def test_input_validation(self):
        with pytest.raises(ValueError):
            tree_fit(np.empty((0, 1)), np.empty(0))
        with pytest.raises(ValueError):
            tree_fit(np.ones((3, 1)), np.ones(4))


class TestL2Score:
    def test_identical_systems_zero(self, rng):
        theta = np.tile([1.5, -2.0, 7.0], (50, 1))
        report = l2_score(theta, rng=rng)
        assert report.l2_total == 0.0
        assert all(c == 0.0 for c in report.contributions)

    def test_duplicated_column_nearly_free(self):
        gen = np.random.default_rng(8)
        t1 = gen.uniform(0, 1, 200)
        theta = np.column_stack([t1, t1])
        report = l2_score(theta, rng=np.random.default_rng(1))
        var1 = float(np.var(t1))
        assert report.contributions[1] < 0.05 * var1
        # and the duplicate column's contribution is a tiny fraction of slot 1's
        assert report.contributions[1] < 0.05 * report.contributions[0] * 10

    def test_independent_columns_no_spurious_structure(self):
        gen = np.random.default_rng(3)
        theta = gen.uniform(0, 1, (200, 3))
        report = l2_score(theta, rng=np.random.default_rng(2))
        test_rows = np.asarray(report.test_indices)
        bound = sum(float(np.var(theta[test_rows, k])) for k in range(3))
        assert report.l2_total <= 3.0 * bound
        assert report.l2_total >= bound / 3.0

    def test_insufficient_systems(self, rng):
        with pytest.raises(InsufficientSystems):
            l2_score(np.ones((7, 2)), rng=rng)

    def test_split_sizes(self, rng):
        report = l2_score(np.random.default_rng(0).normal(size=(10, 2)),
                          split_ratio=0.7, rng=rng)
        assert len(report.train_indices) == 7
        assert len(report.test_indices) == 3
        assert set(report.train_indices) | set(report.test_indices) == set(range(10))

    def test_deterministic_given_rng(self):
        theta = np.random.default_rng(5).normal(size=(40, 3))
        a = l2_score(theta, rng=np.random.default_rng(9))
        b = l2_score(theta, rng=np.random.default_rng(9))
        assert a == b

    def test_contributions_nonnegative_and_sum(self, rng):
        theta = np.random.default_rng(6).normal(size=(30, 4))
        report = l2_score(theta, rng=rng)
        assert all(c >= 0.0 for c in report.contributions)
        assert report.l2_total == pytest.approx(sum(report.contributions), rel=0)

    def test_bad_split_ratio(self, rng):
        with pytest.raises(ValueError):
            l2_score(np.ones((10, 2)), split_ratio=1.0, rng=rng)


class TestTotalMetric:
    def _fr(self, mean_l1):
        return FitResult(np.zeros((3, 2)), np.full(3, mean_l1), mean_l1)

    def test_zero_l2(self, rng):
        theta = np.tile([1.0, 2.0], (20, 1))
        report = l2_score(theta, rng=rng)
        assert total_metric(self._fr(0.25), report) == 0.25

    def test_single_dataset_reduces_to_l1(self):
        assert total_metric(self._fr(0.7), None) == 0.7

    def test_sum(self, rng):
        theta = np.random.default_rng(4).normal(size=(20, 2))
        report = l2_score(theta, rng=rng)
        assert total_metric(self._fr(1.5), report) == pytest.approx(
            1.5 + report.l2_total, rel=0)
