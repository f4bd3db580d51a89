import math

import numpy as np
import pytest

from sysform.data import gen_exponential, gen_projectile, make_dataset
from sysform.expr import canonical_string, compile_expression, parse
from sysform.fit import (
    AllFitsFailed,
    DEFAULT_OPTIONS,
    FitDiverged,
    FitOptions,
    NormStats,
    fit_all,
    fit_dataset,
    heuristic_start,
    lm_fit,
    pso_fit,
)
from sysform.transform import Template, dimensionalize


def exp_template():
    return dimensionalize(parse("exp(x)"))  # exp(t0*x)*t1 + t2


def exp_dataset(n=50, alpha=0.3, scale=2.0, offset=1.0, x_hi=10.0):
    x = np.linspace(0.0, x_hi, n)
    return make_dataset("e0", x, scale * np.exp(alpha * x) + offset)


class TestNormStats:
    def test_from_xy(self):
        s = NormStats.from_xy(np.array([1.0, 3.0]), np.array([2.0, 6.0]))
        assert (s.x_min, s.x_range, s.y_min, s.y_range) == (1.0, 2.0, 2.0, 4.0)
        assert not s.x_degenerate and not s.y_degenerate

    def test_degenerate_gets_unit_range(self):
        s = NormStats.from_xy(np.array([1.0, 2.0]), np.array([5.0, 5.0]))
        assert s.y_range == 1.0
        assert s.y_degenerate


class TestLmFit:
    def test_exponential_oracle(self):
        # noiseless y = 2 e^{0.3 x} + 1 from the heuristic start
        t = exp_template()
        ds = exp_dataset()
        theta0 = heuristic_start(t, ds.x, ds.y)
        theta, mse = lm_fit(t, ds, theta0)
        assert mse < 1e-12
        by_role = dict(zip(t.slot_roles, theta))
        assert abs(by_role["alpha"] - 0.3) < 1e-6
        assert abs(by_role["gamma"] - 2.0) < 1e-6
        assert abs(by_role["offset"] - 1.0) < 1e-6

    def test_exact_linear_recovery(self):
        t = Template.from_expression(parse("t0 + t1*x"))
        x = np.linspace(0, 1, 30)
        ds = make_dataset("lin", x, 3.0 * x + 0.5)
        theta, mse = lm_fit(t, ds, heuristic_start(t, ds.x, ds.y))
        assert mse < 1e-20
        assert np.allclose(theta, [0.5, 3.0], atol=1e-9)

    def test_domain_everywhere_invalid_diverges(self):
        # ln argument negative over the whole x range from the start point
        t = Template.from_expression(parse("ln(t0 + t1*x)"))
        x = np.linspace(1.0, 2.0, 20)
        ds = make_dataset("d", x, np.log(x))
        with pytest.raises(FitDiverged):
            lm_fit(t, ds, np.array([-10.0, 1.0]))

    def test_too_few_points(self):
        t = exp_template()
        with pytest.raises(ValueError):
            lm_fit(t, make_dataset("d", [0.0, 1.0], [1.0, 2.0]), np.ones(3))

    def test_nonfinite_start_rejected(self):
        t = Template.from_expression(parse("t0 + t1*x"))
        ds = make_dataset("d", [0.0, 1.0, 2.0], [0.0, 1.0, 2.0])
        with pytest.raises(ValueError):
            lm_fit(t, ds, np.array([np.nan, 1.0]))


class TestPsoFit:
    def test_matches_lm_on_unimodal(self, rng):
        t = Template.from_expression(parse("t0 + t1*x"))
        x = np.linspace(0, 1, 30)
        ds = make_dataset("lin", x, 3.0 * x + 0.5)
        theta_pso, _ = pso_fit(t, ds, None, rng)
        theta_lm, _ = lm_fit(t, ds, np.zeros(2))
        assert np.allclose(theta_pso, theta_lm, atol=1e-3)

    def test_zero_iterations_returns_best_initial(self):
        t = Template.from_expression(parse("t0 + t1*x"))
        x = np.linspace(0, 1, 30)
        ds = make_dataset("lin", x, 3.0 * x + 0.5)
        opts = FitOptions(pso_iterations=0)
        theta, mse = pso_fit(t, ds, None, np.random.default_rng(3), opts)
        # recompute the best initial particle by hand
        gen = np.random.default_rng(3)
        lo, hi = np.full(2, -10.0), np.full(2, 10.0)
        pos = gen.uniform(lo, hi, (opts.pso_particles, 2))
        f = compile_expression(t.expression)
        r = f(ds.x, pos) - ds.y
        mses = np.mean(r * r, axis=-1)
        k = int(np.argmin(mses))
        assert np.array_equal(theta, pos[k])
        assert mse == float(mses[k])

    def test_seed_determinism(self):
        t = exp_template()
        ds = exp_dataset(30, x_hi=3.0)
        a = pso_fit(t, ds, None, np.random.default_rng(11))
        b = pso_fit(t, ds, None, np.random.default_rng(11))
        assert np.array_equal(a[0], b[0]) and a[1] == b[1]

    def test_domain_failures_absorbed_as_penalty(self, rng):
        t = Template.from_expression(parse("ln(t0 + t1*x)"))
        x = np.linspace(1.0, 2.0, 20)
        ds = make_dataset("d", x, np.log(x))
        theta, mse = pso_fit(t, ds, None, rng)
        assert math.isfinite(mse)

    def test_requires_rng(self):
        with pytest.raises(ValueError):
            pso_fit(exp_template(), exp_dataset(), None, None)

    def test_explicit_bounds_shapes(self, rng):
        t = Template.from_expression(parse("t0 + t1*x"))
        x = np.linspace(0, 1, 30)
        ds = make_dataset("lin", x, 3.0 * x + 0.5)
        theta, mse = pso_fit(t, ds, (-5.0, 5.0), rng)
        assert mse < 1e-3
        per_slot = np.array([[-5.0, 5.0], [0.0, 4.0]])
        theta, mse = pso_fit(t, ds, per_slot, np.random.default_rng(2))
        assert mse < 1e-3
        with pytest.raises(ValueError):
            pso_fit(t, ds, (5.0, -5.0), rng)


class TestFitDataset:
    def test_winner_not_worse_than_any_attempt(self, rng):
        t = dimensionalize(parse("x + ln(x)"))
        coll = gen_projectile([2.0], np.deg2rad(40), 50, 0.8, 0.0, seed=0)
        theta, mse, attempts = fit_dataset(t, coll.datasets[0], rng, return_details=True)
        best_norm = min(a.mse for a in attempts)
        assert all(best_norm <= a.mse for a in attempts)
        # attempt order is the documented tie-break order: five LM, then PSO
        assert [a.method for a in attempts[:5]] == ["lm"] * 5

    def test_projectile_recovered_form(self, rng):
        coll = gen_projectile([2.0], np.deg2rad(40), 50, 0.8, 0.0, seed=0)
        t = dimensionalize(parse("x + ln(x)"))
        theta, mse = fit_dataset(t, coll.datasets[0], rng)
        assert mse < 1e-8

    def test_reported_mse_is_recomputed_raw(self, rng):
        t = exp_template()
        ds = exp_dataset()
        theta, mse = fit_dataset(t, ds, rng)
        f = compile_expression(t.expression)
        r = f(ds.x, theta) - ds.y
        again = float(np.mean(r * r))
        assert math.isclose(mse, again, rel_tol=1e-12, abs_tol=1e-300)

    def test_pso_skipped_when_lm_converges(self, rng):
        t = Template.from_expression(parse("t0 + t1*x"))
        x = np.linspace(0, 1, 30)
        ds = make_dataset("lin", x, 3.0 * x + 0.5)
        _, _, attempts = fit_dataset(t, ds, rng, return_details=True)
        assert all(a.method == "lm" for a in attempts)

    def test_strict_mode_always_runs_pso(self, rng):
        t = Template.from_expression(parse("t0 + t1*x"))
        x = np.linspace(0, 1, 30)
        ds = make_dataset("lin", x, 3.0 * x + 0.5)
        opts = FitOptions(pso_skip_mse=0.0)
        _, _, attempts = fit_dataset(t, ds, rng, opts, return_details=True)
        assert attempts[-1].method == "pso"

    def test_all_attempts_failed(self, rng):
        # ln(-1 - x^2) is outside the domain for every parameter choice
        t = Template.from_expression(parse("t0 + ln(0 - 1 - x^2)"))
        x = np.linspace(1.0, 2.0, 20)
        ds = make_dataset("d", x, np.log(x))
        with pytest.raises(AllFitsFailed):
            fit_dataset(t, ds, rng)


class TestFitAll:
    def test_single_dataset(self, rng):
        t = exp_template()
        res = fit_all(t, [exp_dataset()], rng)
        assert res.theta_matrix.shape == (1, 3)
        assert res.mean_l1 == res.per_dataset_l1[0]

    def test_identical_datasets_identical_rows(self, rng):
        t = Template.from_expression(parse("t0 + t1*x"))
        x = np.linspace(0, 1, 25)
        sets = [make_dataset(f"s{i}", x, 2.0 * x + 1.0) for i in range(4)]
        res = fit_all(t, sets, rng)
        for row in res.theta_matrix[1:]:
            assert np.allclose(row, res.theta_matrix[0], atol=1e-6)

    def test_exponential_family_roundtrip(self, rng):
        coll = gen_exponential(20, (0.01, 0.05), (0.5, 2.0), (1.0, 10.0),
                               cycles=150, noise_sd=0.0, seed=5)
        t = exp_template()
        res = fit_all(t, coll, rng)
        assert res.mean_l1 < 1e-8
        assert res.mean_l1 == pytest.approx(float(np.mean(res.per_dataset_l1)), rel=0)

    def test_failed_dataset_becomes_penalty_row(self, rng, monkeypatch):
        import sysform.fit as fit_mod

        def boom(*args, **kwargs):
            raise AllFitsFailed("forced")

        monkeypatch.setattr(fit_mod, "fit_dataset", boom)
        t = exp_template()
        res = fit_mod.fit_all(t, [exp_dataset()], rng)
        assert np.array_equal(res.theta_matrix, np.zeros((1, 3)))
        assert res.per_dataset_l1[0] == DEFAULT_OPTIONS.penalty_mse

    def test_doubling_y_scales_linear_slots(self):
        t = exp_template()
        ds = exp_dataset()
        ds2 = make_dataset("e2", ds.x, 2.0 * ds.y)
        th1, _ = fit_dataset(t, ds, np.random.default_rng(0))
        th2, _ = fit_dataset(t, ds2, np.random.default_rng(0))
        roles = t.slot_roles
        for i, role in enumerate(roles):
            if role == "alpha":
                assert th2[i] == pytest.approx(th1[i], rel=1e-5)
            else:  # gamma and offset scale with the output
                assert th2[i] == pytest.approx(2.0 * th1[i], rel=1e-5)

    def test_no_datasets_rejected(self, rng):
        with pytest.raises(ValueError):
            fit_all(exp_template(), [], rng)
