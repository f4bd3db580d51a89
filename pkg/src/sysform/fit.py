"""Curve fitting of templates to datasets.

Two fitters are provided: a Levenberg-Marquardt local optimizer with
central-difference Jacobians, and a particle swarm with a final LM polish.
:func:`fit_dataset` runs both from several starts on min-max normalized data
and maps the winner back to raw units analytically; :func:`fit_all` repeats
that over every dataset of a collection and aggregates the L1 statistic
(mean over systems of the per-system mean squared residual, in raw units).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import reduce

import numpy as np

from .expr import Binary, Param, Power, compile_expression
from .simplify import decompose_sum
from .transform import (
    Template,
    UnnormalizableTemplate,
    can_unnormalize,
    canonicalize_gauge,
    unnormalize_params,
)

__all__ = [
    "NormStats",
    "FitOptions",
    "FitResult",
    "FitDiverged",
    "AllFitsFailed",
    "DEFAULT_OPTIONS",
    "lm_fit",
    "pso_fit",
    "fit_dataset",
    "fit_all",
    "heuristic_start",
]


class FitDiverged(RuntimeError):
    """Every probed step produced a domain error or non-finite objective."""


class AllFitsFailed(RuntimeError):
    """No fit attempt produced a finite, sub-penalty objective."""


@dataclass(frozen=True)
class NormStats:
    """Per-dataset min-max statistics; degenerate ranges are clamped to 1."""

    x_min: float
    x_range: float
    y_min: float
    y_range: float
    x_degenerate: bool = False
    y_degenerate: bool = False

    @classmethod
    def from_xy(cls, x: np.ndarray, y: np.ndarray) -> "NormStats":
        xr = float(np.max(x) - np.min(x))
        yr = float(np.max(y) - np.min(y))
        return cls(
            x_min=float(np.min(x)),
            x_range=xr if xr > 0.0 else 1.0,
            y_min=float(np.min(y)),
            y_range=yr if yr > 0.0 else 1.0,
            x_degenerate=xr <= 0.0,
            y_degenerate=yr <= 0.0,
        )

    @classmethod
    def identity(cls) -> "NormStats":
        return cls(0.0, 1.0, 0.0, 1.0)


@dataclass(frozen=True)
class FitOptions:
    """Fitting knobs; the defaults are the documented contract."""

    lm_max_iter: int = 200
    lm_lambda0: float = 1e-3
    lm_rel_tol: float = 1e-10
    lm_grad_tol: float = 1e-10
    fd_step: float = 1e-6
    lm_fail_streak: int = 10
    multistart_random: int = 4
    start_spread: float = 2.0
    probes_per_start: int = 32
    pso_particles: int = 40
    pso_iterations: int = 150
    pso_inertia: float = 0.729
    pso_cognitive: float = 1.494
    pso_social: float = 1.494
    pso_bound: float = 10.0
    penalty_mse: float = 1e6
    # Skip the swarm when LM already reached this normalized mse; the swarm
    # cannot improve a fit at numeric noise level.  Set to 0 to always run it.
    pso_skip_mse: float = 1e-12
    normalize: bool = True


DEFAULT_OPTIONS = FitOptions()


@dataclass(frozen=True)
class FitResult:
    """Raw-unit fitted parameters and L1 statistics for D datasets."""

    theta_matrix: np.ndarray   # (D, T)
    per_dataset_l1: np.ndarray  # (D,)
    mean_l1: float

    def __post_init__(self):
        if not (np.all(np.isfinite(self.theta_matrix))
                and np.all(np.isfinite(self.per_dataset_l1))):
            raise ValueError("fit result entries must be finite")
        if self.mean_l1 != float(np.mean(self.per_dataset_l1)):
            raise ValueError("mean_l1 must equal the mean of per_dataset_l1")

    @property
    def n_datasets(self) -> int:
        return self.theta_matrix.shape[0]


@dataclass(frozen=True)
class FitAttempt:
    method: str
    theta: np.ndarray
    mse: float


# ---------------------------------------------------------------------------
# prediction helpers


def _predict(f, x: np.ndarray, theta: np.ndarray) -> np.ndarray:
    out = np.asarray(f(x, theta), dtype=float)
    return np.broadcast_to(out, x.shape) if out.shape != x.shape else out


def _predict_batch(f, x: np.ndarray, thetas: np.ndarray) -> np.ndarray:
    out = np.asarray(f(x, thetas), dtype=float)
    shape = (thetas.shape[0], x.size)
    return np.broadcast_to(out, shape) if out.shape != shape else out


def _mse_batch(f, x, y, thetas, penalty: float) -> np.ndarray:
    r = _predict_batch(f, x, thetas) - y
    mse = np.mean(r * r, axis=-1)
    return np.where(np.isfinite(mse), mse, penalty)


# ---------------------------------------------------------------------------
# Levenberg-Marquardt


def lm_fit(template: Template, dataset, theta0, options: FitOptions = DEFAULT_OPTIONS):
    """Local least-squares fit; returns ``(theta, mse)`` in the dataset's units.

    Central-difference Jacobians with step ``max(h, h*|theta_i|)``; damping
    starts at ``lm_lambda0``, grows 10x on rejected steps and shrinks 10x on
    accepted ones.  Stops on relative mse improvement below ``lm_rel_tol``,
    gradient infinity-norm below ``lm_grad_tol``, or ``lm_max_iter``
    iterations.  Raises :class:`FitDiverged` after ``lm_fail_streak``
    consecutive iterations with no finite step.
    """
    x, y = dataset.x, dataset.y
    if x.size < template.param_count:
        raise ValueError(
            f"dataset has {x.size} points, template needs at least {template.param_count}"
        )
    theta0 = np.asarray(theta0, dtype=float)
    if not np.all(np.isfinite(theta0)):
        raise ValueError("theta0 must be finite")
    f = compile_expression(template.expression)
    with np.errstate(all="ignore"):
        return _lm_core(f, x, y, theta0.copy(), options)


def _lm_core(f, x, y, theta, opts: FitOptions):
    t = theta.size
    r = _predict(f, x, theta) - y
    mse = float(np.mean(r * r))
    lam = opts.lm_lambda0
    streak = 0
    idx = np.arange(t)

    for _ in range(opts.lm_max_iter):
        jac = None
        if math.isfinite(mse):
            h = np.maximum(opts.fd_step, opts.fd_step * np.abs(theta))
            probes = np.repeat(theta[None, :], 2 * t, axis=0)
            probes[idx, idx] += h
            probes[t + idx, idx] -= h
            fvals = _predict_batch(f, x, probes)
            jac = (fvals[:t] - fvals[t:]).T / (2.0 * h)
            if not np.all(np.isfinite(jac)):
                jac = None

        accepted = False
        finite_trial = False
        improvement = 0.0
        if jac is not None:
            a = jac.T @ jac
            g = jac.T @ r
            if float(np.max(np.abs(g))) < opts.lm_grad_tol:
                break
            diag = np.clip(np.diag(a).copy(), 1e-12, None)
            while True:
                try:
                    delta = np.linalg.solve(a + lam * np.diag(diag), -g)
                except np.linalg.LinAlgError:
                    delta = None
                if delta is not None and np.all(np.isfinite(delta)):
                    trial = theta + delta
                    rt = _predict(f, x, trial) - y
                    mse_t = float(np.mean(rt * rt))
                    if math.isfinite(mse_t):
                        finite_trial = True
                        if mse_t < mse:
                            improvement = mse - mse_t
                            theta, r, mse = trial, rt, mse_t
                            lam = max(lam / 10.0, 1e-12)
                            accepted = True
                            break
                lam *= 10.0
                if lam > 1e12:
                    break

        if accepted:
            streak = 0
            if mse == 0.0 or improvement <= opts.lm_rel_tol * (mse + improvement):
                break
        elif finite_trial:
            break  # stalled: damping exhausted without a better finite step
        else:
            streak += 1
            if streak >= opts.lm_fail_streak:
                raise FitDiverged(
                    f"no finite step for {streak} consecutive iterations"
                )

    if not math.isfinite(mse):
        raise FitDiverged("objective is non-finite at the final point")
    return theta, mse


# ---------------------------------------------------------------------------
# particle swarm


def pso_fit(template: Template, dataset, bounds=None, rng=None,
            options: FitOptions = DEFAULT_OPTIONS):
    """Swarm search over a box; returns ``(theta, mse)``.

    Positions violating the template's domain receive ``penalty_mse``.  The
    best particle is refined by one LM call (hybrid polish) whenever the
    iteration budget is positive.  Deterministic for a fixed ``rng``.
    """
    if rng is None:
        raise ValueError("pso_fit needs an explicit numpy Generator")
    t = template.param_count
    if bounds is None:
        lo = np.full(t, -options.pso_bound)
        hi = np.full(t, options.pso_bound)
    else:
        b = np.asarray(bounds, dtype=float)
        if b.shape == (2,):
            lo, hi = np.full(t, b[0]), np.full(t, b[1])
        else:
            lo, hi = b[:, 0].copy(), b[:, 1].copy()
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi)) and np.all(hi > lo)):
        raise ValueError("bounds must be finite with hi > lo")

    x, y = dataset.x, dataset.y
    f = compile_expression(template.expression)
    s = options.pso_particles
    vmax = (hi - lo) / 2.0

    with np.errstate(all="ignore"):
        pos = rng.uniform(lo, hi, size=(s, t))
        vel = rng.uniform(-vmax, vmax, size=(s, t))
        val = _mse_batch(f, x, y, pos, options.penalty_mse)
        pbest = pos.copy()
        pbest_val = val.copy()
        k = int(np.argmin(pbest_val))
        gbest = pbest[k].copy()
        gbest_val = float(pbest_val[k])

        for _ in range(options.pso_iterations):
            r1 = rng.random((s, t))
            r2 = rng.random((s, t))
            vel = (
                options.pso_inertia * vel
                + options.pso_cognitive * r1 * (pbest - pos)
                + options.pso_social * r2 * (gbest - pos)
            )
            np.clip(vel, -vmax, vmax, out=vel)
            pos = pos + vel
            val = _mse_batch(f, x, y, pos, options.penalty_mse)
            better = val < pbest_val
            pbest[better] = pos[better]
            pbest_val[better] = val[better]
            k = int(np.argmin(pbest_val))
            if float(pbest_val[k]) < gbest_val:
                gbest = pbest[k].copy()
                gbest_val = float(pbest_val[k])

        if options.pso_iterations > 0:
            try:
                polished, mse_p = _lm_core(f, x, y, gbest.copy(), options)
                if mse_p < gbest_val:
                    gbest, gbest_val = polished, mse_p
            except FitDiverged:
                pass

    return gbest, float(gbest_val)


# ---------------------------------------------------------------------------
# multi-start orchestration


def heuristic_start(template: Template, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Start point from a linear pre-fit: slope and offset slots seeded from
    the least-squares line, x-scale slots from the data span, 1 elsewhere."""
    span = float(np.max(x) - np.min(x))
    if span > 0.0:
        slope, intercept = np.polyfit(x, y, 1)
    else:
        slope, intercept = 0.0, float(np.mean(y))
    theta = np.ones(template.param_count)
    rate = 1.0 / max(span, 1.0)
    for i, role in enumerate(template.slot_roles):
        if role == "alpha":
            theta[i] = rate
    if template.linear_slot is not None:
        theta[template.linear_slot] = slope
    if template.offset_slot is not None:
        theta[template.offset_slot] = intercept
    return theta


@dataclass(frozen=True)
class _Scaled:
    """Dataset view in normalized coordinates."""

    x: np.ndarray
    y: np.ndarray


# ---------------------------------------------------------------------------
# seeded-random starts
#
# Random start points are drawn as probes over the nonlinear slots with the
# top-level linear slots (term coefficients and the offset) solved by least
# squares given the probe -- a variable-projection seeding.  The best probes
# by residual become the LM start points.


@dataclass(frozen=True)
class _VarproStruct:
    column_slots: tuple[int, ...]
    column_fns: tuple
    fixed_fns: tuple
    offset_slot: int | None


_VARPRO_CACHE: dict = {}


def _varpro_struct(template: Template) -> _VarproStruct | None:
    key = template.expression
    if key in _VARPRO_CACHE:
        return _VARPRO_CACHE[key]
    cols: list[tuple[int, object]] = []
    fixed = []
    offset = None
    for term in decompose_sum(template.expression):
        slot = None
        if len(term.pieces) == 1 and term.pieces[0][1] == 1 and isinstance(term.pieces[0][0], Param):
            slot = term.pieces[0][0].index
        if not term.factors:
            if slot is not None:
                offset = slot
            continue
        prod = reduce(
            lambda a, b: Binary("mul", a, b),
            [base if n == 1 else Power(base, n) for base, n in term.factors],
        )
        if slot is not None and term.cval == 1.0:
            cols.append((slot, compile_expression(prod)))
        else:
            full = prod if term.cval == 1.0 else Binary("mul", _const(term.cval), prod)
            for base, n in term.pieces:
                full = Binary("mul", full, base if n == 1 else Power(base, n))
            fixed.append(compile_expression(full))
    slots = [s for s, _ in cols]
    struct = None
    if (cols or offset is not None) and len(set(slots)) == len(slots):
        struct = _VarproStruct(tuple(slots), tuple(fn for _, fn in cols),
                               tuple(fixed), offset)
    _VARPRO_CACHE[key] = struct
    return struct


def _const(v: float):
    from .expr import Const

    return Const(v)


def _seeded_starts(template: Template, x, y, rng, options: FitOptions) -> list[np.ndarray]:
    """Draw the seeded-random LM start points from ``rng``."""
    t = template.param_count
    n_starts = options.multistart_random
    struct = _varpro_struct(template)
    n_probes = n_starts * options.probes_per_start
    probes = rng.uniform(-options.start_spread, options.start_spread, (n_probes, t))
    # widen every third probe: normalized-space parameters occasionally live
    # well outside the base spread (steep exponentials, high curvature)
    probes[2::3] *= 3.0
    if struct is None:
        return [probes[i] for i in range(n_starts)]

    k = len(struct.column_slots) + (struct.offset_slot is not None)
    cols = np.empty((probes.shape[0], x.size, k))
    for j, fn in enumerate(struct.column_fns):
        cols[:, :, j] = _predict_batch(fn, x, probes)
    if struct.offset_slot is not None:
        cols[:, :, -1] = 1.0
    target = np.broadcast_to(y, (probes.shape[0], x.size)).astype(float).copy()
    for fn in struct.fixed_fns:
        target -= _predict_batch(fn, x, probes)

    ok = np.all(np.isfinite(cols), axis=(1, 2)) & np.all(np.isfinite(target), axis=1)
    mses = np.full(probes.shape[0], np.inf)
    filled = probes.copy()
    if np.any(ok):
        gram = np.einsum("pnk,pnl->pkl", cols[ok], cols[ok])
        gram += 1e-10 * np.eye(k)
        rhs = np.einsum("pnk,pn->pk", cols[ok], target[ok])
        try:
            coef = np.linalg.solve(gram, rhs[..., None])[..., 0]
        except np.linalg.LinAlgError:
            coef = np.stack([np.linalg.lstsq(g, b, rcond=None)[0] for g, b in zip(gram, rhs)])
        resid = np.einsum("pnk,pk->pn", cols[ok], coef) - target[ok]
        mse_ok = np.mean(resid * resid, axis=1)
        mse_ok = np.where(np.isfinite(mse_ok), mse_ok, np.inf)
        sub = filled[ok]
        for j, slot in enumerate(struct.column_slots):
            sub[:, slot] = coef[:, j]
        if struct.offset_slot is not None:
            sub[:, struct.offset_slot] = coef[:, -1]
        filled[ok] = sub
        mses[ok] = mse_ok

    order = np.argsort(mses, kind="stable")[:n_starts]
    starts = [filled[i] for i in order if math.isfinite(mses[i])]
    for i in range(n_starts - len(starts)):
        starts.append(probes[i])
    return starts


def fit_dataset(template: Template, dataset, rng, options: FitOptions = DEFAULT_OPTIONS,
                return_details: bool = False):
    """Fit one dataset: LM from five starts (one heuristic, four random) plus
    the swarm; the attempt with minimum mse wins, ties by attempt order.

    Fitting runs on min-max normalized data when the template supports the
    analytic raw-unit recovery; the returned ``(theta, mse)`` are always in
    raw units, with mse recomputed on the raw data.  Raises
    :class:`AllFitsFailed` when every attempt diverged.
    """
    x_raw, y_raw = dataset.x, dataset.y
    if x_raw.size < template.param_count:
        raise AllFitsFailed(
            f"dataset has {x_raw.size} points, template needs {template.param_count}"
        )
    norm = NormStats.from_xy(x_raw, y_raw)
    use_norm = options.normalize and can_unnormalize(template)
    if use_norm:
        data = _Scaled(
            (x_raw - norm.x_min) / norm.x_range,
            (y_raw - norm.y_min) / norm.y_range,
        )
    else:
        data = _Scaled(x_raw, y_raw)
        norm = NormStats.identity()

    attempts: list[FitAttempt] = []
    starts = [heuristic_start(template, data.x, data.y)]
    with np.errstate(all="ignore"):
        starts.extend(_seeded_starts(template, data.x, data.y, rng, options))
    for theta0 in starts:
        try:
            theta, mse = lm_fit(template, data, theta0, options)
        except FitDiverged:
            theta, mse = np.asarray(theta0, float), math.inf
        attempts.append(FitAttempt("lm", theta, mse))

    best = min(a.mse for a in attempts)
    if not best < options.pso_skip_mse:
        theta, mse = pso_fit(template, data, None, rng, options)
        attempts.append(FitAttempt("pso", theta, mse))

    winner = min(attempts, key=lambda a: a.mse)
    if not math.isfinite(winner.mse) or winner.mse >= options.penalty_mse:
        raise AllFitsFailed("every fit attempt diverged or hit the penalty")

    try:
        theta_raw = unnormalize_params(template, winner.theta, norm)
        if not np.all(np.isfinite(theta_raw)):
            raise AllFitsFailed("raw-unit parameters overflow")
        theta_raw = canonicalize_gauge(template, theta_raw)
    except (UnnormalizableTemplate, OverflowError, ZeroDivisionError) as err:
        raise AllFitsFailed(f"cannot express the fit in raw units: {err}") from err
    f = compile_expression(template.expression)
    with np.errstate(all="ignore"):
        r = _predict(f, x_raw, theta_raw) - y_raw
        mse_raw = float(np.mean(r * r))
    if not math.isfinite(mse_raw):
        raise AllFitsFailed("raw-unit residual is non-finite after unnormalization")

    if return_details:
        return theta_raw, mse_raw, attempts
    return theta_raw, mse_raw


def fit_all(template: Template, datasets, rng, options: FitOptions = DEFAULT_OPTIONS) -> FitResult:
    """Fit every dataset independently and aggregate the L1 statistic.

    Each dataset gets its own child random stream, spawned from ``rng`` in
    dataset order, so results do not depend on evaluation interleaving.
    Datasets whose every attempt diverged contribute a penalty row (zero
    parameters, penalty mse) instead of failing the whole candidate.
    """
    datasets = list(datasets)
    if not datasets:
        raise ValueError("need at least one dataset")
    streams = rng.spawn(len(datasets))
    rows = []
    l1 = []
    for ds, stream in zip(datasets, streams):
        try:
            theta, mse = fit_dataset(template, ds, stream, options)
        except AllFitsFailed:
            theta = np.zeros(template.param_count)
            mse = options.penalty_mse
        rows.append(theta)
        l1.append(mse)
    theta_matrix = np.vstack(rows)
    per_dataset = np.asarray(l1, dtype=float)
    return FitResult(theta_matrix, per_dataset, float(np.mean(per_dataset)))
