"""Dimension-consistency transformation of raw candidates into fit templates.

Every variable occurrence becomes an affine group ``a*x + b``, every analytic
operator and power gains a scale coefficient, numeric constants are freed
into parameter slots, and a global offset is added.  The result is reduced
to irreducible form, so a candidate like ``exp(x)`` becomes the template
``t0 + t1*exp(t2*x)`` with three parameters.

Templates fitted against min-max normalized data can be mapped back to raw
units analytically: the transformed family is closed under affine changes of
both axes, and :func:`unnormalize_params` computes the slot values realizing
that change.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .expr import (
    Binary,
    Const,
    Expression,
    Param,
    Power,
    Unary,
    Var,
    canonical_string,
    max_param_index,
    slot_indices,
)
from .simplify import Term, decompose_sum, simplify

__all__ = [
    "Template",
    "UnnormalizableTemplate",
    "dimensionalize",
    "unnormalize_params",
    "can_unnormalize",
    "canonicalize_gauge",
    "ROLE_ALPHA",
    "ROLE_BETA",
    "ROLE_GAMMA",
    "ROLE_OFFSET",
    "ROLE_FREED",
]

ROLE_ALPHA = "alpha"      # scales x (affine groups, exp rates, linear slopes)
ROLE_BETA = "beta"        # shifts x inside an operator argument
ROLE_GAMMA = "gamma"      # scales an operator or a whole term
ROLE_OFFSET = "offset"    # the global output offset
ROLE_FREED = "freed-constant"  # anything not matching the patterns above


class UnnormalizableTemplate(ValueError):
    """The template's slots cannot express the requested affine change of
    variables; only possible for hand-written templates."""


@dataclass(frozen=True)
class Template:
    """A canonical parameterized expression plus per-slot metadata."""

    expression: Expression
    param_count: int
    slot_roles: tuple[str, ...]
    top_level_linear: frozenset[int]

    @classmethod
    def from_expression(cls, expr: Expression) -> "Template":
        """Build a template from any slot-bearing expression.

        The expression is simplified to canonical form first, which also
        renumbers slots contiguously.
        """
        canon = simplify(expr)
        t = max_param_index(canon) + 1
        if t < 1:
            raise ValueError("a template needs at least one parameter slot")
        roles, top_linear = _analyze_roles(canon, t)
        return cls(canon, t, roles, frozenset(top_linear))

    @property
    def offset_slot(self) -> int | None:
        for i, role in enumerate(self.slot_roles):
            if role == ROLE_OFFSET:
                return i
        return None

    @property
    def linear_slot(self) -> int | None:
        """Slot multiplying a bare top-level ``x`` term, if any."""
        for i, role in enumerate(self.slot_roles):
            if role == ROLE_ALPHA and i in self.top_level_linear:
                return i
        return None

    def role_map(self) -> dict[int, str]:
        return dict(enumerate(self.slot_roles))


def dimensionalize(candidate: Expression) -> Template:
    """Insert extrinsic parameters into a raw candidate and simplify.

    Rules: ``x -> a*x + b`` per occurrence, operator ``O -> g*O`` for the
    analytic operators and powers, each numeric constant becomes a fresh
    slot, and a global offset is added.  Slots already present (templates
    fed back in) are kept, which makes the transform idempotent in effect.
    """
    counter = itertools.count(max_param_index(candidate) + 1)

    def fresh() -> Param:
        return Param(next(counter))

    def walk(e: Expression) -> Expression:
        if isinstance(e, Var):
            return Binary("add", Binary("mul", fresh(), Var()), fresh())
        if isinstance(e, Const):
            return fresh()
        if isinstance(e, Param):
            return e
        if isinstance(e, Binary):
            return Binary(e.op, walk(e.left), walk(e.right))
        if isinstance(e, Unary):
            return Binary("mul", fresh(), Unary(e.op, walk(e.child)))
        return Binary("mul", fresh(), Power(walk(e.base), e.exponent))

    lifted = Binary("add", walk(candidate), fresh())
    template = Template.from_expression(lifted)
    if template.offset_slot is None:
        raise RuntimeError("dimensionalize lost its offset slot; this is a bug")
    return template


# ---------------------------------------------------------------------------
# slot roles


def _single_slot(term: Term) -> int | None:
    """Slot index when the term coefficient is exactly one first-power slot."""
    if len(term.pieces) == 1 and term.pieces[0][1] == 1 and isinstance(term.pieces[0][0], Param):
        return term.pieces[0][0].index
    return None


def _is_bare_x(term: Term) -> bool:
    return len(term.factors) == 1 and isinstance(term.factors[0][0], Var) and term.factors[0][1] == 1


def _analyze_roles(canon: Expression, t: int):
    roles = [ROLE_FREED] * t
    top_linear: set[int] = set()

    def tag(idx: int | None, role: str) -> None:
        if idx is not None and roles[idx] == ROLE_FREED:
            roles[idx] = role

    def walk_sum(e: Expression, top: bool) -> None:
        for term in decompose_sum(e):
            slot = _single_slot(term)
            if not term.factors:
                tag(slot, ROLE_OFFSET if top else ROLE_BETA)
                if top and slot is not None:
                    top_linear.add(slot)
            elif _is_bare_x(term):
                tag(slot, ROLE_ALPHA)
                if top and slot is not None:
                    top_linear.add(slot)
            else:
                tag(slot, ROLE_GAMMA)
                if top and slot is not None:
                    top_linear.add(slot)
            for base, _n in term.factors:
                if isinstance(base, Unary):
                    walk_sum(base.child, False)
                elif isinstance(base, Binary):
                    walk_sum(base, False)

    walk_sum(canon, True)
    return tuple(roles), top_linear


# ---------------------------------------------------------------------------
# analytic unnormalization


def unnormalize_params(template: Template, theta_hat, norm) -> np.ndarray:
    """Map parameters fitted on normalized data back to raw units.

    ``norm`` holds the per-dataset min-max statistics (``x_min``,
    ``x_range``, ``y_min``, ``y_range``).  The returned vector satisfies
    ``f(x; theta) == y_min + y_range * f((x - x_min)/x_range; theta_hat)``
    for all x where the template is defined.

    Raises :class:`UnnormalizableTemplate` when a slot role cannot express
    the affine change of variables; this cannot happen for templates
    produced by :func:`dimensionalize`.
    """
    th = np.asarray(theta_hat, dtype=float)
    if th.shape != (template.param_count,):
        raise ValueError(f"theta has shape {th.shape}, template needs ({template.param_count},)")
    p = 1.0 / norm.x_range
    q = -norm.x_min / norm.x_range
    m = norm.y_range
    c = norm.y_min
    if p == 1.0 and q == 0.0 and m == 1.0 and c == 0.0:
        return th.copy()
    if any(n > 1 for n in slot_indices(template.expression).values()):
        raise UnnormalizableTemplate("template reuses a slot; cannot rescale analytically")
    out = th.copy()
    _pull_top(template.expression, th, out, p, q, m, c)
    return out


def can_unnormalize(template: Template) -> bool:
    """Whether the analytic raw-unit recovery applies to this template."""
    probe = np.full(template.param_count, 0.5)
    try:
        _probe = unnormalize_params(
            template, probe, _ProbeStats(x_min=0.25, x_range=2.0, y_min=0.5, y_range=3.0)
        )
    except UnnormalizableTemplate:
        return False
    return bool(np.all(np.isfinite(_probe)))


@dataclass(frozen=True)
class _ProbeStats:
    x_min: float
    x_range: float
    y_min: float
    y_range: float


def _pull_top(expr: Expression, th, out, p: float, q: float, m: float, c: float) -> None:
    residual = c
    offset = None
    for term in decompose_sum(expr):
        slot = _single_slot(term)
        if not term.factors:
            if slot is not None and term.cval == 1.0:
                offset = slot
            elif not term.pieces:
                residual += (m - 1.0) * term.cval
            else:
                raise UnnormalizableTemplate("composite constant term at top level")
            continue
        residual += _pull_term(term, th, out, p, q, m)
    if offset is not None:
        out[offset] = m * th[offset] + residual
    elif residual != 0.0:
        raise UnnormalizableTemplate("no offset slot to absorb the output shift")


def _pull_term(term: Term, th, out, p: float, q: float, scale: float) -> float:
    """Rescale one term by ``scale`` and substitute x -> p*x + q.

    Returns the additive constant the enclosing sum must absorb (nonzero
    only for bare linear terms).
    """
    slot = _single_slot(term)
    if _is_bare_x(term):
        if slot is not None and term.cval == 1.0:
            out[slot] = th[slot] * scale * p
            return th[slot] * scale * q
        if not term.pieces:
            if scale * p != 1.0:
                raise UnnormalizableTemplate("constant-coefficient linear term cannot rescale")
            return term.cval * scale * q
        raise UnnormalizableTemplate("composite coefficient on a linear term")

    mult = scale
    for base, n in term.factors:
        mult *= _pull_factor(base, n, th, out, p, q)

    if slot is not None and term.cval == 1.0:
        out[slot] = th[slot] * mult
        return 0.0
    if mult == 1.0:
        return 0.0
    for base, n in term.factors:
        if n % 2 != 0 and isinstance(base, Binary) and base.op == "add" \
                and _sum_scalable(base):
            _scale_sum(base, out, _signed_root(mult, n))
            return 0.0
    raise UnnormalizableTemplate("term has no coefficient able to absorb the output scale")


def _pull_factor(base: Expression, n: int, th, out, p: float, q: float) -> float:
    """Substitute x inside one factor; returns the multiplicative residue."""
    if isinstance(base, Var):
        if q != 0.0:
            raise UnnormalizableTemplate("bare power of x cannot absorb an x offset")
        return p ** n
    if isinstance(base, Unary):
        leftover = _pull_inner(base.child, th, out, p, q)
        if base.op == "exp":
            if leftover == 0.0:
                return 1.0
            try:
                return math.exp(leftover * n)
            except OverflowError:
                return math.inf  # non-finite theta fails the fit downstream
        if leftover != 0.0:
            raise UnnormalizableTemplate(f"{base.op} argument cannot absorb an x offset")
        return 1.0
    if isinstance(base, Binary) and base.op == "add":
        leftover = _pull_inner(base, th, out, p, q)
        if leftover != 0.0:
            raise UnnormalizableTemplate("sum factor cannot absorb an x offset")
        return 1.0
    raise UnnormalizableTemplate(f"unsupported factor {canonical_string(base)}")


def _pull_inner(expr: Expression, th, out, p: float, q: float) -> float:
    """x-substitution inside an operator argument (no output scaling)."""
    residual = 0.0
    offset = None
    for term in decompose_sum(expr):
        slot = _single_slot(term)
        if not term.factors:
            if slot is not None and term.cval == 1.0:
                offset = slot
            elif term.pieces:
                raise UnnormalizableTemplate("composite constant term inside an operator")
            continue
        residual += _pull_term(term, th, out, p, q, 1.0)
    if offset is not None:
        out[offset] = th[offset] + residual
        return 0.0
    return residual


def canonicalize_gauge(template: Template, theta) -> np.ndarray:
    """Move fitted parameter values to a canonical point of their gauge orbit.

    Some template families admit parameter changes that leave predictions
    identical: scaling the argument of a lone ``ln`` term (absorbed by the
    offset), scaling inside an even power (absorbed by its coefficient), and
    shifting or reflecting a cosine/sine phase.  Optimizers land anywhere on
    such an orbit, which would masquerade as cross-system parameter
    variation in the L2 score; this picks a fixed representative instead.
    Predictions are unchanged.
    """
    th = np.asarray(theta, dtype=float).copy()
    if any(n > 1 for n in slot_indices(template.expression).values()):
        return th
    offset = template.offset_slot
    two_pi = 2.0 * math.pi

    for term in decompose_sum(template.expression):
        coeff = _single_slot(term)
        # even powers: scale is absorbed by the term coefficient, and the
        # base is only identified up to a joint sign flip
        for base, n in term.factors:
            if n % 2 == 0 and isinstance(base, Binary) and base.op == "add" \
                    and _sum_scalable(base):
                if coeff is not None and term.cval == 1.0:
                    g = th[coeff]
                    if g != 0.0 and abs(g) != 1.0:
                        _scale_sum(base, th, abs(g) ** (1.0 / n))
                        th[coeff] = math.copysign(1.0, g)
                anchor = _varfree_slot(base)
                if anchor is None:
                    anchor = _single_slot(decompose_sum(base)[0])
                if anchor is not None and th[anchor] < 0.0:
                    _scale_sum(base, th, -1.0)
        # scale inside a lone ln term is absorbed by the global offset
        if coeff is not None and offset is not None and term.cval == 1.0 \
                and len(term.factors) == 1:
            base, n = term.factors[0]
            if n == 1 and isinstance(base, Unary) and base.op == "ln" \
                    and _sum_scalable(base.child):
                anchor = _varfree_slot(base.child)
                if anchor is not None and abs(th[anchor]) > 1e-12:
                    s = 1.0 / abs(th[anchor])
                    _scale_sum(base.child, th, s)
                    th[offset] -= th[coeff] * math.log(s)
        # cosine/sine phases: reflect to a positive rate, wrap into [0, 2*pi);
        # a pi-shift or sine reflection flips the term sign when the factor's
        # exponent is odd, which the coefficient must then compensate
        for base, n in term.factors:
            if isinstance(base, Unary) and base.op in ("cos", "sin"):
                rate, phase = _affine_arg_slots(base.child)
                if rate is None:
                    continue
                sign_free = n % 2 == 0
                can_flip = sign_free or (coeff is not None and term.cval == 1.0)
                if th[rate] < 0.0 and (base.op == "cos" or can_flip):
                    th[rate] = -th[rate]
                    if phase is not None:
                        th[phase] = -th[phase]
                    if base.op == "sin" and not sign_free:
                        th[coeff] = -th[coeff]
                if phase is not None:
                    wrapped = th[phase] % two_pi
                    if wrapped >= math.pi and can_flip:
                        wrapped -= math.pi
                        if not sign_free:
                            th[coeff] = -th[coeff]
                    th[phase] = wrapped
    return th


def _varfree_slot(expr: Expression) -> int | None:
    for term in decompose_sum(expr):
        if not term.factors:
            return _single_slot(term)
    return None


def _affine_arg_slots(expr: Expression):
    """(rate slot, phase slot) when the argument is exactly a*x [+ b]."""
    rate = None
    phase = None
    for term in decompose_sum(expr):
        slot = _single_slot(term)
        if _is_bare_x(term) and slot is not None and term.cval == 1.0:
            if rate is not None:
                return None, None
            rate = slot
        elif not term.factors and slot is not None and term.cval == 1.0:
            phase = slot
        else:
            return None, None
    return rate, phase


def _sum_scalable(expr: Expression) -> bool:
    return all(_term_scalable(t) for t in decompose_sum(expr))


def _term_scalable(term: Term) -> bool:
    if _single_slot(term) is not None and term.cval == 1.0:
        return True
    for base, n in term.factors:
        if n % 2 != 0 and isinstance(base, Binary) and base.op == "add" \
                and _sum_scalable(base):
            return True
    return False


def _scale_sum(expr: Expression, out, s: float) -> None:
    for term in decompose_sum(expr):
        slot = _single_slot(term)
        if slot is not None and term.cval == 1.0:
            out[slot] *= s
            continue
        for base, n in term.factors:
            if n % 2 != 0 and isinstance(base, Binary) and base.op == "add" \
                    and _sum_scalable(base):
                _scale_sum(base, out, _signed_root(s, n))
                break
        else:
            raise UnnormalizableTemplate("term cannot absorb a scale factor")


def _signed_root(value: float, n: int) -> float:
    if n == 1:
        return value
    if value == 0.0:
        return 0.0 if n > 0 else math.inf
    if n == -1:
        return 1.0 / value
    try:
        return math.copysign(abs(value) ** (1.0 / n), value)
    except OverflowError:
        return math.copysign(math.inf, value)
