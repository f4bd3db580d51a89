"""Reduction of expressions to an irreducible canonical form.

The normal form is a sorted sum of terms, each term a sorted product of a
coefficient (constant or single parameter slot) and variable-containing
factors.  Rules applied to fixpoint:

* constant folding and identity elimination (+0, *1, /1, ^0, ^1);
* division rewritten as integer power -1; same-base powers merged;
* products and sums of *free* parameter slots (slots occurring exactly once
  in the whole expression) collapse to a single slot;
* a free scalar coefficient distributes over an affine/odd-power group whose
  term coefficients are themselves free, so ``a*(b*x + c) + d`` collapses to
  ``a'*x + b'`` and ``g*(a*x + b)^3`` to ``(a'*x + b')^3``;
* additive parameter-only shifts inside ``exp`` move out multiplicatively,
  so ``g*exp(a*x + b)`` becomes ``t*exp(a*x)``.

Slot indices are reindexed to a contiguous ``0..T'-1`` range, in order of
first appearance in the canonical tree.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import reduce

from .expr import (
    Binary,
    Const,
    Expression,
    Param,
    Power,
    Unary,
    Var,
    canonical_string,
    contains_variable,
    slot_indices,
    _mask_key,
    _product_key,
)

__all__ = ["simplify", "decompose_sum", "Term", "reindex_slots"]


@dataclass
class Term:
    """One canonical term: constant * var-free pieces * var-containing factors.

    ``pieces`` and ``factors`` are lists of (base expression, int exponent).
    """

    cval: float = 1.0
    pieces: list = field(default_factory=list)
    factors: list = field(default_factory=list)


def simplify(expr: Expression) -> Expression:
    """Return the canonical irreducible form of ``expr``.

    Semantics are preserved up to reparameterization of free slots; slot
    indices come out contiguous.  Never raises: subexpressions that cannot
    be folded safely (e.g. ``ln`` of a non-positive constant) are kept.
    """
    cur = expr
    prev = None
    for _ in range(10):
        cur = reindex_slots(_Normalizer(cur).run())
        key = canonical_string(cur)
        if key == prev:
            break
        prev = key
    return cur


def decompose_sum(expr: Expression) -> list[Term]:
    """Decompose a canonical expression into its terms.

    Works structurally on add/mul/Power chains; intended for trees produced
    by :func:`simplify`.
    """
    terms = []
    for operand in _flatten_add(expr):
        term = Term()
        for f in _flatten_mul(operand):
            base, n = (f.base, f.exponent) if isinstance(f, Power) else (f, 1)
            if isinstance(base, Const):
                term.cval *= base.value ** n
            elif contains_variable(base):
                term.factors.append((base, n))
            else:
                term.pieces.append((base, n))
        terms.append(term)
    return terms


def reindex_slots(expr: Expression) -> Expression:
    """Renumber slots to 0..T-1 in order of first appearance (preorder)."""
    mapping: dict[int, int] = {}

    def collect(e: Expression) -> None:
        if isinstance(e, Param):
            if e.index not in mapping:
                mapping[e.index] = len(mapping)
        elif isinstance(e, Binary):
            collect(e.left)
            collect(e.right)
        elif isinstance(e, Unary):
            collect(e.child)
        elif isinstance(e, Power):
            collect(e.base)

    def apply(e: Expression) -> Expression:
        if isinstance(e, Param):
            return Param(mapping[e.index])
        if isinstance(e, Binary):
            return Binary(e.op, apply(e.left), apply(e.right))
        if isinstance(e, Unary):
            return Unary(e.op, apply(e.child))
        if isinstance(e, Power):
            return Power(apply(e.base), e.exponent)
        return e

    collect(expr)
    if all(old == new for old, new in mapping.items()):
        return expr
    return apply(expr)


def _flatten_add(e: Expression) -> list[Expression]:
    if isinstance(e, Binary) and e.op == "add":
        return _flatten_add(e.left) + _flatten_add(e.right)
    return [e]


def _flatten_mul(e: Expression) -> list[Expression]:
    if isinstance(e, Binary) and e.op == "mul":
        return _flatten_mul(e.left) + _flatten_mul(e.right)
    return [e]


def _build_factor(f) -> Expression:
    base, n = f
    return base if n == 1 else Power(base, n)


def _rebuild_term(t: Term) -> Expression:
    if not t.pieces and not t.factors:
        return Const(t.cval)
    operands: list[Expression] = []
    if t.cval != 1.0:
        operands.append(Const(t.cval))
    operands.extend(_build_factor(f) for f in t.pieces)
    operands.extend(_build_factor(f) for f in t.factors)
    if len(operands) == 1:
        return operands[0]
    operands.sort(key=_product_key)
    return reduce(lambda a, b: Binary("mul", a, b), operands)


def _rebuild_sum(terms: list[Term]) -> Expression:
    if not terms:
        return Const(0.0)
    exprs = sorted((_rebuild_term(t) for t in terms), key=_mask_key)
    return reduce(lambda a, b: Binary("add", a, b), exprs)


def _merge_exponents(items: list) -> list:
    merged: dict[str, list] = {}
    order = []
    for base, n in items:
        key = canonical_string(base)
        if key in merged:
            merged[key][1] += n
        else:
            merged[key] = [base, n]
            order.append(key)
    out = []
    for key in order:
        base, n = merged[key]
        if n != 0:
            out.append((base, n))
    return out


def _fold_unary(op: str, v: float) -> float | None:
    try:
        if op == "exp":
            r = math.exp(v)
        elif op == "ln":
            if v <= 0.0:
                return None
            r = math.log(v)
        elif op == "sin":
            r = math.sin(v)
        else:
            r = math.cos(v)
    except OverflowError:
        return None
    return r if math.isfinite(r) else None


class _Normalizer:
    """Single normalization pass; :func:`simplify` iterates to fixpoint."""

    def __init__(self, expr: Expression):
        counts = slot_indices(expr)
        self.free = {i for i, c in counts.items() if c == 1}
        self._next = max(counts, default=-1) + 1
        self._root = expr

    def run(self) -> Expression:
        return _rebuild_sum(self.finalize_sum(self.norm_terms(self._root)))

    def fresh(self) -> Param:
        p = Param(self._next)
        self.free.add(self._next)
        self._next += 1
        return p

    def all_free(self, e: Expression) -> bool:
        counts = slot_indices(e)
        return bool(counts) and all(i in self.free for i in counts)

    # -- recursive normalization into term lists --

    def norm_terms(self, e: Expression) -> list[Term]:
        if isinstance(e, Const):
            return [Term(cval=e.value)]
        if isinstance(e, Var):
            return [Term(factors=[(e, 1)])]
        if isinstance(e, Param):
            return [Term(pieces=[(e, 1)])]
        if isinstance(e, Binary):
            if e.op == "add":
                return self.norm_terms(e.left) + self.norm_terms(e.right)
            if e.op == "sub":
                right = self.norm_terms(e.right)
                for t in right:
                    t.cval = -t.cval
                return self.norm_terms(e.left) + right
            if e.op == "mul":
                return [_mul_terms(self.as_term(e.left), self.as_term(e.right))]
            return [_mul_terms(self.as_term(e.left), _invert(self.as_term(e.right)))]
        if isinstance(e, Unary):
            child = _rebuild_sum(self.finalize_sum(self.norm_terms(e.child)))
            if isinstance(child, Const):
                folded = _fold_unary(e.op, child.value)
                if folded is not None:
                    return [Term(cval=folded)]
            node = Unary(e.op, child)
            if contains_variable(node):
                return [Term(factors=[(node, 1)])]
            return [Term(pieces=[(node, 1)])]
        # Power: distribute the exponent over a single-term base
        base = self.as_term(e.base)
        n = e.exponent
        out = Term()
        if base.cval == 0.0:
            if n > 0:
                return [Term(cval=0.0)]
            out.pieces.append((Power(Const(0.0), n), 1))
        else:
            c = base.cval ** n
            if math.isfinite(c):
                out.cval = c
            else:
                out.pieces.append((Const(base.cval), n))
        out.pieces.extend((b, k * n) for b, k in base.pieces)
        out.factors.extend((b, k * n) for b, k in base.factors)
        return [out]

    def as_term(self, e: Expression) -> Term:
        """Normalize a subexpression into a single product term; multi-term
        sums become a parenthesized sum factor."""
        terms = self.finalize_sum(self.norm_terms(e))
        if not terms:
            return Term(cval=0.0)
        if len(terms) == 1:
            return terms[0]
        node = _rebuild_sum(terms)
        if contains_variable(node):
            return Term(factors=[(node, 1)])
        return Term(pieces=[(node, 1)])

    # -- term finalization --

    def finalize_term(self, t: Term) -> list[Term]:
        if t.cval == 0.0:
            return []
        t.pieces = _merge_exponents(t.pieces)
        t.factors = _merge_exponents(t.factors)

        # move free additive parameter shifts out of exp factors
        new_factors = []
        for base, n in t.factors:
            if isinstance(base, Unary) and base.op == "exp":
                kept, moved, const = self.split_exp_shift(base.child)
                if moved or const != 0.0:
                    if const != 0.0:
                        folded = _fold_unary("exp", const * n)
                        if folded is None:
                            t.pieces.append((Unary("exp", Const(const)), n))
                        else:
                            t.cval *= folded
                    t.pieces.extend((Unary("exp", p), n) for p in moved)
                    if kept is not None:
                        new_factors.append((Unary("exp", kept), n))
                    continue
            new_factors.append((base, n))
        t.factors = new_factors
        t.pieces = _merge_exponents(t.pieces)

        # collapse the coefficient when every slot in it is free
        already_single = (
            len(t.pieces) == 1
            and t.pieces[0][1] == 1
            and isinstance(t.pieces[0][0], Param)
            and t.cval == 1.0
        )
        if t.pieces and not already_single:
            if all(self.all_free(b) for b, _ in t.pieces):
                t.pieces = [(self.fresh(), 1)]
                t.cval = 1.0

        # a free coefficient folds into the first odd power of an
        # all-absorbable sum (exponent 1 is the plain affine group)
        coeff_free = (
            len(t.pieces) == 1
            and t.pieces[0][1] == 1
            and isinstance(t.pieces[0][0], Param)
            and t.pieces[0][0].index in self.free
        )
        if coeff_free and t.cval == 1.0:
            for base, n in t.factors:
                if n % 2 != 0 and isinstance(base, Binary) and base.op == "add" \
                        and self.sum_absorbs_scale(base):
                    t.pieces = []
                    break

        # distribute a bare constant over a lone sum factor and splice
        if not t.pieces and len(t.factors) == 1 and t.factors[0][1] == 1 \
                and isinstance(t.factors[0][0], Binary) and t.factors[0][0].op == "add":
            inner = decompose_sum(t.factors[0][0])
            for s in inner:
                s.cval *= t.cval
            return [u for s in inner for u in self.finalize_term(s)]

        t.pieces.sort(key=lambda f: _product_key(_build_factor(f)))
        t.factors.sort(key=lambda f: _product_key(_build_factor(f)))
        return [t]

    def split_exp_shift(self, arg: Expression):
        """Partition an exp argument into (kept expr, movable pieces, const)."""
        kept, moved, const = [], [], 0.0
        for t in decompose_sum(arg):
            if t.factors:
                kept.append(t)
            elif not t.pieces:
                const += t.cval
            elif all(self.all_free(b) for b, _ in t.pieces):
                moved.append(_rebuild_term(t))
            else:
                kept.append(t)
        if not moved and const == 0.0:
            return arg, [], 0.0
        kept_expr = _rebuild_sum(kept) if kept else None
        return kept_expr, moved, const

    def sum_absorbs_scale(self, sum_expr: Expression) -> bool:
        """True when a scalar factor folds into the group without changing
        its family: every term either carries a free-slot coefficient or has
        an odd power whose base absorbs the scale recursively."""
        return all(self.term_absorbs_scale(t) for t in decompose_sum(sum_expr))

    def term_absorbs_scale(self, t: Term) -> bool:
        if (
            len(t.pieces) == 1
            and t.pieces[0][1] == 1
            and isinstance(t.pieces[0][0], Param)
            and t.pieces[0][0].index in self.free
        ):
            return True
        for base, n in t.factors:
            if n % 2 != 0 and isinstance(base, Binary) and base.op == "add" \
                    and self.sum_absorbs_scale(base):
                return True
        return False

    # -- sum finalization --

    def finalize_sum(self, terms: list[Term]) -> list[Term]:
        flat: list[Term] = []
        for t in terms:
            flat.extend(self.finalize_term(t))

        groups: dict[str, list[Term]] = {}
        order = []
        for t in flat:
            key = "*".join(canonical_string(_build_factor(f)) for f in t.factors)
            if key not in groups:
                groups[key] = []
                order.append(key)
            groups[key].append(t)

        merged: list[Term] = []
        for key in order:
            group = groups[key]
            if len(group) == 1:
                merged.append(group[0])
                continue
            factors = group[0].factors
            const_sum = math.fsum(t.cval for t in group if not t.pieces)
            slotful = [t for t in group if t.pieces]
            if not slotful:
                if const_sum != 0.0:
                    merged.append(Term(cval=const_sum, factors=factors))
            elif all(self.all_free(b) for t in slotful for b, _ in t.pieces):
                merged.append(Term(pieces=[(self.fresh(), 1)], factors=factors))
            else:
                coeff = _rebuild_sum(
                    [Term(t.cval, t.pieces, []) for t in slotful]
                    + ([Term(cval=const_sum)] if const_sum != 0.0 else [])
                )
                merged.append(Term(pieces=[(coeff, 1)], factors=factors))
        return merged


def _mul_terms(a: Term, b: Term) -> Term:
    return Term(a.cval * b.cval, a.pieces + b.pieces, a.factors + b.factors)


def _invert(term: Term) -> Term:
    out = Term()
    if term.cval == 0.0:
        out.pieces.append((Power(Const(0.0), -1), 1))
    else:
        out.cval = 1.0 / term.cval
    out.pieces = [(b, -n) for b, n in term.pieces]
    out.factors = [(b, -n) for b, n in term.factors]
    return out
