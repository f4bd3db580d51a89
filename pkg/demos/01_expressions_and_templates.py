"""Expressions, canonical forms, and the parameter-insertion transform.

Walks through the core representation: parsing, evaluation, reduction to
irreducible form, and how a raw candidate becomes a fit template with
extrinsic parameter slots and per-slot roles.
"""
import numpy as np

from sysform import canonical_string, dimensionalize, evaluate, parse, simplify

# --- parsing and evaluation -------------------------------------------------

e = parse("x^3 + exp(x)*cos(x)")
print("parsed:      ", canonical_string(e))
print("value at 1.3:", evaluate(e, 1.3))

# Parameter slots are written t0, t1, ...; values are supplied at call time.
lin = parse("t0*x + t1")
print("t0*x+t1 at x=2 with (3, -1):", evaluate(lin, 2.0, [3.0, -1.0]))

# --- simplification ---------------------------------------------------------

# Free parameters (each used once) merge wherever a single slot spans the
# same family of curves: products, sums, affine compositions, exp shifts.
examples = [
    "t0*(t1*x + t2) + t3",            # affine-in-affine collapses to a line
    "t0*exp(t1*x + t2)",              # the shift folds into the coefficient
    "t0*(t1*x + t2)^3",               # odd powers absorb their coefficient
    "t0*(t1*x + t2)^2",               # even powers keep it (sign matters)
    "t0 + t1",                        # two free scalars are one scalar
]
for text in examples:
    print(f"{text:24s} ->  {canonical_string(simplify(parse(text)))}")

# --- dimensionalization -----------------------------------------------------

# Every variable occurrence becomes (a*x + b), every analytic operator and
# power gains a scale, constants are freed, and a global offset is added.
# The result is reduced to irreducible form.
for cand in ["x", "exp(x)", "x + ln(x)", "x^2 + exp(x)*cos(x)"]:
    t = dimensionalize(parse(cand))
    roles = ", ".join(f"t{i}={r}" for i, r in enumerate(t.slot_roles))
    print(f"{cand:22s} ->  {canonical_string(t.expression):42s} T={t.param_count}  ({roles})")
