"""Expression trees for single-variable equation candidates.

An expression is an immutable tree of nodes: constants, the independent
variable ``x``, parameter slots ``t0, t1, ...``, binary operators
(add/sub/mul/div), unary analytic operators (exp/ln/sin/cos) and integer
powers.  Trees are hashable and safe to share between threads; all random
generation takes a caller-supplied ``numpy.random.Generator``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

__all__ = [
    "Const",
    "Var",
    "Param",
    "Binary",
    "Unary",
    "Power",
    "Expression",
    "DomainError",
    "ParseError",
    "DEFAULT_PRIMITIVES",
    "evaluate",
    "compile_expression",
    "canonical_string",
    "parse",
    "random_expression",
    "depth",
    "node_count",
    "preorder",
    "subtree_at",
    "replace_at",
    "contains_variable",
    "slot_indices",
    "max_param_index",
]

_BINARY_OPS = ("add", "sub", "mul", "div")
_UNARY_OPS = ("exp", "ln", "sin", "cos")


class DomainError(ArithmeticError):
    """Evaluation left the valid domain: ln of a non-positive operand,
    division by zero, or a non-finite result (overflow)."""


class ParseError(ValueError):
    """Malformed expression text; ``position`` is the offending offset."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


@dataclass(frozen=True)
class Const:
    value: float

    def __post_init__(self):
        object.__setattr__(self, "value", float(self.value) + 0.0)
        if not math.isfinite(self.value):
            raise ValueError(f"constant must be finite, got {self.value}")


@dataclass(frozen=True)
class Var:
    """The single independent variable ``x``."""


@dataclass(frozen=True)
class Param:
    """Parameter slot ``t<index>``; values supplied at evaluation time."""

    index: int

    def __post_init__(self):
        if self.index < 0:
            raise ValueError(f"parameter index must be >= 0, got {self.index}")


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Expression"
    right: "Expression"

    def __post_init__(self):
        if self.op not in _BINARY_OPS:
            raise ValueError(f"unknown binary operator {self.op!r}")


@dataclass(frozen=True)
class Unary:
    op: str
    child: "Expression"

    def __post_init__(self):
        if self.op not in _UNARY_OPS:
            raise ValueError(f"unknown unary operator {self.op!r}")


@dataclass(frozen=True)
class Power:
    """Integer power ``base^n`` with structural exponent ``n != 0``."""

    base: "Expression"
    exponent: int

    def __post_init__(self):
        if not isinstance(self.exponent, int) or isinstance(self.exponent, bool):
            raise ValueError("power exponent must be a plain int")
        if self.exponent == 0:
            raise ValueError("power exponent must be nonzero")


Expression = Union[Const, Var, Param, Binary, Unary, Power]

X = Var()

# Default primitive set: algebraic operators, exp/ln/cos and powers 2, 3, -1.
# sin is available but off by default (cos with a fitted phase subsumes it).
DEFAULT_PRIMITIVES = ("add", "sub", "mul", "div", "exp", "ln", "cos", "pow2", "pow3", "pow-1")


# ---------------------------------------------------------------------------
# tree utilities


def depth(expr: Expression) -> int:
    """Depth of the tree; a single leaf has depth 1."""
    if isinstance(expr, (Const, Var, Param)):
        return 1
    if isinstance(expr, Binary):
        return 1 + max(depth(expr.left), depth(expr.right))
    if isinstance(expr, Unary):
        return 1 + depth(expr.child)
    return 1 + depth(expr.base)


def node_count(expr: Expression) -> int:
    if isinstance(expr, (Const, Var, Param)):
        return 1
    if isinstance(expr, Binary):
        return 1 + node_count(expr.left) + node_count(expr.right)
    if isinstance(expr, Unary):
        return 1 + node_count(expr.child)
    return 1 + node_count(expr.base)


def preorder(expr: Expression, _depth: int = 1) -> list[tuple[Expression, int]]:
    """All subtrees with their depth, in preorder; index 0 is the root."""
    out = [(expr, _depth)]
    if isinstance(expr, Binary):
        out.extend(preorder(expr.left, _depth + 1))
        out.extend(preorder(expr.right, _depth + 1))
    elif isinstance(expr, Unary):
        out.extend(preorder(expr.child, _depth + 1))
    elif isinstance(expr, Power):
        out.extend(preorder(expr.base, _depth + 1))
    return out


def subtree_at(expr: Expression, index: int) -> Expression:
    return preorder(expr)[index][0]


def replace_at(expr: Expression, index: int, replacement: Expression) -> Expression:
    """Rebuild the tree with the preorder-``index`` subtree swapped out."""

    def rebuild(node: Expression, i: int) -> tuple[Expression, int]:
        if i == 0:
            return replacement, -node_count(node)
        i -= 1
        if isinstance(node, Binary):
            left, i = rebuild(node.left, i)
            if i < 0:
                return Binary(node.op, left, node.right), i
            right, i = rebuild(node.right, i)
            return (Binary(node.op, left, right), i) if i < 0 else (node, i)
        if isinstance(node, Unary):
            child, i = rebuild(node.child, i)
            return (Unary(node.op, child), i) if i < 0 else (node, i)
        if isinstance(node, Power):
            base, i = rebuild(node.base, i)
            return (Power(base, node.exponent), i) if i < 0 else (node, i)
        return node, i

    if index < 0 or index >= node_count(expr):
        raise IndexError(f"subtree index {index} out of range")
    new, _ = rebuild(expr, index)
    return new


def contains_variable(expr: Expression) -> bool:
    if isinstance(expr, Var):
        return True
    if isinstance(expr, (Const, Param)):
        return False
    if isinstance(expr, Binary):
        return contains_variable(expr.left) or contains_variable(expr.right)
    if isinstance(expr, Unary):
        return contains_variable(expr.child)
    return contains_variable(expr.base)


def slot_indices(expr: Expression) -> dict[int, int]:
    """Occurrence count per parameter-slot index."""
    counts: dict[int, int] = {}

    def walk(node: Expression) -> None:
        if isinstance(node, Param):
            counts[node.index] = counts.get(node.index, 0) + 1
        elif isinstance(node, Binary):
            walk(node.left)
            walk(node.right)
        elif isinstance(node, Unary):
            walk(node.child)
        elif isinstance(node, Power):
            walk(node.base)

    walk(expr)
    return counts


def max_param_index(expr: Expression) -> int:
    """Largest slot index, or -1 when the expression has no slots."""
    counts = slot_indices(expr)
    return max(counts) if counts else -1


# ---------------------------------------------------------------------------
# evaluation


def evaluate(expr: Expression, x: float, theta: Sequence[float] = ()) -> float:
    """Evaluate at a scalar ``x`` with slot values ``theta``.

    Deterministic and pure.  Raises :class:`DomainError` when ln receives a
    non-positive operand, a denominator is zero, or the result overflows.
    """
    need = max_param_index(expr) + 1
    if len(theta) < need:
        raise ValueError(f"theta has {len(theta)} entries, expression needs {need}")
    val = _eval_scalar(expr, float(x), theta)
    if not math.isfinite(val):
        raise DomainError(f"non-finite result {val} at x={x}")
    return val


def _eval_scalar(e: Expression, x: float, theta: Sequence[float]) -> float:
    if isinstance(e, Const):
        return e.value
    if isinstance(e, Var):
        return x
    if isinstance(e, Param):
        return float(theta[e.index])
    if isinstance(e, Binary):
        a = _eval_scalar(e.left, x, theta)
        b = _eval_scalar(e.right, x, theta)
        if e.op == "add":
            return a + b
        if e.op == "sub":
            return a - b
        if e.op == "mul":
            return a * b
        if b == 0.0:
            raise DomainError(f"division by zero at x={x}")
        return a / b
    if isinstance(e, Unary):
        u = _eval_scalar(e.child, x, theta)
        if e.op == "exp":
            try:
                return math.exp(u)
            except OverflowError as err:
                raise DomainError(f"exp overflow at x={x}") from err
        if e.op == "ln":
            if u <= 0.0:
                raise DomainError(f"ln of non-positive value {u} at x={x}")
            return math.log(u)
        return math.sin(u) if e.op == "sin" else math.cos(u)
    u = _eval_scalar(e.base, x, theta)
    try:
        return u ** e.exponent
    except ZeroDivisionError as err:
        raise DomainError(f"zero base with negative exponent at x={x}") from err
    except OverflowError as err:
        raise DomainError(f"power overflow at x={x}") from err


_COMPILE_CACHE: dict[Expression, Callable] = {}


def compile_expression(expr: Expression) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    """Compile to a vectorized evaluator ``f(x, theta) -> ndarray``.

    ``theta`` may be 1-D ``(T,)`` or 2-D ``(P, T)``; results broadcast to
    ``(n,)`` / ``(P, n)``.  Unlike :func:`evaluate` the compiled form never
    raises on domain violations: it propagates nan/inf, so callers should
    evaluate under ``np.errstate(all="ignore")`` and inspect finiteness.
    """
    fn = _COMPILE_CACHE.get(expr)
    if fn is None:
        src = _codegen(expr)
        fn = eval(compile(f"lambda x, th: {src}", "<expression>", "eval"), {"np": np})
        _COMPILE_CACHE[expr] = fn
    return fn


def _codegen(e: Expression) -> str:
    if isinstance(e, Const):
        return repr(e.value)
    if isinstance(e, Var):
        return "x"
    if isinstance(e, Param):
        return f"th[..., {e.index}, None]"
    if isinstance(e, Binary):
        sym = {"add": "+", "sub": "-", "mul": "*", "div": "/"}[e.op]
        return f"({_codegen(e.left)} {sym} {_codegen(e.right)})"
    if isinstance(e, Unary):
        fun = {"exp": "np.exp", "ln": "np.log", "sin": "np.sin", "cos": "np.cos"}[e.op]
        return f"{fun}({_codegen(e.child)})"
    if e.exponent == -1:
        return f"(1.0 / {_codegen(e.base)})"
    return f"({_codegen(e.base)} ** {e.exponent})"


# ---------------------------------------------------------------------------
# canonical text form

_PREC_ADD = 1
_PREC_MUL = 2
_PREC_POW = 3
_PREC_ATOM = 4


def canonical_string(expr: Expression) -> str:
    """Deterministic serialization in the infix grammar.

    Operands of the commutative operators (add, mul) are ordered by a fixed
    total ordering of subtree strings: first the rendering with slot indices
    masked, then the exact rendering.  Structurally identical trees always
    produce identical text.
    """
    return _render(expr, _PREC_ADD)[0]


def _mask_key(e: Expression) -> tuple[str, str]:
    """Sort key for sum operands: masked rendering first, exact second."""
    exact, masked = _render(e, _PREC_ADD)
    return masked, exact


def _product_key(e: Expression) -> tuple[str, str]:
    """Sort key for product operands; matches canonical_string's ordering,
    which renders them in multiplication context (parentheses included)."""
    exact, masked = _render(e, _PREC_MUL + 1)
    return masked, exact


def _flatten(e: Expression, op: str) -> list[Expression]:
    if isinstance(e, Binary) and e.op == op:
        return _flatten(e.left, op) + _flatten(e.right, op)
    return [e]


def _render(e: Expression, parent_prec: int) -> tuple[str, str]:
    if isinstance(e, Const):
        s = repr(e.value)
        return (s, s) if e.value >= 0 or parent_prec <= _PREC_MUL else (f"({s})", f"({s})")
    if isinstance(e, Var):
        return "x", "x"
    if isinstance(e, Param):
        return f"t{e.index}", "t#"
    if isinstance(e, Binary):
        if e.op in ("add", "mul"):
            prec = _PREC_ADD if e.op == "add" else _PREC_MUL
            sep = " + " if e.op == "add" else "*"
            parts = sorted(
                (_render(o, prec + (e.op == "mul")) for o in _flatten(e, e.op)),
                key=lambda p: (p[1], p[0]),
            )
            exact = sep.join(p[0] for p in parts)
            masked = sep.join(p[1] for p in parts)
            return _wrap(exact, masked, prec, parent_prec)
        if e.op == "sub":
            l0, l1 = _render(e.left, _PREC_ADD)
            r0, r1 = _render(e.right, _PREC_ADD + 1)
            return _wrap(f"{l0} - {r0}", f"{l1} - {r1}", _PREC_ADD, parent_prec)
        l0, l1 = _render(e.left, _PREC_MUL)
        r0, r1 = _render(e.right, _PREC_MUL + 1)
        return _wrap(f"{l0}/{r0}", f"{l1}/{r1}", _PREC_MUL, parent_prec)
    if isinstance(e, Unary):
        c0, c1 = _render(e.child, _PREC_ADD)
        return f"{e.op}({c0})", f"{e.op}({c1})"
    b0, b1 = _render(e.base, _PREC_ATOM)
    return _wrap(f"{b0}^{e.exponent}", f"{b1}^{e.exponent}", _PREC_POW, parent_prec)


def _wrap(exact: str, masked: str, prec: int, parent_prec: int) -> tuple[str, str]:
    if prec < parent_prec:
        return f"({exact})", f"({masked})"
    return exact, masked


# ---------------------------------------------------------------------------
# parsing

_FUNCS = {"exp", "ln", "sin", "cos"}


def parse(text: str) -> Expression:
    """Parse the infix grammar.

    Grammar (whitespace-insensitive)::

        expr   := term (('+' | '-') term)*
        term   := factor (('*' | '/') factor)*
        factor := '-' factor | power
        power  := atom ('^' ['-'] INT)?
        atom   := NUMBER | 'x' | 't' INT | FUNC '(' expr ')' | '(' expr ')'

    ``x^0`` folds to the constant 1.  Raises :class:`ParseError` with the
    offending position on malformed input.
    """
    tokens = _tokenize(text)
    parser = _Parser(tokens, text)
    result = parser.parse_expr()
    parser.expect_end()
    return result


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
            continue
        if ch in "+-*/^()":
            tokens.append((ch, ch, i))
            i += 1
            continue
        if ch.isdigit() or ch == ".":
            j = i
            while j < n and (text[j].isdigit() or text[j] == "."):
                j += 1
            if j < n and text[j] in "eE":
                k = j + 1
                if k < n and text[k] in "+-":
                    k += 1
                if k < n and text[k].isdigit():
                    j = k
                    while j < n and text[j].isdigit():
                        j += 1
            tokens.append(("num", text[i:j], i))
            i = j
            continue
        if ch.isalpha() or ch == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            tokens.append(("ident", text[i:j], i))
            i = j
            continue
        raise ParseError(f"unexpected character {ch!r}", i)
    tokens.append(("end", "", n))
    return tokens


class _Parser:
    def __init__(self, tokens, text):
        self.tokens = tokens
        self.text = text
        self.pos = 0

    def peek(self):
        return self.tokens[self.pos]

    def advance(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect_end(self):
        kind, value, pos = self.peek()
        if kind != "end":
            raise ParseError(f"unexpected trailing input {value!r}", pos)

    def parse_expr(self) -> Expression:
        node = self.parse_term()
        while self.peek()[0] in ("+", "-"):
            op = self.advance()[0]
            rhs = self.parse_term()
            node = Binary("add" if op == "+" else "sub", node, rhs)
        return node

    def parse_term(self) -> Expression:
        node = self.parse_factor()
        while self.peek()[0] in ("*", "/"):
            op = self.advance()[0]
            rhs = self.parse_factor()
            node = Binary("mul" if op == "*" else "div", node, rhs)
        return node

    def parse_factor(self) -> Expression:
        if self.peek()[0] == "-":
            pos = self.advance()[2]
            inner = self.parse_factor()
            if isinstance(inner, Const):
                return Const(-inner.value)
            return Binary("sub", Const(0.0), inner)
        return self.parse_power()

    def parse_power(self) -> Expression:
        base = self.parse_atom()
        if self.peek()[0] != "^":
            return base
        self.advance()
        sign = 1
        if self.peek()[0] == "-":
            self.advance()
            sign = -1
        kind, value, pos = self.peek()
        if kind != "num" or not value.isdigit():
            raise ParseError("power exponent must be an integer literal", pos)
        self.advance()
        n = sign * int(value)
        if n == 0:
            return Const(1.0)
        return Power(base, n)

    def parse_atom(self) -> Expression:
        kind, value, pos = self.advance()
        if kind == "num":
            try:
                return Const(float(value))
            except ValueError as err:
                raise ParseError(f"bad number literal {value!r}", pos) from err
        if kind == "(":
            node = self.parse_expr()
            k, v, p = self.advance()
            if k != ")":
                raise ParseError("expected ')'", p)
            return node
        if kind == "ident":
            if value == "x":
                return Var()
            if value in _FUNCS:
                k, v, p = self.advance()
                if k != "(":
                    raise ParseError(f"expected '(' after {value}", p)
                node = self.parse_expr()
                k, v, p = self.advance()
                if k != ")":
                    raise ParseError("expected ')'", p)
                return Unary(value, node)
            if value.startswith("t") and value[1:].isdigit():
                return Param(int(value[1:]))
            raise ParseError(f"unknown identifier {value!r}", pos)
        raise ParseError(f"unexpected token {value!r}" if value else "unexpected end of input", pos)


# ---------------------------------------------------------------------------
# random generation


def _primitive_node(name: str, children: Callable[[], Expression]) -> Expression:
    if name in _BINARY_OPS:
        return Binary(name, children(), children())
    if name in _UNARY_OPS:
        return Unary(name, children())
    if name.startswith("pow"):
        n = int(name[3:])
        return Power(children(), n)
    raise ValueError(f"unknown primitive {name!r}")


def _primitive_arity(name: str) -> int:
    return 2 if name in _BINARY_OPS else 1


def random_leaf(rng: np.random.Generator) -> Expression:
    if rng.random() < 0.7:
        return Var()
    return Const(float(rng.uniform(-5.0, 5.0)))


def random_expression(
    primitives: Sequence[str],
    max_depth: int,
    rng: np.random.Generator,
) -> Expression:
    """Grow-style random tree of depth <= ``max_depth``.

    The leaf probability rises linearly with depth and reaches 1 at
    ``max_depth``; with ``max_depth=1`` the result is always a leaf.
    """
    if not primitives:
        raise ValueError("primitive set must be non-empty")
    if max_depth < 1:
        raise ValueError("max_depth must be >= 1")

    def gen(d: int) -> Expression:
        if d >= max_depth or rng.random() < d / max_depth:
            return random_leaf(rng)
        name = primitives[int(rng.integers(len(primitives)))]
        return _primitive_node(name, lambda: gen(d + 1))

    return gen(1)


def full_expression(
    primitives: Sequence[str],
    depth_target: int,
    rng: np.random.Generator,
) -> Expression:
    """Full-style tree: operators down to ``depth_target``, leaves at the bottom."""
    if depth_target <= 1:
        return random_leaf(rng)
    name = primitives[int(rng.integers(len(primitives)))]
    return _primitive_node(name, lambda: full_expression(primitives, depth_target - 1, rng))


def prune_to_depth(expr: Expression, max_depth: int, rng: np.random.Generator) -> Expression:
    """Replace subtrees that would exceed ``max_depth`` with random leaves."""

    def walk(node: Expression, budget: int) -> Expression:
        if isinstance(node, (Const, Var, Param)):
            return node
        if budget <= 1:
            return random_leaf(rng)
        if isinstance(node, Binary):
            return Binary(node.op, walk(node.left, budget - 1), walk(node.right, budget - 1))
        if isinstance(node, Unary):
            return Unary(node.op, walk(node.child, budget - 1))
        return Power(walk(node.base, budget - 1), node.exponent)

    if depth(expr) <= max_depth:
        return expr
    return walk(expr, max_depth)
