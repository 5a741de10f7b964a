"""A small expression language over x, y, t for coefficients and data.

Grammar (lowest to highest precedence)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | power
    power  := atom ('^' unary)?          # right-associative
    atom   := number | name | name '(' expr ')' | '(' expr ')'

Names are the variables ``x``, ``y``, ``t`` and the constants ``pi`` and
``e``; functions are ``sin cos exp sqrt abs log``.  Expressions evaluate on
numpy arrays and can be differentiated symbolically.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

VARIABLES = ("x", "y", "t")
CONSTANTS = {"pi": math.pi, "e": math.e}
FUNCTIONS = {
    "sin": np.sin, "cos": np.cos, "exp": np.exp, "sqrt": np.sqrt,
    "abs": np.abs, "log": np.log, "sign": np.sign,
}
_USER_FUNCTIONS = ("sin", "cos", "exp", "sqrt", "abs", "log")


class ExpressionError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


# ------------------------------------------------------------------- nodes

class Expr:
    """Base node.  Subclasses are immutable value objects."""

    def __call__(self, x=0.0, y=0.0, t=0.0):
        return self.evaluate({"x": x, "y": y, "t": t})

    def evaluate(self, env):
        raise NotImplementedError

    def diff(self, var: str) -> "Expr":
        raise NotImplementedError

    def variables(self) -> frozenset:
        raise NotImplementedError

    def __str__(self):
        return self.to_text()

    # operator sugar used when building forcing terms
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return neg(self)


def _wrap(v) -> Expr:
    return v if isinstance(v, Expr) else Num(float(v))


@dataclass(frozen=True)
class Num(Expr):
    value: float

    def evaluate(self, env):
        return self.value

    def diff(self, var):
        return ZERO

    def variables(self):
        return frozenset()

    def to_text(self):
        return repr(self.value) if self.value >= 0 else f"({self.value!r})"


@dataclass(frozen=True)
class Const(Expr):
    name: str

    def evaluate(self, env):
        return CONSTANTS[self.name]

    def diff(self, var):
        return ZERO

    def variables(self):
        return frozenset()

    def to_text(self):
        return self.name


@dataclass(frozen=True)
class Var(Expr):
    name: str

    def evaluate(self, env):
        return env[self.name]

    def diff(self, var):
        return ONE if var == self.name else ZERO

    def variables(self):
        return frozenset({self.name})

    def to_text(self):
        return self.name


@dataclass(frozen=True)
class Neg(Expr):
    arg: Expr

    def evaluate(self, env):
        return -self.arg.evaluate(env)

    def diff(self, var):
        return neg(self.arg.diff(var))

    def variables(self):
        return self.arg.variables()

    def to_text(self):
        return f"(-{self.arg.to_text()})"


_BINOPS = {
    "+": np.add, "-": np.subtract, "*": np.multiply, "/": np.true_divide, "^": np.power,
}


@dataclass(frozen=True)
class BinOp(Expr):
    op: str
    left: Expr
    right: Expr

    def evaluate(self, env):
        a, b = self.left.evaluate(env), self.right.evaluate(env)
        if self.op == "/" and np.any(np.asarray(b) == 0):
            raise ZeroDivisionError(f"division by zero in {self.to_text()}")
        return _BINOPS[self.op](a, b)

    def variables(self):
        return self.left.variables() | self.right.variables()

    def to_text(self):
        return f"({self.left.to_text()}{self.op}{self.right.to_text()})"

    def diff(self, var):
        u, v = self.left, self.right
        du, dv = u.diff(var), v.diff(var)
        if self.op == "+":
            return add(du, dv)
        if self.op == "-":
            return sub(du, dv)
        if self.op == "*":
            return add(mul(du, v), mul(u, dv))
        if self.op == "/":
            return div(sub(mul(du, v), mul(u, dv)), power(v, Num(2.0)))
        # power
        if var not in v.variables():
            return mul(mul(v, power(u, sub(v, ONE))), du)
        return mul(self, add(mul(dv, call("log", u)), div(mul(v, du), u)))


_DERIVATIVES = {
    "sin": lambda u: call("cos", u),
    "cos": lambda u: neg(call("sin", u)),
    "exp": lambda u: call("exp", u),
    "sqrt": lambda u: div(ONE, mul(Num(2.0), call("sqrt", u))),
    "abs": lambda u: call("sign", u),
    "log": lambda u: div(ONE, u),
    "sign": lambda u: ZERO,
}


@dataclass(frozen=True)
class Call(Expr):
    fn: str
    arg: Expr

    def evaluate(self, env):
        return FUNCTIONS[self.fn](self.arg.evaluate(env))

    def diff(self, var):
        return mul(_DERIVATIVES[self.fn](self.arg), self.arg.diff(var))

    def variables(self):
        return self.arg.variables()

    def to_text(self):
        return f"{self.fn}({self.arg.to_text()})"


ZERO = Num(0.0)
ONE = Num(1.0)


# ---------------------------------------------------- simplifying builders

def _num(e):
    return e.value if isinstance(e, Num) else None


def add(a: Expr, b: Expr) -> Expr:
    if _num(a) == 0.0:
        return b
    if _num(b) == 0.0:
        return a
    if _num(a) is not None and _num(b) is not None:
        return Num(a.value + b.value)
    return BinOp("+", a, b)


def sub(a: Expr, b: Expr) -> Expr:
    if _num(b) == 0.0:
        return a
    if _num(a) == 0.0:
        return neg(b)
    if _num(a) is not None and _num(b) is not None:
        return Num(a.value - b.value)
    return BinOp("-", a, b)


def mul(a: Expr, b: Expr) -> Expr:
    if _num(a) == 0.0 or _num(b) == 0.0:
        return ZERO
    if _num(a) == 1.0:
        return b
    if _num(b) == 1.0:
        return a
    if _num(a) is not None and _num(b) is not None:
        return Num(a.value * b.value)
    return BinOp("*", a, b)


def div(a: Expr, b: Expr) -> Expr:
    if _num(a) == 0.0:
        return ZERO
    if _num(b) == 1.0:
        return a
    return BinOp("/", a, b)


def power(a: Expr, b: Expr) -> Expr:
    if _num(b) == 0.0:
        return ONE
    if _num(b) == 1.0:
        return a
    return BinOp("^", a, b)


def neg(a: Expr) -> Expr:
    if _num(a) is not None:
        return Num(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def call(fn: str, a: Expr) -> Expr:
    return Call(fn, a)


# ------------------------------------------------------------------ parser

_TOKEN = re.compile(r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_]\w*)|(?P<op>[-+*/^()]))")


def _tokenize(text: str):
    pos = 0
    out = []
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if m is None:
            off = pos + (len(text[pos:]) - len(text[pos:].lstrip()))
            raise ExpressionError(f"unexpected character {text[off]!r}", off)
        kind = m.lastgroup
        out.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    out.append(("end", "", len(text)))
    return out


class _Parser:
    def __init__(self, text):
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.toks[self.i]

    def next(self):
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        kind, val, off = self.next()
        if val != value:
            what = "end of input" if kind == "end" else repr(val)
            raise ExpressionError(f"expected {value!r}, found {what}", off)

    def parse(self):
        if self.peek()[0] == "end":
            raise ExpressionError("empty expression", 0)
        e = self.expr()
        kind, val, off = self.peek()
        if kind != "end":
            if val == ")":
                raise ExpressionError("unbalanced ')'", off)
            raise ExpressionError(f"unexpected {val!r}", off)
        return e

    def expr(self):
        e = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.next()[1]
            e = BinOp(op, e, self.term())
        return e

    def term(self):
        e = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.next()[1]
            e = BinOp(op, e, self.unary())
        return e

    def unary(self):
        if self.peek()[1] == "-" and self.peek()[0] == "op":
            self.next()
            return Neg(self.unary())
        if self.peek()[1] == "+" and self.peek()[0] == "op":
            self.next()
            return self.unary()
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[1] == "^" and self.peek()[0] == "op":
            self.next()
            return BinOp("^", base, self.unary())
        return base

    def atom(self):
        kind, val, off = self.next()
        if kind == "num":
            return Num(float(val))
        if kind == "name":
            if self.peek()[1] == "(":
                if val not in _USER_FUNCTIONS:
                    raise ExpressionError(f"unknown function {val!r}", off)
                self.next()
                arg = self.expr()
                k2, v2, o2 = self.peek()
                if v2 != ")":
                    raise ExpressionError("unbalanced '('", o2)
                self.next()
                return Call(val, arg)
            if val in VARIABLES:
                return Var(val)
            if val in CONSTANTS:
                return Const(val)
            raise ExpressionError(f"unknown identifier {val!r}", off)
        if val == "(":
            e = self.expr()
            k2, v2, o2 = self.peek()
            if v2 != ")":
                raise ExpressionError("unbalanced '('", o2)
            self.next()
            return e
        if kind == "end":
            raise ExpressionError("unexpected end of input", off)
        raise ExpressionError(f"unexpected {val!r}", off)


def parse_expression(text: str) -> Expr:
    """Parse ``text``; raises :class:`ExpressionError` citing the byte offset."""
    return _Parser(text).parse()


# --------------------------------------------------------- bound evaluation

def _flatten(e: Expr, op: str, out: list, sign: int = 1):
    """Collect operands of an associative +/- or * chain with their signs."""
    if isinstance(e, BinOp) and (e.op == op or (op == "+" and e.op == "-")):
        _flatten(e.left, op, out, sign)
        _flatten(e.right, op, out, -sign if e.op == "-" else sign)
    else:
        out.append((sign, e))


_SEPARATION_LIMIT = 256


def separate(e: Expr, limit: int = _SEPARATION_LIMIT):
    """Split ``e`` into pairs (time_factor, space_factor) summing to ``e``.

    Returns None when ``e`` is not a finite sum of products of t-only and
    (x, y)-only factors, or when more than ``limit`` pairs would be needed.
    """
    v = e.variables()
    if "t" not in v:
        return [(ONE, e)]
    if not v & {"x", "y"}:
        return [(e, ONE)]
    if isinstance(e, Neg):
        inner = separate(e.arg, limit)
        return None if inner is None else [(neg(a), b) for a, b in inner]
    if not isinstance(e, BinOp):
        return None
    if e.op in "+-":
        left, right = separate(e.left, limit), separate(e.right, limit)
        if left is None or right is None or len(left) + len(right) > limit:
            return None
        if e.op == "-":
            right = [(neg(a), b) for a, b in right]
        return left + right
    if e.op == "*":
        left, right = separate(e.left, limit), separate(e.right, limit)
        if left is None or right is None or len(left) * len(right) > limit:
            return None
        return [(mul(a, c), mul(b, d)) for a, b in left for c, d in right]
    if e.op == "/" and "t" not in e.right.variables():
        left = separate(e.left, limit)
        return None if left is None else [(a, div(b, e.right)) for a, b in left]
    if e.op == "/" and not e.right.variables() & {"x", "y"}:
        left = separate(e.left, limit)
        return None if left is None else [(div(a, e.right), b) for a, b in left]
    return None


def separated_terms(expr: Expr, x, y):
    """``expr`` as [(a_k, s_k)] with a_k a t-only expression and s_k its
    summed space factor evaluated at (x, y); None when not separable."""
    pairs = separate(expr)
    if pairs is None:
        return None
    env = {"x": x, "y": y}
    shape = np.broadcast(x, y).shape
    groups: dict[str, list] = {}
    for a, b in pairs:
        key = a.to_text()
        val = np.broadcast_to(np.asarray(b.evaluate(env), dtype=float), shape)
        if key in groups:
            groups[key][1] = groups[key][1] + val
        else:
            groups[key] = [a, np.array(val, dtype=float)]
    return [(a, s) for a, s in groups.values() if np.any(s != 0.0)]


def _bind_separated(terms, shape):
    if not terms:
        zero = np.zeros(shape)
        return lambda t: zero

    def bound(t):
        t = float(t)
        acc = float(terms[0][0].evaluate({"t": t})) * terms[0][1]
        for a, s in terms[1:]:
            acc += float(a.evaluate({"t": t})) * s
        return acc
    return bound


def bind(expr: Expr, x: np.ndarray, y: np.ndarray):
    """Return ``g(t)`` evaluating ``expr`` at fixed points.

    Expressions of the form sum_k a_k(t) b_k(x, y) are evaluated as a short
    combination of cached arrays, one per distinct a_k.  Otherwise subtrees
    free of ``t`` are computed once and product and sum chains are regrouped
    so their space-only factors collapse into one cached array.
    """
    env = {"x": x, "y": y}
    shape = np.broadcast(x, y).shape
    if "t" in expr.variables():
        terms = separated_terms(expr, x, y)
        if terms is not None:
            return _bind_separated(terms, shape)

    def build(e: Expr):
        if "t" not in e.variables():
            val = e.evaluate(env)
            return lambda t: val
        if isinstance(e, BinOp) and e.op in ("+", "-", "*"):
            chain: list = []
            _flatten(e, "*" if e.op == "*" else "+", chain)
            static = [(s, f) for s, f in chain if "t" not in f.variables()]
            dynamic = [(s, build(f)) for s, f in chain if "t" in f.variables()]
            if e.op == "*":
                sval = 1.0
                for _, f in static:
                    sval = sval * f.evaluate(env)

                def prod(t, fs=[g for _, g in dynamic], sval=sval):
                    acc = fs[0](t)
                    for g in fs[1:]:
                        acc = acc * g(t)
                    return sval * acc
                return prod
            sval = 0.0
            for s, f in static:
                sval = sval + s * f.evaluate(env)

            def total(t, fs=dynamic, sval=sval):
                acc = sval
                for s, g in fs:
                    acc = acc + g(t) if s > 0 else acc - g(t)
                return acc
            return total
        if isinstance(e, Var):
            return lambda t: t
        if isinstance(e, Neg):
            g = build(e.arg)
            return lambda t: -g(t)
        if isinstance(e, BinOp):
            gl, gr = build(e.left), build(e.right)
            fn = _BINOPS[e.op]
            return lambda t: fn(gl(t), gr(t))
        if isinstance(e, Call):
            g = build(e.arg)
            fn = FUNCTIONS[e.fn]
            return lambda t: fn(g(t))
        raise TypeError(f"cannot bind {e!r}")

    g = build(expr)

    def bound(t):
        return np.broadcast_to(g(float(t)), shape)
    return bound


def gradient(expr: Expr) -> tuple[Expr, Expr]:
    return expr.diff("x"), expr.diff("y")


def laplacian(expr: Expr) -> Expr:
    return add(expr.diff("x").diff("x"), expr.diff("y").diff("y"))
