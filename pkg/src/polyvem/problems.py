"""Problem data for coupled convection-diffusion-reaction systems.

Species i satisfies, for i = 1..m,

    du_i/dt - div(xi_i grad u_i) + w . grad u_i + u_i sum_j A(i,j) u_j
        + sum_{l,j != i} Q(i,l,j) u_l u_j + sum_j R(i,j) u_j = f_i

with Dirichlet data on the boundary of the unit square.  Coefficients are
:class:`Field` objects so assembly can tell constant data from fields that
need evaluation at quadrature points.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .expression import Expr, Num, bind, parse_expression, separated_terms


class Field:
    """Scalar field f(t, x, y) with an optional point-bound fast path."""

    constant: float | None = None
    time_dependent: bool = True

    def __call__(self, t, x, y):
        raise NotImplementedError

    def bind(self, x, y) -> Callable[[float], np.ndarray]:
        return lambda t: np.broadcast_to(np.asarray(self(t, x, y), dtype=float),
                                         np.broadcast(x, y).shape)

    def separated(self, x, y):
        """[(a_k(t), s_k)] with ``sum_k a_k(t) * s_k`` equal to the field at (x, y),
        or None when no such split is known."""
        if not self.time_dependent:
            vals = np.broadcast_to(np.asarray(self(0.0, x, y), dtype=float),
                                   np.broadcast(x, y).shape)
            return [(lambda t: 1.0, np.array(vals))]
        return None

    @property
    def is_zero(self) -> bool:
        return self.constant == 0.0


class ConstantField(Field):
    time_dependent = False

    def __init__(self, value: float):
        self.constant = float(value)

    def __call__(self, t, x, y):
        return np.full(np.broadcast(x, y).shape, self.constant)

    def __repr__(self):
        return f"ConstantField({self.constant!r})"


class ExprField(Field):
    def __init__(self, expr: Expr | str):
        self.expr = parse_expression(expr) if isinstance(expr, str) else expr
        self.time_dependent = "t" in self.expr.variables()
        if not self.expr.variables() and isinstance(self.expr, Num):
            self.constant = self.expr.value

    def __call__(self, t, x, y):
        return np.broadcast_to(np.asarray(self.expr(x, y, t), dtype=float),
                               np.broadcast(x, y).shape)

    def bind(self, x, y):
        return bind(self.expr, np.asarray(x, dtype=float), np.asarray(y, dtype=float))

    def separated(self, x, y):
        if not self.time_dependent:
            return super().separated(x, y)
        terms = separated_terms(self.expr, np.asarray(x, dtype=float), np.asarray(y, dtype=float))
        if terms is None:
            return None
        return [(lambda t, a=a: float(a.evaluate({"t": float(t)})), s) for a, s in terms]

    def __repr__(self):
        return f"ExprField({self.expr.to_text()!r})"


class FunctionField(Field):
    def __init__(self, fn: Callable, time_dependent: bool = True):
        self.fn = fn
        self.time_dependent = time_dependent

    def __call__(self, t, x, y):
        return self.fn(t, x, y)


def as_field(v) -> Field:
    if isinstance(v, Field):
        return v
    if isinstance(v, (int, float, np.floating, np.integer)):
        return ConstantField(float(v))
    if isinstance(v, (str, Expr)):
        return ExprField(v)
    if callable(v):
        return FunctionField(v)
    raise TypeError(f"cannot interpret {v!r} as a field")


def _matrix_fields(values, shape) -> np.ndarray:
    arr = np.empty(shape, dtype=object)
    src = np.asarray(values, dtype=object)
    if src.shape != shape:
        raise ValueError(f"expected coefficient table of shape {shape}, got {src.shape}")
    for idx in np.ndindex(shape):
        arr[idx] = as_field(src[idx])
    return arr


@dataclass
class ExactSolution:
    value: Field
    grad: tuple[Field, Field]


@dataclass
class ProblemSpec:
    """Coefficients and data for an m-species system."""

    m: int
    xi: list
    omega: tuple
    A: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    forcing: list
    initial: list
    exact: list | None = None
    boundary: list | None = None
    name: str = "custom"
    T: float = 1.0
    xi_floor: float = 1e-12

    def __post_init__(self):
        m = self.m
        self.xi = [as_field(v) for v in self.xi]
        self.omega = tuple(as_field(v) for v in self.omega)
        self.A = _matrix_fields(self.A, (m, m))
        self.Q = _matrix_fields(self.Q, (m, m, m))
        self.R = _matrix_fields(self.R, (m, m))
        self.forcing = [as_field(v) for v in self.forcing]
        self.initial = [as_field(v) for v in self.initial]
        if self.boundary is None:
            self.boundary = [ConstantField(0.0)] * m
        self.boundary = [as_field(v) for v in self.boundary]
        for name, seq in (("xi", self.xi), ("forcing", self.forcing),
                          ("initial", self.initial), ("boundary", self.boundary)):
            if len(seq) != m:
                raise ValueError(f"{name} must have {m} entries, got {len(seq)}")
        if len(self.omega) != 2:
            raise ValueError("omega must have 2 components")
        if self.exact is not None and len(self.exact) != m:
            raise ValueError(f"exact must have {m} entries")
        for i, xi in enumerate(self.xi):
            if xi.constant is not None and xi.constant < self.xi_floor:
                raise ValueError(f"xi[{i}] = {xi.constant} is not positive")

    def check_xi(self, i: int, values: np.ndarray) -> None:
        if np.any(values < self.xi_floor):
            raise ValueError(f"xi[{i}] takes a nonpositive value {values.min():.3e}")

    @property
    def has_exact(self) -> bool:
        return self.exact is not None

    def A_constant(self) -> np.ndarray | None:
        return _constant_table(self.A)

    def R_constant(self) -> np.ndarray | None:
        return _constant_table(self.R)

    def Q_constant(self) -> np.ndarray | None:
        return _constant_table(self.Q)


def _constant_table(table: np.ndarray) -> np.ndarray | None:
    out = np.empty(table.shape)
    for idx in np.ndindex(table.shape):
        c = table[idx].constant
        if c is None:
            return None
        out[idx] = c
    return out


def _as_expr(v) -> Expr:
    if isinstance(v, Expr):
        return v
    if isinstance(v, str):
        return parse_expression(v)
    if isinstance(v, (int, float, np.floating, np.integer)):
        return Num(float(v))
    if isinstance(v, ExprField):
        return v.expr
    if isinstance(v, ConstantField):
        return Num(v.constant)
    raise TypeError(f"manufactured problems need expressions, got {v!r}")


def manufactured_forcing(xi, omega, A, Q, R, exact: Sequence) -> list[Expr]:
    """Forcing expressions that make ``exact`` solve the system."""
    u = [_as_expr(v) for v in exact]
    m = len(u)
    xi = [_as_expr(v) for v in xi]
    w = [_as_expr(v) for v in omega]
    A = np.asarray(A, dtype=object)
    Q = np.asarray(Q, dtype=object)
    R = np.asarray(R, dtype=object)
    out = []
    for i in range(m):
        ux, uy = u[i].diff("x"), u[i].diff("y")
        flux_x, flux_y = xi[i] * ux, xi[i] * uy
        f = u[i].diff("t") - (flux_x.diff("x") + flux_y.diff("y"))
        f = f + w[0] * ux + w[1] * uy
        react = Num(0.0)
        for j in range(m):
            react = react + _as_expr(A[i, j]) * u[j]
        f = f + u[i] * react
        for l in range(m):
            for j in range(m):
                if l != i and j != i:
                    f = f + _as_expr(Q[i, l, j]) * u[l] * u[j]
        for j in range(m):
            f = f + _as_expr(R[i, j]) * u[j]
        out.append(f)
    return out


def manufactured_problem(*, xi, omega, A, Q=None, R=None, exact, name="manufactured",
                         T: float = 1.0) -> ProblemSpec:
    """Problem whose exact solution is given by expressions (strings or trees).

    Initial and Dirichlet data are taken from the exact solution.
    """
    m = len(exact)
    Q = np.zeros((m, m, m)) if Q is None else Q
    R = np.zeros((m, m)) if R is None else R
    ex = [_as_expr(v) for v in exact]
    forcing = manufactured_forcing(xi, omega, A, Q, R, ex)
    sols = [ExactSolution(ExprField(e), (ExprField(e.diff("x")), ExprField(e.diff("y"))))
            for e in ex]
    init = [FunctionField(lambda t, x, y, e=e: e(x, y, 0.0), time_dependent=False) for e in ex]
    return ProblemSpec(
        m=m, xi=list(xi), omega=tuple(omega), A=A, Q=Q, R=R,
        forcing=[ExprField(f) for f in forcing], initial=init,
        exact=sols, boundary=[ExprField(e) for e in ex], name=name, T=T,
    )


# ----------------------------------------------------------- built-ins

EXAMPLE1_EXACT = (
    "exp(t)*x*y*(x-1)^2*(y-1)^2",
    "exp(-t)*x*y*(x-1)*(y-1)",
)

EXAMPLE1_COEFFICIENTS = dict(
    xi=[1.0, 2.0],
    omega=[1.0, 2.0],
    A=[[1.0, 1.5], [1.1, 2.0]],
    R=[[-1.0, 0.0], [2.0, 0.0]],
)

EXAMPLE2_EXACT = (
    "10*sin(pi*x)*sin(pi*y)*cos(t)",
    "5*sin(pi/2*x)*sin(pi*y)*(1+sin(t))",
    "7*sin(pi*x)*cos(pi/2*y)*cos(t)",
    "12*sin(pi*x)*sin(pi*y)*(x+y)*(1+t)",
)

EXAMPLE2_COEFFICIENTS = dict(
    xi=[1.0, 2.0, 1.5, 3.0],
    omega=[1.0, 2.0],
    A=[[1.0, 1.5, 0.5, 1.0],
       [1.1, 2.0, 0.7, 1.2],
       [1.0, 1.5, 3.0, 0.4],
       [1.5, 0.5, 1.4, 2.0]],
    # third row is printed with three entries in the source; read as diagonal -1
    R=[[-1.0, 0.0, 0.0, 0.0],
       [0.0, 2.0, 0.0, 0.0],
       [0.0, 0.0, -1.0, 0.0],
       [0.0, 0.0, 0.0, -1.0]],
)


def example1() -> ProblemSpec:
    """Two species, polynomial manufactured solution."""
    return manufactured_problem(exact=EXAMPLE1_EXACT, name="example1",
                                **EXAMPLE1_COEFFICIENTS)


def example2() -> ProblemSpec:
    """Four species with Lotka-Volterra style competition, trigonometric solution."""
    return manufactured_problem(exact=EXAMPLE2_EXACT, name="example2",
                                **EXAMPLE2_COEFFICIENTS)


EXAMPLES: dict[str, Callable[[], ProblemSpec]] = {
    "example1": example1,
    "example2": example2,
}


def get_example(name: str) -> ProblemSpec:
    try:
        return EXAMPLES[name]()
    except KeyError:
        raise KeyError(f"unknown example {name!r}; available: {', '.join(EXAMPLES)}") from None
