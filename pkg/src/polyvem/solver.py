"""Time stepping: linearized backward Euler, fixed-point iteration, two-grid.

One linearized step solves, for every species independently, the system
assembled with all nonlinear and cross-species terms evaluated at a lagged
state.  The iteration method repeats the step with the lag set to the
previous iterate until successive iterates agree; the two-grid method does
that only on a coarse mesh, transfers the coarse result to the fine space,
and finishes with a fixed number of fine linearized solves.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import shapely
from shapely.geometry.polygon import orient

from .assembly import SystemAssembler
from .linalg import CachedLU, solve
from .problems import ProblemSpec
from .quadrature import polygon_rule
from .space import VemSpace

ALGORITHMS = ("iteration", "twogrid")
ABS_FALLBACK = 1e-14


class ConvergenceError(RuntimeError):
    """Fixed-point iteration hit ``max_iter`` without meeting the tolerance."""

    def __init__(self, step: int, residual: float, max_iter: int):
        super().__init__(f"iteration did not converge at step {step} after {max_iter} "
                         f"iterations (last relative change {residual:.3e})")
        self.step = step
        self.residual = residual


class TransferError(RuntimeError):
    pass


@dataclass
class DiscreteState:
    """All species' dof vectors at time ``t``; ``U`` has shape (m, n_dofs)."""

    t: float
    U: np.ndarray

    @property
    def m(self) -> int:
        return self.U.shape[0]

    def copy(self) -> "DiscreteState":
        return DiscreteState(self.t, self.U.copy())


@dataclass
class SolverConfig:
    dt: float
    T: float = 1.0
    algorithm: str = "iteration"
    tol: float = 1e-6
    ctol: float = 1e-3
    fiter: int = 1
    max_iter: int = 100

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.T >= self.dt * (1 - 1e-12):
            raise ValueError("T must be at least dt")
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; "
                             f"choose from {', '.join(ALGORITHMS)}")
        if not (self.tol > 0 and self.ctol > 0):
            raise ValueError("tol and ctol must be positive")
        if self.fiter < 1 or self.max_iter < 1:
            raise ValueError("fiter and max_iter must be at least 1")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))


@dataclass
class Trajectory:
    state: DiscreteState
    iterations: list[int]
    seconds: float
    coarse_iterations: list[int] = field(default_factory=list)
    coarse_state: DiscreteState | None = None

    @property
    def n_steps(self) -> int:
        return len(self.iterations)


# ------------------------------------------------------------- stepping

class LinearizedStepper:
    """Reusable assembler plus one factorization cache per species."""

    def __init__(self, space: VemSpace, problem: ProblemSpec):
        self.space = space
        self.problem = problem
        self.assembler = SystemAssembler(space, problem)
        self.lu = [CachedLU() for _ in range(problem.m)]
        self.solves = 0

    @property
    def m(self) -> int:
        return self.problem.m

    def initial_state(self) -> DiscreteState:
        U = np.stack([self.space.interpolate(lambda x, y, f=f: f(0.0, x, y))
                      for f in self.problem.initial])
        self.apply_boundary(U, 0.0)
        return DiscreteState(0.0, U)

    def apply_boundary(self, U: np.ndarray, t: float) -> None:
        fixed = self.assembler.pattern.fixed_idx
        for i in range(self.m):
            U[i, fixed] = self.assembler.boundary_values(i, t)

    def step(self, u_prev: np.ndarray, lag: np.ndarray, t: float, dt: float) -> np.ndarray:
        """Solve all species at time ``t`` from ``u_prev`` (time t - dt) with lag ``lag``."""
        asm = self.assembler
        free = asm.pattern.free_idx
        lag_coef = asm.lagged_coefficients(lag)
        out = np.empty_like(u_prev)
        for i in range(self.m):
            A, rhs, ub = asm.species_system(i, lag, u_prev[i], dt, t, lag_coef=lag_coef)
            x0 = lag[i, free]
            ub[free] = self.lu[i].solve(A, rhs, x0=x0 if np.any(x0) else None)
            out[i] = ub
            self.solves += 1
        return out

    def residual(self, U: np.ndarray, u_prev: np.ndarray, t: float, dt: float) -> float:
        """Relative residual of the nonlinear scheme with every lag set to ``U``."""
        asm = self.assembler
        free = asm.pattern.free_idx
        lag_coef = asm.lagged_coefficients(U)
        num = den = 0.0
        for i in range(self.m):
            A, rhs, _ = asm.species_system(i, U, u_prev[i], dt, t, lag_coef=lag_coef)
            r = A @ U[i, free] - rhs
            num += float(r @ r)
            den += float(rhs @ rhs)
        return math.sqrt(num) / max(math.sqrt(den), ABS_FALLBACK)


def relative_change(new: np.ndarray, old: np.ndarray) -> float:
    diff = np.linalg.norm(new - old)
    norm = np.linalg.norm(new)
    if norm <= ABS_FALLBACK:
        return diff
    return diff / norm


def step_linearized(state: DiscreteState, lag: DiscreteState, problem: ProblemSpec,
                    space: VemSpace, dt: float,
                    stepper: LinearizedStepper | None = None) -> DiscreteState:
    """One linearized backward-Euler step from ``state`` with lagged data ``lag``."""
    st = stepper if stepper is not None else LinearizedStepper(space, problem)
    t = state.t + dt
    return DiscreteState(t, st.step(state.U, lag.U, t, dt))


def _fixed_point(stepper: LinearizedStepper, u_prev: np.ndarray, t: float, dt: float,
                 tol: float, max_iter: int, step_index: int):
    lag = u_prev
    change = np.inf
    for r in range(1, max_iter + 1):
        new = stepper.step(u_prev, lag, t, dt)
        change = relative_change(new, lag)
        lag = new
        if change < tol:
            return new, r
    raise ConvergenceError(step_index, change, max_iter)


def run_iteration_method(problem: ProblemSpec, mesh, space: VemSpace, config: SolverConfig,
                         stepper: LinearizedStepper | None = None) -> Trajectory:
    """Fixed-point iteration at every time step until successive iterates agree."""
    st = stepper if stepper is not None else LinearizedStepper(space, problem)
    state = st.initial_state()
    n_steps = config.n_steps
    dt = config.T / n_steps
    iters = []
    t0 = time.perf_counter()
    U = state.U
    for n in range(1, n_steps + 1):
        t = n * dt
        U, r = _fixed_point(st, U, t, dt, config.tol, config.max_iter, n)
        iters.append(r)
    seconds = time.perf_counter() - t0
    return Trajectory(DiscreteState(n_steps * dt, U), iters, seconds)


# ------------------------------------------------------------- transfer

def locate_points(mesh, pts: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Index of the cell containing each point; ties go to the lowest index."""
    polys = [shapely.Polygon(mesh.cell_points(k)) for k in range(mesh.n_cells)]
    tree = shapely.STRtree(polys)
    geoms = shapely.points(pts)
    qi, ci = tree.query(geoms, predicate="intersects")
    cell = np.full(len(pts), -1, dtype=np.int64)
    order = np.lexsort((ci, qi))
    qi, ci = qi[order], ci[order]
    first = np.r_[True, qi[1:] != qi[:-1]]
    cell[qi[first]] = ci[first]
    for k in np.flatnonzero(cell < 0):
        near = tree.nearest(geoms[k])
        if shapely.distance(polys[near], geoms[k]) > tol:
            raise TransferError(f"point ({pts[k, 0]:.6g}, {pts[k, 1]:.6g}) lies outside the coarse mesh")
        cell[k] = near
    return cell


def _polygon_pieces(geom):
    if geom.is_empty:
        return []
    if geom.geom_type == "Polygon":
        return [geom] if geom.area > 0 else []
    if hasattr(geom, "geoms"):
        return [g for part in geom.geoms for g in _polygon_pieces(part)]
    return []


def transfer_matrix(coarse: VemSpace, fine: VemSpace) -> sp.csr_matrix:
    """Sparse map from coarse dofs to fine dofs through the coarse Pi0 projection."""
    if coarse.p != fine.p:
        raise ValueError("coarse and fine spaces must have the same order")
    dm = fine.dofmap
    rows, cols, vals = [], [], []
    pts = dm.anchors[dm.point_dofs]
    owner = locate_points(coarse.mesh, pts)
    point_ids = np.arange(dm.n_dofs)[dm.point_dofs]
    for c in np.unique(owner):
        sel = np.flatnonzero(owner == c)
        ep = coarse.elements[c]
        w = ep.elem.basis.eval(pts[sel]) @ ep.P0
        rows.append(np.repeat(point_ids[sel], len(ep.dofs)))
        cols.append(np.tile(ep.dofs, len(sel)))
        vals.append(w.ravel())
    if dm.n_moment_dofs:
        p = fine.p
        cpolys = [shapely.Polygon(coarse.mesh.cell_points(k)) for k in range(coarse.mesh.n_cells)]
        tree = shapely.STRtree(cpolys)
        for fe in fine.elements:
            e = fe.elem
            mdofs = fe.dofs[e.moment_slice]
            fpoly = shapely.Polygon(e.pts)
            for c in np.sort(tree.query(fpoly, predicate="intersects")):
                ce = coarse.elements[c]
                for piece in _polygon_pieces(shapely.intersection(fpoly, cpolys[c])):
                    if piece.area <= 1e-14 * e.area:
                        continue
                    if piece.interiors:
                        raise TransferError("coarse/fine intersection with a hole")
                    ring = np.asarray(orient(piece, 1.0).exterior.coords)[:-1]
                    rule = polygon_rule(ring, 2 * p)
                    phi = ce.elem.basis.eval(rule.points) @ ce.P0
                    mf = e.basis.eval(rule.points)[:, : e.nk2]
                    block = (mf * rule.weights[:, None]).T @ phi / e.area
                    rows.append(np.repeat(mdofs, len(ce.dofs)))
                    cols.append(np.tile(ce.dofs, len(mdofs)))
                    vals.append(block.ravel())
    T = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(dm.n_dofs, coarse.n_dofs)).tocsr()
    T.sum_duplicates()
    return T


def transfer_coarse_to_fine(coarse_state: DiscreteState, coarse: VemSpace, fine: VemSpace,
                            matrix: sp.csr_matrix | None = None) -> np.ndarray:
    """Fine dof vectors, shape (m, n_fine), of the coarse piecewise Pi0 field."""
    T = matrix if matrix is not None else transfer_matrix(coarse, fine)
    return np.asarray((T @ coarse_state.U.T).T)


def run_twogrid_method(problem: ProblemSpec, coarse_mesh, coarse_space: VemSpace,
                       fine_mesh, fine_space: VemSpace, config: SolverConfig,
                       coarse_stepper: LinearizedStepper | None = None,
                       fine_stepper: LinearizedStepper | None = None,
                       transfer: sp.csr_matrix | None = None) -> Trajectory:
    """Coarse fixed-point solve, transfer, then ``fiter`` fine linearized solves per step."""
    cst = coarse_stepper if coarse_stepper is not None else LinearizedStepper(coarse_space, problem)
    fst = fine_stepper if fine_stepper is not None else LinearizedStepper(fine_space, problem)
    T = transfer if transfer is not None else transfer_matrix(coarse_space, fine_space)
    Uc = cst.initial_state().U
    U = fst.initial_state().U
    n_steps = config.n_steps
    dt = config.T / n_steps
    fixed = fst.assembler.pattern.fixed_idx
    iters, citers = [], []
    t0 = time.perf_counter()
    for n in range(1, n_steps + 1):
        t = n * dt
        Uc, rc = _fixed_point(cst, Uc, t, dt, config.ctol, config.max_iter, n)
        lag = np.asarray((T @ Uc.T).T)
        for i in range(problem.m):
            lag[i, fixed] = fst.assembler.boundary_values(i, t)
        for _ in range(config.fiter):
            lag = fst.step(U, lag, t, dt)
        U = lag
        iters.append(config.fiter)
        citers.append(rc)
    seconds = time.perf_counter() - t0
    return Trajectory(DiscreteState(n_steps * dt, U), iters, seconds,
                      coarse_iterations=citers,
                      coarse_state=DiscreteState(n_steps * dt, Uc))


def run(problem: ProblemSpec, config: SolverConfig, space: VemSpace,
        coarse_space: VemSpace | None = None) -> Trajectory:
    if config.algorithm == "iteration":
        return run_iteration_method(problem, space.mesh, space, config)
    if coarse_space is None:
        raise ValueError("the two-grid method needs a coarse space")
    return run_twogrid_method(problem, coarse_space.mesh, coarse_space, space.mesh, space, config)


# ------------------------------------------------------------ stationary

def solve_steady_diffusion(space: VemSpace, xi=1.0, f=0.0, g=0.0) -> np.ndarray:
    """Dofs of the VEM solution of -div(xi grad u) = f with u = g on the boundary."""
    problem = ProblemSpec(m=1, xi=[xi], omega=(0.0, 0.0), A=[[0.0]], Q=[[[0.0]]], R=[[0.0]],
                          forcing=[f], initial=[0.0], boundary=[g])
    asm = SystemAssembler(space, problem)
    K = asm.pattern.scatter(asm.stiffness_blocks(0, 0.0))
    zero = np.zeros((1, space.n_dofs))
    b = asm.load_vector(0, asm.lagged_coefficients(zero), 0.0)
    free = asm.pattern.free_idx
    gB = asm.boundary_values(0, 0.0)
    rhs = b[free] - asm.pattern.free_fixed(K) @ gB
    u = asm.boundary_vector(0, 0.0)
    u[free] = solve(asm.pattern.free_free(K), rhs)
    return u
