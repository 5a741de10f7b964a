"""Local VEM forms and global per-species systems of the linearized scheme.

The per-cell functions (``local_*``) are the reference definitions and work
on one :class:`~polyvem.space.ElementProjectors`.  :class:`SystemAssembler`
evaluates the same forms for all cells at once, grouped by local size, and
is what the time loop uses.

Species decouple: for species i the system at t_n is

    [M + dt (K_i + C + G_i)] U_i = M U_i^{n-1} + dt b_i

where G_i and b_i depend on lagged states only.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .linalg import AssemblyPattern
from .problems import ProblemSpec
from .quadrature import polygon_rule
from .space import ElementProjectors, VemSpace, dim_poly


# ----------------------------------------------------------- local forms

def _xy(pts):
    return pts[..., 0], pts[..., 1]


def local_mass(ep: ElementProjectors) -> np.ndarray:
    e = ep.elem
    S = ep.stab_0
    return ep.P0.T @ e.H @ ep.P0 + e.area * S.T @ S


def local_mass_consistency(ep: ElementProjectors) -> np.ndarray:
    return ep.P0.T @ ep.elem.H @ ep.P0


def xi_bar(ep: ElementProjectors, xi, t: float) -> float:
    """Max of |xi| over the cell's quadrature points and vertices."""
    e = ep.elem
    pts = np.vstack([e.rule.points, e.pts])
    return float(np.max(np.abs(xi(t, *_xy(pts)))))


def local_stiffness(ep: ElementProjectors, xi, t: float) -> np.ndarray:
    e = ep.elem
    q = e.rule
    vals = np.asarray(xi(t, *_xy(q.points)), dtype=float)
    vals = np.broadcast_to(vals, q.weights.shape)
    if np.any(vals <= 0):
        raise ValueError(f"diffusion coefficient is not positive on cell {e.cell_id}")
    mono = e.mono_q[:, : e.nk1]
    gx = mono @ ep.P0grad[0]
    gy = mono @ ep.P0grad[1]
    w = q.weights * vals
    K = gx.T @ (w[:, None] * gx) + gy.T @ (w[:, None] * gy)
    S = ep.stab_nabla
    return K + xi_bar(ep, xi, t) * S.T @ S


def local_convection(ep: ElementProjectors, omega, t: float, rule=None) -> np.ndarray:
    """Entries (w . Pi0grad phi_l, Pi0 phi_k)."""
    e = ep.elem
    q = e.rule if rule is None else rule
    mono = e.basis.eval(q.points)
    w1 = np.broadcast_to(omega[0](t, *_xy(q.points)), q.weights.shape)
    w2 = np.broadcast_to(omega[1](t, *_xy(q.points)), q.weights.shape)
    phi = mono @ ep.P0
    adv = (w1[:, None] * (mono[:, : e.nk1] @ ep.P0grad[0])
           + w2[:, None] * (mono[:, : e.nk1] @ ep.P0grad[1]))
    return phi.T @ (q.weights[:, None] * adv)


def local_reaction_implicit(ep: ElementProjectors, i: int, u_lag: np.ndarray,
                            A, R, t: float) -> np.ndarray:
    """Matrix of ((sum_j A(i,j) Pi0 U_j + R(i,i)) Pi0 phi_l, Pi0 phi_k).

    ``u_lag`` has shape (m, nloc): lagged local dofs of all species.
    """
    e = ep.elem
    q = e.rule
    x, y = _xy(q.points)
    phi = e.mono_q @ ep.P0
    coef = np.broadcast_to(R[i, i](t, x, y), q.weights.shape).astype(float)
    for j in range(len(u_lag)):
        if A[i, j].is_zero:
            continue
        coef = coef + A[i, j](t, x, y) * (phi @ u_lag[j])
    return phi.T @ ((q.weights * coef)[:, None] * phi)


def local_coupling_rhs(ep: ElementProjectors, i: int, u_lag: np.ndarray,
                       Q, R, f, t: float) -> np.ndarray:
    """Entries (f_i - sum Q(i,l,j) U_l U_j - sum_{j!=i} R(i,j) U_j, Pi0 phi_k)."""
    e = ep.elem
    q = e.rule
    x, y = _xy(q.points)
    phi = e.mono_q @ ep.P0
    vals = [phi @ u for u in u_lag]
    g = np.broadcast_to(f(t, x, y), q.weights.shape).astype(float)
    m = len(u_lag)
    for l in range(m):
        for j in range(m):
            if l != i and j != i and not Q[i, l, j].is_zero:
                g = g - Q[i, l, j](t, x, y) * vals[l] * vals[j]
    for j in range(m):
        if j != i and not R[i, j].is_zero:
            g = g - R[i, j](t, x, y) * vals[j]
    return phi.T @ (q.weights * g)


# ------------------------------------------------------- batched assembly

class SystemAssembler:
    """Global matrices and right-hand sides for one space and problem.

    Constant coefficients are folded into cached element blocks; fields that
    vary are re-evaluated at the quadrature points each time they are needed.
    Lagged states enter through their per-cell Pi0 coefficients, see
    :meth:`lagged_coefficients`.
    """

    def __init__(self, space: VemSpace, problem: ProblemSpec):
        self.space = space
        self.problem = problem
        self.p = space.p
        self.batches = space.batches
        self.n = space.n_dofs
        self.m = problem.m
        self.free = ~space.boundary
        self.pattern = AssemblyPattern(self.n, [b.dofs for b in self.batches], self.free)

        consistency = [np.einsum("eak,eab,ebl->ekl", b.P0, b.H, b.P0) for b in self.batches]
        self.mass_blocks = [
            c + b.area[:, None, None] * np.einsum("eak,eal->ekl", b.stab0, b.stab0)
            for c, b in zip(consistency, self.batches)
        ]
        self.mass_data = self.pattern.scatter(self.mass_blocks)
        self.M = self.pattern.full(self.mass_data)
        # (Pi0 u, Pi0 v) without stabilization, for lagged linear couplings
        self.M_consistency = self.pattern.full(self.pattern.scatter(consistency))

        self._qx = [b.qp[..., 0] for b in self.batches]
        self._qy = [b.qp[..., 1] for b in self.batches]
        self._forcing = [[f.bind(x, y) for x, y in zip(self._qx, self._qy)]
                         for f in problem.forcing]
        bpts = space.dofmap.anchors[self.pattern.fixed_idx]
        self._bvals = [g.bind(bpts[:, 0], bpts[:, 1]) for g in problem.boundary]
        self._A = problem.A_constant()
        self._R = problem.R_constant()
        self._Q = problem.Q_constant()
        self._has_q = not all(q.is_zero for q in problem.Q.ravel())
        # global Pi0 coefficient map: rows count (cell, monomial) group by group
        self._coef_offsets = np.cumsum([0] + [len(b.cells) * b.P0.shape[1] for b in self.batches])
        self.coef_map = self._build_coefficient_map()
        self._constant_slot = np.zeros(self._coef_offsets[-1])
        for b, off in zip(self.batches, self._coef_offsets):
            self._constant_slot[off:off + len(b.cells) * b.P0.shape[1]:b.P0.shape[1]] = 1.0
        self._reaction_tensor = self._reaction_ff = self._reaction_fb = None
        if self._A is not None and self._R is not None:
            self._reaction_tensor = self._build_reaction_tensor()
            Z = self.pattern.linear_map(self._reaction_tensor)
            self._reaction_ff = Z[self.pattern.free_free_source].tocsr()
            self._reaction_fb = Z[self.pattern.free_fixed_source].tocsr()
        # quadrature values -> load vector entries (w_q Pi0 phi_k(x_q))
        self._qx_all = np.concatenate([x.ravel() for x in self._qx])
        self._qy_all = np.concatenate([y.ravel() for y in self._qy])
        self.load_map = self._build_load_map()
        self._forcing_terms = []
        for f in problem.forcing:
            terms = f.separated(self._qx_all, self._qy_all)
            if terms is not None:
                terms = [(a, self.load_map @ s) for a, s in terms]
            self._forcing_terms.append(terms)
        self._stiff_cache: dict = {}
        self._conv_cache: dict = {}
        self._base_cache: dict = {}
        self._split_cache: dict = {}
        self._load_cache: dict = {}

    # ---------------------------------------------------------- helpers

    def _build_reaction_tensor(self):
        """Per batch T[e, a, k*l] = int m_a Pi0phi_k Pi0phi_l, exact for degree 3p."""
        p = self.p
        out = []
        for b in self.batches:
            nloc = b.dofs.shape[1]
            if 3 * p <= 2 * p + 2:
                T = np.einsum("eqa,eq,eqk,eql->eakl", b.mono_q, b.qw, b.phi0_q, b.phi0_q,
                              optimize=True)
            else:
                T = np.empty((len(b.cells), dim_poly(p), nloc, nloc))
                for j, c in enumerate(b.cells):
                    ep = self.space.elements[c]
                    rule = polygon_rule(ep.elem.pts, 3 * p)
                    mono = ep.elem.basis.eval(rule.points)
                    phi = mono @ ep.P0
                    T[j] = np.einsum("qa,q,qk,ql->akl", mono, rule.weights, phi, phi)
            out.append(T.reshape(len(b.cells), -1, nloc * nloc))
        return out

    def _build_coefficient_map(self) -> sp.csr_matrix:
        rows, cols, vals = [], [], []
        for b, off in zip(self.batches, self._coef_offsets):
            ne, nk, nloc = b.P0.shape
            rows.append(np.broadcast_to((off + np.arange(ne * nk)).reshape(ne, nk, 1),
                                        b.P0.shape).ravel())
            cols.append(np.broadcast_to(b.dofs[:, None, :], b.P0.shape).ravel())
            vals.append(b.P0.ravel())
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(self._coef_offsets[-1], self.n))

    def _build_load_map(self) -> sp.csr_matrix:
        rows, cols, vals = [], [], []
        off = 0
        for b in self.batches:
            ne, nq, nloc = b.phi0_q.shape
            rows.append(np.broadcast_to(b.dofs[:, None, :], b.phi0_q.shape).ravel())
            cols.append(np.broadcast_to((off + np.arange(ne * nq)).reshape(ne, nq, 1),
                                        b.phi0_q.shape).ravel())
            vals.append((b.qw[..., None] * b.phi0_q).ravel())
            off += ne * nq
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(self.n, off))

    @staticmethod
    def _trim(cache: dict, limit: int = 8):
        while len(cache) > limit:
            cache.pop(next(iter(cache)))

    def stiffness_blocks(self, i: int, t: float) -> list[np.ndarray]:
        xi = self.problem.xi[i]
        key = (i, t if xi.time_dependent else None)
        if key in self._stiff_cache:
            return self._stiff_cache[key]
        blocks = []
        for b, x, y in zip(self.batches, self._qx, self._qy):
            if xi.constant is not None:
                nk1 = b.Pg.shape[2]
                consist = xi.constant * np.einsum("edak,eab,edbl->ekl",
                                                  b.Pg, b.H[:, :nk1, :nk1], b.Pg)
                bar = np.full(len(b.cells), abs(xi.constant))
            else:
                vals = np.broadcast_to(xi(t, x, y), x.shape)
                self.problem.check_xi(i, vals)
                consist = np.einsum("eqdk,eq,eqdl->ekl", b.grad_q, b.qw * vals, b.grad_q)
                verts = np.stack([self.space.elements[c].elem.pts for c in b.cells])
                vv = np.abs(xi(t, verts[..., 0], verts[..., 1]))
                bar = np.maximum(np.abs(vals).max(1),
                                 np.broadcast_to(vv, verts.shape[:2]).max(1))
            stab = bar[:, None, None] * np.einsum("eak,eal->ekl", b.stabn, b.stabn)
            blocks.append(consist + stab)
        self._stiff_cache[key] = blocks
        self._trim(self._stiff_cache)
        return blocks

    def convection_blocks(self, t: float) -> list[np.ndarray]:
        w = self.problem.omega
        const = w[0].constant is not None and w[1].constant is not None
        key = None if const else t
        if key in self._conv_cache:
            return self._conv_cache[key]
        blocks = []
        nk1 = dim_poly(self.p - 1)
        for b, x, y in zip(self.batches, self._qx, self._qy):
            if const:
                grad = w[0].constant * b.Pg[:, 0] + w[1].constant * b.Pg[:, 1]
                blocks.append(np.einsum("eak,eab,ebl->ekl", b.P0, b.H[:, :, :nk1], grad))
            else:
                w1 = np.broadcast_to(w[0](t, x, y), x.shape)
                w2 = np.broadcast_to(w[1](t, x, y), x.shape)
                adv = w1[..., None] * b.grad_q[:, :, 0] + w2[..., None] * b.grad_q[:, :, 1]
                blocks.append(np.einsum("eqk,eq,eql->ekl", b.phi0_q, b.qw, adv))
        self._conv_cache[key] = blocks
        self._trim(self._conv_cache)
        return blocks

    def lagged_coefficients(self, lag: np.ndarray) -> list[np.ndarray]:
        """Per batch the (ne, nk, m) Pi0 coefficients of every species.

        The list carries the flat (n_coef, m) array as attribute-free first
        element source; use :meth:`flat_coefficients` to recover it.
        """
        flat = np.asarray(self.coef_map @ np.asarray(lag, dtype=float).T)
        return _CoefficientList(flat, [
            flat[a:b_].reshape(len(b.cells), b.P0.shape[1], -1)
            for b, a, b_ in zip(self.batches, self._coef_offsets[:-1], self._coef_offsets[1:])])

    def reaction_blocks(self, i: int, lag_coef: list[np.ndarray], t: float) -> list[np.ndarray]:
        """Blocks of G_i, each (ne, nloc, nloc)."""
        prob = self.problem
        blocks = []
        if self._reaction_tensor is not None:
            for b, T, c in zip(self.batches, self._reaction_tensor, lag_coef):
                coef = c @ self._A[i]
                coef[:, 0] += self._R[i, i]
                nloc = b.dofs.shape[1]
                blocks.append(np.matmul(coef[:, None, :], T).reshape(-1, nloc, nloc))
            return blocks
        for b, x, y, c in zip(self.batches, self._qx, self._qy, lag_coef):
            vals = np.matmul(b.mono_q, c)
            coef = np.broadcast_to(prob.R[i, i](t, x, y), x.shape).astype(float)
            for j in range(self.m):
                if not prob.A[i, j].is_zero:
                    coef = coef + prob.A[i, j](t, x, y) * vals[..., j]
            blocks.append(np.einsum("eqk,eq,eql->ekl", b.phi0_q, b.qw * coef, b.phi0_q))
        return blocks

    def forcing_vector(self, i: int, t: float) -> np.ndarray:
        """Global vector of (f_i(t), Pi0 phi_k); cached per time level."""
        key = (i, t if self.problem.forcing[i].time_dependent else None)
        out = self._load_cache.get(key)
        if out is None:
            terms = self._forcing_terms[i]
            if terms is not None:
                out = np.zeros(self.n)
                for a, vec in terms:
                    out += a(t) * vec
            else:
                g = np.concatenate([np.broadcast_to(self._forcing[i][bi](t), b.qw.shape).ravel()
                                    for bi, b in enumerate(self.batches)])
                out = self.load_map @ g
            self._load_cache[key] = out
            self._trim(self._load_cache, 4 * self.m)
        return out

    def load_vector(self, i: int, lag_coef: list[np.ndarray], t: float,
                    lag: np.ndarray | None = None) -> np.ndarray:
        """Global vector of (f_i - lagged Q and off-diagonal R terms, Pi0 phi_k).

        With constant R and the full lagged state ``lag`` at hand, the linear
        couplings use the assembled consistency mass instead of quadrature.
        """
        prob = self.problem
        out = self.forcing_vector(i, t).copy()
        fast_r = self._R is not None and lag is not None
        if fast_r:
            mix = sum(self._R[i, j] * lag[j] for j in range(self.m) if j != i and self._R[i, j] != 0)
            if not np.isscalar(mix):
                out -= self.M_consistency @ mix
        if fast_r and not self._has_q:
            return out
        for b, x, y, c in zip(self.batches, self._qx, self._qy, lag_coef):
            vals = np.matmul(b.mono_q, c)
            g = np.zeros(b.qw.shape)
            if not fast_r:
                for j in range(self.m):
                    if j != i and not prob.R[i, j].is_zero:
                        g -= prob.R[i, j](t, x, y) * vals[..., j]
            for l in range(self.m):
                for j in range(self.m):
                    if l == i or j == i or prob.Q[i, l, j].is_zero:
                        continue
                    g -= prob.Q[i, l, j](t, x, y) * vals[..., l] * vals[..., j]
            local = np.matmul((b.qw * g)[:, None, :], b.phi0_q)[:, 0]
            out += np.bincount(b.dofs.ravel(), weights=local.ravel(), minlength=self.n)
        return out

    def boundary_values(self, i: int, t: float) -> np.ndarray:
        return np.broadcast_to(np.asarray(self._bvals[i](t), dtype=float),
                               self.pattern.fixed_idx.shape)

    def boundary_vector(self, i: int, t: float) -> np.ndarray:
        u = np.zeros(self.n)
        u[self.pattern.fixed_idx] = self.boundary_values(i, t)
        return u

    # ------------------------------------------------------------ systems

    def _base_key(self, i: int, t: float, dt: float):
        prob = self.problem
        tdep = prob.xi[i].time_dependent or any(w.time_dependent for w in prob.omega)
        return (i, dt, t if tdep else None)

    def base_data(self, i: int, t: float, dt: float) -> np.ndarray:
        """CSR data of M + dt (K_i + C), cached while the coefficients allow."""
        key = self._base_key(i, t, dt)
        data = self._base_cache.get(key)
        if data is None:
            blocks = [Kb + Cb for Kb, Cb in zip(self.stiffness_blocks(i, t),
                                                 self.convection_blocks(t))]
            data = self.mass_data + dt * self.pattern.scatter(blocks)
            self._base_cache[key] = data
            self._trim(self._base_cache, 2 * self.m)
        return data

    def operator_data(self, i: int, t: float, dt: float, lag_coef) -> np.ndarray:
        """CSR data of M + dt (K_i + C + G_i) on the full pattern."""
        G = self.pattern.scatter(self.reaction_blocks(i, lag_coef, t))
        return self.base_data(i, t, dt) + dt * G

    def _reaction_coefficients(self, i: int, lag_coef) -> np.ndarray:
        c = lag_coef.flat @ self._A[i]
        if self._R[i, i] != 0.0:
            c = c + self._R[i, i] * self._constant_slot
        return c

    def _operator_blocks(self, i: int, t: float, dt: float, lag_coef, need_fixed: bool):
        """Free/free data and, if asked, free/fixed data of the species operator."""
        pat = self.pattern
        if self._reaction_ff is not None:
            key = self._base_key(i, t, dt)
            split = self._split_cache.get(key)
            if split is None:
                base = self.base_data(i, t, dt)
                split = (base[pat.free_free_source], base[pat.free_fixed_source])
                self._split_cache[key] = split
                self._trim(self._split_cache, 2 * self.m)
            c = self._reaction_coefficients(i, lag_coef)
            ff = split[0] + dt * (self._reaction_ff @ c)
            fb = split[1] + dt * (self._reaction_fb @ c) if need_fixed else None
            return ff, fb
        base = self.base_data(i, t, dt)
        data = base + dt * pat.scatter(self.reaction_blocks(i, lag_coef, t))
        return data[pat.free_free_source], (data[pat.free_fixed_source] if need_fixed else None)

    def species_system(self, i: int, lag: np.ndarray, u_prev: np.ndarray, dt: float,
                       t: float, lag_coef=None):
        """Reduced system (A_ff, rhs_f) and the full-length boundary vector.

        ``lag`` is the (m, n_dofs) lagged state, ``u_prev`` species i at t_{n-1}.
        """
        if not dt > 0:
            raise ValueError("dt must be positive")
        lag = np.asarray(lag, dtype=float)
        if lag.shape != (self.m, self.n) or np.shape(u_prev) != (self.n,):
            raise ValueError(f"state dimensions do not match the space: lag {lag.shape}, "
                             f"previous {np.shape(u_prev)}, expected ({self.m}, {self.n})")
        if lag_coef is None:
            lag_coef = self.lagged_coefficients(lag)
        g = self.boundary_values(i, t)
        nonzero_g = bool(np.any(g != 0.0))
        ff, fb = self._operator_blocks(i, t, dt, lag_coef, nonzero_g)
        rhs = self.M @ u_prev + dt * self.load_vector(i, lag_coef, t, lag)
        A_ff = self.pattern.free_free_from(ff)
        rhs_f = rhs[self.pattern.free_idx]
        if nonzero_g:
            rhs_f = rhs_f - self.pattern.free_fixed_from(fb) @ g
        ub = np.zeros(self.n)
        ub[self.pattern.fixed_idx] = g
        return A_ff, rhs_f, ub

    def global_matrix(self, blocks: list[np.ndarray]) -> sp.csr_matrix:
        return self.pattern.full(self.pattern.scatter(blocks))


class _CoefficientList(list):
    """Per-batch coefficient views that also keep the flat array."""

    def __init__(self, flat: np.ndarray, views):
        super().__init__(views)
        self.flat = flat


def assemble_species_system(space: VemSpace, problem: ProblemSpec, i: int, lag: np.ndarray,
                            u_prev: np.ndarray, dt: float, t: float,
                            assembler: SystemAssembler | None = None):
    """Reduced system of species i at time t; see :meth:`SystemAssembler.species_system`."""
    asm = assembler if assembler is not None else SystemAssembler(space, problem)
    return asm.species_system(i, lag, u_prev, dt, t)
