"""Order-p enhanced virtual element space on a polygonal mesh.

Local dof ordering on a cell with n vertices::

    [vertex values (n)] [edge Gauss-Lobatto values, edge by edge (n*(p-1))]
    [scaled moments (1/|E|) (u, m_a)_E for |a| <= p-2]

Projector matrices act on local dof vectors and return coefficients in the
scaled monomial basis m_a(x) = ((x - x_E) / h_E)^a, ordered by total degree.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg as sla

from .mesh import PolygonalMesh, polygon_area, polygon_centroid, polygon_diameter
from .quadrature import QuadratureRule, gauss_lobatto_rule, polygon_rule


class ProjectorError(RuntimeError):
    pass


def dim_poly(p: int) -> int:
    return 0 if p < 0 else (p + 1) * (p + 2) // 2


@lru_cache(maxsize=None)
def monomial_exponents(p: int) -> np.ndarray:
    """Exponents (a, b) for |a+b| <= p: 1, x, y, x^2, xy, y^2, ..."""
    ex = [(d - j, j) for d in range(p + 1) for j in range(d + 1)]
    arr = np.array(ex, dtype=np.int64).reshape(-1, 2)
    arr.setflags(write=False)
    return arr


@lru_cache(maxsize=None)
def _exponent_lookup(p: int) -> dict[tuple[int, int], int]:
    return {(int(a), int(b)): i for i, (a, b) in enumerate(monomial_exponents(p))}


class ScaledMonomialBasis:
    def __init__(self, centroid, diameter: float, p: int):
        self.centroid = np.asarray(centroid, dtype=float)
        self.diameter = float(diameter)
        self.p = p
        self.exponents = monomial_exponents(p)

    @property
    def size(self) -> int:
        return len(self.exponents)

    def _powers(self, pts):
        z = (np.asarray(pts, dtype=float) - self.centroid) / self.diameter
        k = np.arange(self.p + 1)
        return z[..., 0, None] ** k, z[..., 1, None] ** k

    def eval(self, pts) -> np.ndarray:
        """Values with shape ``pts.shape[:-1] + (size,)``."""
        px, py = self._powers(pts)
        a, b = self.exponents[:, 0], self.exponents[:, 1]
        return px[..., a] * py[..., b]

    def grad(self, pts) -> np.ndarray:
        """Gradients with shape ``pts.shape[:-1] + (size, 2)``."""
        px, py = self._powers(pts)
        a, b = self.exponents[:, 0], self.exponents[:, 1]
        am, bm = np.maximum(a - 1, 0), np.maximum(b - 1, 0)
        gx = a * px[..., am] * py[..., b] / self.diameter
        gy = b * px[..., a] * py[..., bm] / self.diameter
        return np.stack([gx, gy], axis=-1)


def poly_to_coefficients(func, basis: ScaledMonomialBasis) -> np.ndarray:
    """Coefficients of a polynomial of degree <= p given as ``func(x, y)``.

    Solved by collocation on a unisolvent set of points around the centroid.
    """
    p = basis.p
    ex = monomial_exponents(p)
    # a principal lattice in the scaled frame is unisolvent for P_p
    z = (ex.astype(float) / max(p, 1)) - 0.3
    pts = basis.centroid + basis.diameter * z
    V = basis.eval(pts)
    vals = np.asarray(func(pts[:, 0], pts[:, 1]), dtype=float)
    return np.linalg.solve(V, np.broadcast_to(vals, (len(pts),)))


# ------------------------------------------------------------------- dofs

@dataclass(frozen=True, eq=False)
class DofMap:
    p: int
    cell_dofs: tuple[np.ndarray, ...]
    n_dofs: int
    n_vertex_dofs: int
    n_edge_dofs: int
    n_moment_dofs: int
    boundary: np.ndarray
    anchors: np.ndarray
    moment_owner: np.ndarray

    def local_count(self, n_vertices: int) -> int:
        return n_vertices * self.p + dim_poly(self.p - 2)

    @property
    def point_dofs(self) -> slice:
        return slice(0, self.n_vertex_dofs + self.n_edge_dofs)


def build_dof_map(mesh: PolygonalMesh, p: int) -> DofMap:
    """Global numbering: vertices, then edge-internal nodes, then cell moments."""
    if p < 1:
        raise ValueError("order p must be >= 1")
    nv, ne, nc = mesh.n_vertices, mesh.n_edges, mesh.n_cells
    nm = dim_poly(p - 2)
    gl = gauss_lobatto_rule(p + 1).points
    edge_base = nv
    mom_base = nv + ne * (p - 1)
    n_dofs = mom_base + nc * nm

    anchors = np.full((n_dofs, 2), np.nan)
    anchors[:nv] = mesh.vertices
    if p > 1:
        va = mesh.vertices[mesh.edges[:, 0]]
        vb = mesh.vertices[mesh.edges[:, 1]]
        s = 0.5 * (gl[1:-1] + 1.0)
        pts = va[:, None, :] + s[None, :, None] * (vb - va)[:, None, :]
        anchors[edge_base:mom_base] = pts.reshape(-1, 2)

    boundary = np.zeros(n_dofs, dtype=bool)
    boundary[:nv] = mesh.boundary_vertex_flags
    boundary[edge_base:mom_base] = np.repeat(mesh.boundary_edge_flags, p - 1)

    owner = np.full(n_dofs, -1, dtype=np.int64)
    cell_dofs = []
    for k, cell in enumerate(mesh.cells):
        n = len(cell)
        loc = list(cell)
        for j, e in enumerate(mesh.cell_edges[k]):
            ids = list(range(edge_base + e * (p - 1), edge_base + (e + 1) * (p - 1)))
            if cell[j] != mesh.edges[e, 0]:
                ids.reverse()
            loc += ids
        moms = list(range(mom_base + k * nm, mom_base + (k + 1) * nm))
        owner[moms] = k
        loc += moms
        arr = np.array(loc, dtype=np.int64)
        assert len(arr) == n * p + nm
        arr.setflags(write=False)
        cell_dofs.append(arr)
    for a in (boundary, anchors, owner):
        a.setflags(write=False)
    return DofMap(p, tuple(cell_dofs), n_dofs, nv, ne * (p - 1), nc * nm,
                  boundary, anchors, owner)


# ------------------------------------------------------------- projectors

class LocalElement:
    """Geometry, quadrature and local dof layout of one cell.

    ``bnd_idx[k]`` lists the p+1 local dofs along edge k (start vertex,
    interior nodes, end vertex), ``bnd_pts`` their positions and
    ``bnd_w`` the Gauss-Lobatto weights scaled by |e|/2.
    """

    def __init__(self, pts: np.ndarray, p: int, quad_degree: int | None = None,
                 cell_id: int | None = None):
        pts = np.asarray(pts, dtype=float)
        self.pts = pts
        self.p = p
        self.cell_id = cell_id
        self.n = n = len(pts)
        self.area = polygon_area(pts)
        self.centroid = polygon_centroid(pts)
        self.diameter = polygon_diameter(pts)
        self.basis = ScaledMonomialBasis(self.centroid, self.diameter, p)
        self.nk = dim_poly(p)
        self.nk1 = dim_poly(p - 1)
        self.nk2 = dim_poly(p - 2)
        self.n_boundary = n * p
        self.nloc = n * p + self.nk2

        gl = gauss_lobatto_rule(p + 1)
        s = 0.5 * (gl.points + 1.0)
        nxt = np.roll(pts, -1, axis=0)
        t = nxt - pts
        length = np.hypot(t[:, 0], t[:, 1])
        self.edge_length = length
        self.normals = np.column_stack([t[:, 1], -t[:, 0]]) / length[:, None]
        self.bnd_pts = pts[:, None, :] + s[None, :, None] * t[:, None, :]
        self.bnd_w = 0.5 * length[:, None] * gl.weights[None, :]
        idx = np.empty((n, p + 1), dtype=np.int64)
        idx[:, 0] = np.arange(n)
        idx[:, -1] = (np.arange(n) + 1) % n
        if p > 1:
            idx[:, 1:-1] = n + np.arange(n)[:, None] * (p - 1) + np.arange(p - 1)[None, :]
        self.bnd_idx = idx

        self.rule: QuadratureRule = polygon_rule(pts, quad_degree if quad_degree is not None
                                                 else 2 * p + 2)
        self.mono_q = self.basis.eval(self.rule.points)
        self.H = (self.mono_q * self.rule.weights[:, None]).T @ self.mono_q
        self.D = self._dof_matrix()

    @property
    def moment_slice(self) -> slice:
        return slice(self.n_boundary, self.nloc)

    def node_points(self) -> np.ndarray:
        """Positions of the n*p boundary point dofs in local order."""
        out = np.empty((self.n_boundary, 2))
        out[self.bnd_idx[:, 0]] = self.bnd_pts[:, 0]
        if self.p > 1:
            out[self.bnd_idx[:, 1:-1].ravel()] = self.bnd_pts[:, 1:-1].reshape(-1, 2)
        return out

    def _dof_matrix(self) -> np.ndarray:
        D = np.empty((self.nloc, self.nk))
        D[: self.n_boundary] = self.basis.eval(self.node_points())
        D[self.n_boundary:] = self.H[: self.nk2] / self.area
        return D

    def boundary_integral(self, g_nodes: np.ndarray) -> np.ndarray:
        """Row vector(s) R with R[..., i] = int_dE g phi_i ds.

        ``g_nodes`` has shape (n, p+1, ...) giving g at the edge nodes; the
        trailing axes are kept.
        """
        g = np.asarray(g_nodes) * self.bnd_w.reshape(self.bnd_w.shape + (1,) * (g_nodes.ndim - 2))
        out = np.zeros(g.shape[2:] + (self.nloc,))
        flat_idx = self.bnd_idx.ravel()
        vals = g.reshape((-1,) + g.shape[2:])
        np.add.at(np.moveaxis(out, -1, 0), flat_idx, vals)
        return out

    def _fail(self, what):
        where = f"cell {self.cell_id}" if self.cell_id is not None else "cell"
        raise ProjectorError(f"singular {what} system on {where}")

    def _solve(self, A, B, what):
        try:
            lu = sla.lu_factor(A, check_finite=True)
        except (ValueError, sla.LinAlgError):
            self._fail(what)
        if np.min(np.abs(np.diag(lu[0]))) <= 1e-14 * np.max(np.abs(np.diag(lu[0]))):
            self._fail(what)
        return sla.lu_solve(lu, B)


def _laplacian_matrix(p: int, h: float) -> np.ndarray:
    """L[a, g]: Delta m_a = sum_g L[a, g] m_g with |g| <= p-2."""
    ex = monomial_exponents(p)
    look = _exponent_lookup(p)
    L = np.zeros((len(ex), dim_poly(p - 2)))
    for i, (a, b) in enumerate(ex):
        if a >= 2:
            L[i, look[(a - 2, b)]] += a * (a - 1) / h ** 2
        if b >= 2:
            L[i, look[(a, b - 2)]] += b * (b - 1) / h ** 2
    return L


def compute_pi_nabla(elem: LocalElement) -> np.ndarray:
    """Matrix (nk x nloc) of the H1 projection, fixed by the boundary mean."""
    grads = elem.basis.grad(elem.bnd_pts)                       # (n, p+1, nk, 2)
    dn = np.einsum("eqkd,ed->eqk", grads, elem.normals)
    B = elem.boundary_integral(dn)                              # (nk, nloc)
    if elem.p >= 2:
        B[:, elem.moment_slice] -= elem.area * _laplacian_matrix(elem.p, elem.diameter)
    ones = np.ones(elem.bnd_idx.shape)
    B[0] = elem.boundary_integral(ones)
    G = B @ elem.D
    return elem._solve(G, B, "Pi-nabla")


def compute_pi0(elem: LocalElement, pi_nabla: np.ndarray) -> np.ndarray:
    """Matrix (nk x nloc) of the L2 projection onto P_p (enhanced space)."""
    C = elem.H @ pi_nabla
    C[: elem.nk2] = 0.0
    C[np.arange(elem.nk2), elem.n_boundary + np.arange(elem.nk2)] = elem.area
    return elem._solve(elem.H, C, "Pi0")


def compute_pi0_grad(elem: LocalElement) -> np.ndarray:
    """Array (2, nk1, nloc): L2 projection of each gradient component onto P_{p-1}."""
    p, nk1 = elem.p, elem.nk1
    ex = monomial_exponents(p - 1)
    look = _exponent_lookup(p)
    mono = elem.basis.eval(elem.bnd_pts)[..., :nk1]              # (n, p+1, nk1)
    out = np.empty((2, nk1, elem.nloc))
    H1 = elem.H[:nk1, :nk1]
    for d in range(2):
        E = elem.boundary_integral(mono * elem.normals[:, None, d, None])
        for b, (ea, eb) in enumerate(ex):
            e_d = (ea, eb)[d]
            if e_d == 0:
                continue
            lower = (ea - 1, eb) if d == 0 else (ea, eb - 1)
            E[b, elem.n_boundary + look[lower]] -= elem.area * e_d / elem.diameter
        out[d] = elem._solve(H1, E, "Pi0-grad")
    return out


@dataclass(eq=False)
class ElementProjectors:
    elem: LocalElement
    dofs: np.ndarray
    Pnabla: np.ndarray
    P0: np.ndarray
    P0grad: np.ndarray

    @property
    def D(self) -> np.ndarray:
        return self.elem.D

    @property
    def stab_nabla(self) -> np.ndarray:
        """(I - D Pnabla): dof vector of u - Pnabla u."""
        return np.eye(self.elem.nloc) - self.elem.D @ self.Pnabla

    @property
    def stab_0(self) -> np.ndarray:
        return np.eye(self.elem.nloc) - self.elem.D @ self.P0


def element_projectors(elem: LocalElement, dofs: np.ndarray) -> ElementProjectors:
    pn = compute_pi_nabla(elem)
    return ElementProjectors(elem, dofs, pn, compute_pi0(elem, pn), compute_pi0_grad(elem))


# ------------------------------------------------------------------ space

@dataclass(eq=False)
class ElementBatch:
    """Cells sharing local dof count and quadrature size, stacked for kernels.

    Shapes: ``dofs (ne, nloc)``, ``P0 (ne, nk, nloc)``, ``Pg (ne, 2, nk1, nloc)``,
    ``qw (ne, nq)``, ``mono_q (ne, nq, nk)``, ``phi0_q (ne, nq, nloc)`` holds
    Pi0 of every local basis function at the quadrature points and
    ``grad_q (ne, nq, 2, nloc)`` the projected gradients there.
    """

    cells: np.ndarray
    dofs: np.ndarray
    area: np.ndarray
    P0: np.ndarray
    Pn: np.ndarray
    Pg: np.ndarray
    H: np.ndarray
    stab0: np.ndarray
    stabn: np.ndarray
    qp: np.ndarray
    qw: np.ndarray
    mono_q: np.ndarray
    phi0_q: np.ndarray
    grad_q: np.ndarray


class VemSpace:
    """Dof map plus per-cell projectors for a mesh and order p."""

    def __init__(self, mesh: PolygonalMesh, p: int):
        self.mesh = mesh
        self.p = p
        self.dofmap = build_dof_map(mesh, p)
        self.elements: list[ElementProjectors] = []
        for k in range(mesh.n_cells):
            elem = LocalElement(mesh.cell_points(k), p, cell_id=k)
            self.elements.append(element_projectors(elem, self.dofmap.cell_dofs[k]))
        self.batches = self._make_batches()

    @property
    def n_dofs(self) -> int:
        return self.dofmap.n_dofs

    @property
    def boundary(self) -> np.ndarray:
        return self.dofmap.boundary

    def _make_batches(self) -> list[ElementBatch]:
        groups: dict[tuple[int, int], list[int]] = {}
        for k, ep in enumerate(self.elements):
            groups.setdefault((ep.elem.nloc, len(ep.elem.rule.weights)), []).append(k)
        nk1 = dim_poly(self.p - 1)
        out = []
        for key in sorted(groups):
            ids = groups[key]
            eps = [self.elements[k] for k in ids]
            P0 = np.stack([e.P0 for e in eps])
            Pg = np.stack([e.P0grad for e in eps])
            mono_q = np.stack([e.elem.mono_q for e in eps])
            grad_q = np.einsum("eqa,edak->eqdk", mono_q[..., :nk1], Pg)
            out.append(ElementBatch(
                cells=np.array(ids),
                dofs=np.stack([e.dofs for e in eps]),
                area=np.array([e.elem.area for e in eps]),
                P0=P0,
                Pn=np.stack([e.Pnabla for e in eps]),
                Pg=Pg,
                H=np.stack([e.elem.H for e in eps]),
                stab0=np.stack([e.stab_0 for e in eps]),
                stabn=np.stack([e.stab_nabla for e in eps]),
                qp=np.stack([e.elem.rule.points for e in eps]),
                qw=np.stack([e.elem.rule.weights for e in eps]),
                mono_q=mono_q,
                phi0_q=mono_q @ P0,
                grad_q=grad_q,
            ))
        return out

    def interpolate(self, f) -> np.ndarray:
        return interpolate(f, self)

    def pi0_coefficients(self, u: np.ndarray) -> list[np.ndarray]:
        """Per-cell Pi0 coefficient vectors of the global dof vector ``u``."""
        return [ep.P0 @ u[ep.dofs] for ep in self.elements]

    def pi_nabla_coefficients(self, u: np.ndarray) -> list[np.ndarray]:
        return [ep.Pnabla @ u[ep.dofs] for ep in self.elements]


def interpolate(f, space: VemSpace) -> np.ndarray:
    """Dof interpolant of ``f(x, y)``: point values plus scaled moments."""
    dm = space.dofmap
    u = np.zeros(dm.n_dofs)
    pts = dm.anchors[dm.point_dofs]
    u[dm.point_dofs] = np.broadcast_to(np.asarray(f(pts[:, 0], pts[:, 1]), dtype=float),
                                       (len(pts),))
    if dm.n_moment_dofs:
        for ep in space.elements:
            e = ep.elem
            fq = np.broadcast_to(np.asarray(f(e.rule.points[:, 0], e.rule.points[:, 1]),
                                            dtype=float), e.rule.weights.shape)
            mom = (e.rule.weights * fq) @ e.mono_q[:, : e.nk2] / e.area
            u[ep.dofs[e.moment_slice]] = mom
    return u
