"""Polygonal meshes of the unit square.

A mesh is stored as a vertex array plus a list of counter-clockwise vertex
loops.  Edges, adjacency and boundary flags are derived on construction and
the object is treated as immutable afterwards.

Three families are provided: randomly distorted squares, a zigzag family
with one reflex vertex per cell, and Lloyd-relaxed clipped Voronoi meshes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linprog
from scipy.spatial import Voronoi


class MeshError(ValueError):
    """Raised for structurally invalid meshes or malformed mesh files."""


_BOUNDARY_TOL = 1e-12


def polygon_area(pts: np.ndarray) -> float:
    """Signed shoelace area; positive for counter-clockwise loops."""
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def polygon_centroid(pts: np.ndarray) -> np.ndarray:
    x, y = pts[:, 0], pts[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    a = 0.5 * cross.sum()
    cx = ((x + xn) * cross).sum() / (6.0 * a)
    cy = ((y + yn) * cross).sum() / (6.0 * a)
    return np.array([cx, cy])


def polygon_diameter(pts: np.ndarray) -> float:
    d = pts[:, None, :] - pts[None, :, :]
    return float(np.sqrt((d ** 2).sum(-1)).max())


def _segments_cross(p1, p2, q1, q2) -> bool:
    """Proper intersection test for two closed segments (touching counts)."""
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return 0 if abs(v) < 1e-15 else (1 if v > 0 else -1)

    def on_seg(a, b, c):
        return (min(a[0], b[0]) - 1e-15 <= c[0] <= max(a[0], b[0]) + 1e-15
                and min(a[1], b[1]) - 1e-15 <= c[1] <= max(a[1], b[1]) + 1e-15)

    o1, o2 = orient(p1, p2, q1), orient(p1, p2, q2)
    o3, o4 = orient(q1, q2, p1), orient(q1, q2, p2)
    if o1 != o2 and o3 != o4:
        return True
    if o1 == 0 and on_seg(p1, p2, q1):
        return True
    if o2 == 0 and on_seg(p1, p2, q2):
        return True
    if o3 == 0 and on_seg(q1, q2, p1):
        return True
    if o4 == 0 and on_seg(q1, q2, p2):
        return True
    return False


def is_simple_polygon(pts: np.ndarray) -> bool:
    """True if no two non-adjacent edges of the closed loop intersect."""
    n = len(pts)
    if n < 3:
        return False
    for i in range(n):
        a, b = pts[i], pts[(i + 1) % n]
        if np.allclose(a, b, atol=1e-15):
            return False
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue
            if _segments_cross(a, b, pts[j], pts[(j + 1) % n]):
                return False
    return True


def chebyshev_kernel_center(pts: np.ndarray) -> tuple[np.ndarray, float]:
    """Centre and radius of the largest disc inside the polygon kernel.

    The kernel is the intersection of the inner half-planes of all edges, so
    the largest inscribed disc solves a three-variable linear program.  A
    negative radius means the kernel is empty.
    """
    n = len(pts)
    nxt = np.roll(pts, -1, axis=0)
    t = nxt - pts
    length = np.hypot(t[:, 0], t[:, 1])
    inward = np.column_stack([-t[:, 1], t[:, 0]]) / length[:, None]
    # inward . (c - v) >= r   <=>   -inward . c + r <= -inward . v
    a_ub = np.column_stack([-inward, np.ones(n)])
    b_ub = -(inward * pts).sum(1)
    lo, hi = pts.min(0), pts.max(0)
    res = linprog(
        c=[0.0, 0.0, -1.0], A_ub=a_ub, b_ub=b_ub,
        bounds=[(lo[0], hi[0]), (lo[1], hi[1]), (None, None)],
        method="highs",
    )
    if res.status != 0:
        raise MeshError(f"kernel linear program failed: {res.message}")
    return np.array(res.x[:2]), float(res.x[2])


@dataclass(frozen=True, eq=False)
class PolygonalMesh:
    """Conforming polygonal partition of the unit square.

    ``cells`` holds counter-clockwise vertex loops.  ``edges`` is an
    ``(E, 2)`` array with sorted vertex pairs, ``edge_cells`` the adjacent
    cells (second entry ``-1`` on the boundary) and ``cell_edges`` the edge
    indices of each cell in loop order (edge k joins local vertices k, k+1).
    """

    vertices: np.ndarray
    cells: tuple[tuple[int, ...], ...]
    edges: np.ndarray = field(init=False, repr=False)
    edge_cells: np.ndarray = field(init=False, repr=False)
    cell_edges: tuple[tuple[int, ...], ...] = field(init=False, repr=False)
    boundary_vertex_flags: np.ndarray = field(init=False, repr=False)
    boundary_edge_flags: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        verts = np.ascontiguousarray(self.vertices, dtype=float)
        if verts.ndim != 2 or verts.shape[1] != 2:
            raise MeshError("vertices must be an (N, 2) array")
        verts.setflags(write=False)
        object.__setattr__(self, "vertices", verts)
        cells = tuple(tuple(int(i) for i in c) for c in self.cells)
        object.__setattr__(self, "cells", cells)
        nv = len(verts)
        for k, c in enumerate(cells):
            if len(c) < 3:
                raise MeshError(f"cell {k} has fewer than 3 vertices")
            bad = [i for i in c if i < 0 or i >= nv]
            if bad:
                raise MeshError(f"cell {k} references missing vertex {bad[0]}")
            if len(set(c)) != len(c):
                raise MeshError(f"cell {k} repeats a vertex")

        edge_index: dict[tuple[int, int], int] = {}
        edge_list: list[tuple[int, int]] = []
        adj: list[list[int]] = []
        cell_edges = []
        for k, c in enumerate(cells):
            ce = []
            for a, b in zip(c, c[1:] + c[:1]):
                key = (a, b) if a < b else (b, a)
                e = edge_index.get(key)
                if e is None:
                    e = len(edge_list)
                    edge_index[key] = e
                    edge_list.append(key)
                    adj.append([])
                adj[e].append(k)
                ce.append(e)
            cell_edges.append(tuple(ce))
        for e, cs in enumerate(adj):
            if len(cs) > 2:
                raise MeshError(f"edge {edge_list[e]} is shared by cells {cs}")
        edges = np.array(edge_list, dtype=np.int64).reshape(-1, 2)
        edge_cells = np.array([cs + [-1] * (2 - len(cs)) for cs in adj],
                              dtype=np.int64).reshape(-1, 2)
        bnd_edge = edge_cells[:, 1] < 0
        bnd_vert = np.zeros(nv, dtype=bool)
        bnd_vert[edges[bnd_edge].ravel()] = True
        for arr in (edges, edge_cells, bnd_edge, bnd_vert):
            arr.setflags(write=False)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "edge_cells", edge_cells)
        object.__setattr__(self, "cell_edges", tuple(cell_edges))
        object.__setattr__(self, "boundary_edge_flags", bnd_edge)
        object.__setattr__(self, "boundary_vertex_flags", bnd_vert)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def cell_points(self, k: int) -> np.ndarray:
        return self.vertices[list(self.cells[k])]

    def cell_areas(self) -> np.ndarray:
        return np.array([polygon_area(self.cell_points(k)) for k in range(self.n_cells)])

    def cell_diameters(self) -> np.ndarray:
        return np.array([polygon_diameter(self.cell_points(k)) for k in range(self.n_cells)])

    @property
    def h(self) -> float:
        return float(self.cell_diameters().max())

    def check(self, domain_area: float = 1.0) -> None:
        """Raise :class:`MeshError` if a structural invariant fails."""
        problems = structural_problems(self, domain_area)
        if problems:
            raise MeshError("; ".join(problems))


def structural_problems(mesh: PolygonalMesh, domain_area: float = 1.0) -> list[str]:
    out = []
    areas = mesh.cell_areas()
    for k in range(mesh.n_cells):
        if areas[k] <= 0:
            out.append(f"cell {k} is not counter-clockwise (area {areas[k]:.3e})")
        elif not is_simple_polygon(mesh.cell_points(k)):
            out.append(f"cell {k} is self-intersecting")
    total = areas.sum()
    if abs(total - domain_area) > 1e-10 * domain_area:
        out.append(f"cell areas sum to {total!r}, expected {domain_area!r}")
    # boundary edges must lie on the square's sides
    for e in np.flatnonzero(mesh.boundary_edge_flags):
        p, q = mesh.vertices[mesh.edges[e]]
        on_side = any(
            abs(p[d] - s) < 1e-10 and abs(q[d] - s) < 1e-10
            for d in (0, 1) for s in (0.0, 1.0)
        )
        if not on_side:
            c = mesh.edge_cells[e, 0]
            out.append(f"cell {c} has an unmatched interior edge {tuple(mesh.edges[e])}")
    return out


# ---------------------------------------------------------------- generators

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (x + np.uint64(0x9E3779B97F4A7C15)) & _MASK64
        z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _MASK64
        z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _MASK64
        return z ^ (z >> np.uint64(31))


def _unit_uniform(seed: int, index: np.ndarray, stream: int) -> np.ndarray:
    """Deterministic uniforms in [-1, 1) keyed by (seed, index, stream)."""
    with np.errstate(over="ignore"):
        key = (np.uint64(seed) * np.uint64(0x100000001B3)
               + index.astype(np.uint64) * np.uint64(2) + np.uint64(stream))
    bits = _splitmix64(_splitmix64(key)) >> np.uint64(11)
    return bits.astype(np.float64) / float(1 << 53) * 2.0 - 1.0


def _grid_vertices(n: int) -> np.ndarray:
    s = np.linspace(0.0, 1.0, n + 1)
    xx, yy = np.meshgrid(s, s, indexing="xy")
    return np.column_stack([xx.ravel(), yy.ravel()])


def generate_distorted_squares(n: int, distortion: float = 0.2, seed: int = 0) -> PolygonalMesh:
    """n x n quadrilaterals with interior vertices randomly displaced.

    Each interior vertex moves by at most ``distortion / n`` per coordinate.
    """
    if n < 1:
        raise MeshError("n must be >= 1")
    if not 0.0 <= distortion < 0.5:
        raise MeshError("distortion must lie in [0, 0.5)")
    verts = _grid_vertices(n)
    idx = np.arange(len(verts))
    i, j = idx % (n + 1), idx // (n + 1)
    interior = (i > 0) & (i < n) & (j > 0) & (j < n)
    if distortion > 0 and interior.any():
        dx = _unit_uniform(seed, idx, 0)
        dy = _unit_uniform(seed, idx, 1)
        verts[interior, 0] += distortion / n * dx[interior]
        verts[interior, 1] += distortion / n * dy[interior]
    cells = []
    for r in range(n):
        for c in range(n):
            v0 = r * (n + 1) + c
            cells.append((v0, v0 + 1, v0 + n + 2, v0 + n + 1))
    mesh = PolygonalMesh(verts, cells)
    mesh.check()
    return mesh


def generate_nonconvex(n: int, offset: float = 0.1) -> PolygonalMesh:
    """Split every grid square along a zigzag between opposite corners.

    The zigzag runs corner (0,0) -> P1 -> P2 -> corner (1,1) of each square,
    with P1 pushed to the upper-left and P2 to the lower-right of the
    diagonal by ``offset`` (in units of the square side).  Each of the two
    resulting pentagons has exactly one reflex vertex.
    """
    if n < 1:
        raise MeshError("n must be >= 1")
    grid = _grid_vertices(n)
    s = 1.0 / n
    extra = []
    cells = []
    base = len(grid)
    for r in range(n):
        for c in range(n):
            x0, y0 = c * s, r * s
            p1 = (x0 + s * (1 / 3 - offset), y0 + s * (1 / 3 + offset))
            p2 = (x0 + s * (2 / 3 + offset), y0 + s * (2 / 3 - offset))
            k1 = base + len(extra)
            extra += [p1, p2]
            k2 = k1 + 1
            v0 = r * (n + 1) + c
            v1, v2, v3 = v0 + 1, v0 + n + 2, v0 + n + 1
            cells.append((v0, v1, v2, k2, k1))    # lower-right piece
            cells.append((v0, k1, k2, v2, v3))    # upper-left piece
    verts = np.vstack([grid, np.array(extra)])
    mesh = PolygonalMesh(verts, cells)
    mesh.check()
    return mesh


def _clipped_voronoi(seeds: np.ndarray) -> tuple[np.ndarray, list[list[int]]]:
    """Voronoi cells of ``seeds`` clipped to the unit square by mirroring."""
    n = len(seeds)
    pts = np.vstack([
        seeds,
        np.column_stack([-seeds[:, 0], seeds[:, 1]]),
        np.column_stack([2.0 - seeds[:, 0], seeds[:, 1]]),
        np.column_stack([seeds[:, 0], -seeds[:, 1]]),
        np.column_stack([seeds[:, 0], 2.0 - seeds[:, 1]]),
    ])
    vor = Voronoi(pts, qhull_options="Qbb Qc Qz")
    vv = vor.vertices.copy()
    vv[np.abs(vv) < 1e-10] = 0.0
    vv[np.abs(vv - 1.0) < 1e-10] = 1.0
    # merge numerically coincident Voronoi vertices
    key = np.round(vv / 1e-11).astype(np.int64)
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.ravel()
    raw_cells = []
    for k in range(n):
        region = vor.regions[vor.point_region[k]]
        if -1 in region or len(region) == 0:
            raise MeshError("unbounded Voronoi region for an interior seed")
        loop = []
        for v in region:
            g = int(inverse[v])
            if not loop or loop[-1] != g:
                loop.append(g)
        if len(loop) > 1 and loop[0] == loop[-1]:
            loop.pop()
        raw_cells.append(loop)
    used = sorted({v for c in raw_cells for v in c})
    remap = {v: i for i, v in enumerate(used)}
    verts = vv[first][used]
    cells = []
    for loop in raw_cells:
        c = [remap[v] for v in loop]
        if polygon_area(verts[c]) < 0:
            c = c[::-1]
        cells.append(c)
    return verts, cells


def _lloyd_step(seeds: np.ndarray) -> np.ndarray:
    verts, cells = _clipped_voronoi(seeds)
    return np.array([polygon_centroid(verts[c]) for c in cells])


def generate_voronoi(n_seeds: int, lloyd_iterations: int = 100, seed: int = 0,
                     max_retries: int = 5) -> PolygonalMesh:
    """Clipped Voronoi mesh of the unit square with Lloyd relaxation."""
    if n_seeds < 1:
        raise MeshError("n_seeds must be >= 1")
    rng = np.random.default_rng(seed)
    seeds = rng.random((n_seeds, 2))
    last_error = None
    for attempt in range(max_retries + 1):
        try:
            pts = seeds.copy()
            for _ in range(lloyd_iterations):
                pts = _lloyd_step(pts)
            verts, cells = _clipped_voronoi(pts)
            mesh = PolygonalMesh(verts, cells)
            mesh.check()
            return mesh
        except Exception as exc:   # qhull or topology failure on degenerate input
            last_error = exc
            seeds = np.clip(seeds + 1e-6 * rng.standard_normal(seeds.shape), 1e-9, 1 - 1e-9)
    raise MeshError(f"Voronoi generation failed after {max_retries} retries: {last_error}")


def voronoi_from_seeds(seeds: np.ndarray) -> PolygonalMesh:
    """Clipped Voronoi mesh for explicit generator points (no relaxation)."""
    verts, cells = _clipped_voronoi(np.asarray(seeds, dtype=float))
    mesh = PolygonalMesh(verts, cells)
    mesh.check()
    return mesh


def unit_square() -> PolygonalMesh:
    return PolygonalMesh(np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float), [(0, 1, 2, 3)])


MESH_FAMILIES = ("distorted", "nonconvex", "voronoi")


def make_mesh(family: str, n: int, *, distortion: float = 0.2, seed: int = 0,
              lloyd_iterations: int = 100) -> PolygonalMesh:
    """Mesh at resolution ``n`` (cells per side, or sqrt of the Voronoi seed count)."""
    if family == "distorted":
        return generate_distorted_squares(n, distortion, seed)
    if family == "nonconvex":
        return generate_nonconvex(n)
    if family == "voronoi":
        return generate_voronoi(n * n, lloyd_iterations, seed)
    raise MeshError(f"unknown mesh family {family!r}; valid families: {', '.join(MESH_FAMILIES)}")


# Diameter of a typical cell at resolution n, as a multiple of 1/n: the
# diagonal of a grid square, and for Voronoi the diameter of a regular
# hexagon of area 1/n^2.
_DIAMETER_FACTOR = {
    "distorted": math.sqrt(2.0),
    "nonconvex": math.sqrt(2.0),
    "voronoi": 2.0 * math.sqrt(2.0 / (3.0 * math.sqrt(3.0))),
}


def nominal_diameter(family: str, n: int) -> float:
    """Cell diameter of the undistorted member of ``family`` at resolution ``n``."""
    if family not in _DIAMETER_FACTOR:
        raise MeshError(f"unknown mesh family {family!r}; valid families: {', '.join(MESH_FAMILIES)}")
    return _DIAMETER_FACTOR[family] / n


def resolution_for_diameter(family: str, h: float) -> int:
    """Smallest resolution n whose nominal cell diameter is at most ``h``."""
    if not h > 0:
        raise MeshError("mesh diameter must be positive")
    nominal_diameter(family, 1)
    return max(1, math.ceil(_DIAMETER_FACTOR[family] / h - 1e-9))


def mesh_for_diameter(family: str, h: float, **kwargs) -> tuple[PolygonalMesh, float]:
    """Mesh of ``family`` with cell diameter about ``h`` and its nominal diameter."""
    n = resolution_for_diameter(family, h)
    return make_mesh(family, n, **kwargs), nominal_diameter(family, n)


# ---------------------------------------------------------------- validation

@dataclass
class MeshQualityReport:
    min_edge_ratio: float
    star_shape_ok: np.ndarray
    edge_ok: np.ndarray
    failing_cells: list[int]
    structural_errors: list[str] = field(default_factory=list)
    kernel_radius: np.ndarray | None = None

    @property
    def ok(self) -> bool:
        return not self.failing_cells and not self.structural_errors


def validate_mesh(mesh: PolygonalMesh, delta: float, c: float) -> MeshQualityReport:
    """Check the star-shape (disc radius delta*h_E) and edge-length (c*h_E) bounds."""
    structural = structural_problems(mesh)
    nc = mesh.n_cells
    star = np.zeros(nc, dtype=bool)
    edge_ok = np.zeros(nc, dtype=bool)
    radius = np.full(nc, -np.inf)
    ratios = np.zeros(nc)
    for k in range(nc):
        pts = mesh.cell_points(k)
        hE = polygon_diameter(pts)
        lengths = np.linalg.norm(np.roll(pts, -1, axis=0) - pts, axis=1)
        ratios[k] = lengths.min() / hE
        edge_ok[k] = ratios[k] >= c
        if polygon_area(pts) <= 0 or not is_simple_polygon(pts):
            continue
        _, r = chebyshev_kernel_center(pts)
        radius[k] = r
        star[k] = r >= delta * hE - 1e-9 and r > -1e-9
    failing = [k for k in range(nc) if not (star[k] and edge_ok[k])]
    return MeshQualityReport(
        min_edge_ratio=float(ratios.min()) if nc else 1.0,
        star_shape_ok=star, edge_ok=edge_ok, failing_cells=failing,
        structural_errors=structural, kernel_radius=radius,
    )


# ---------------------------------------------------------------- text format

def save_mesh(path: str | Path, mesh: PolygonalMesh) -> None:
    lines = ["polymesh 1", f"vertices {mesh.n_vertices}"]
    lines += [f"{x:.17g} {y:.17g}" for x, y in mesh.vertices]
    lines.append(f"cells {mesh.n_cells}")
    lines += [" ".join(str(v) for v in (len(c), *c)) for c in mesh.cells]
    Path(path).write_text("\n".join(lines) + "\n")


def load_mesh(path: str | Path, *, check: bool = True) -> PolygonalMesh:
    text = Path(path).read_text().splitlines()
    rows = [(i + 1, ln.split()) for i, ln in enumerate(text) if ln.strip()]
    pos = 0

    def take(expect: str) -> int:
        nonlocal pos
        if pos >= len(rows):
            raise MeshError(f"line {len(text) + 1}: unexpected end of file, expected {expect!r}")
        lineno, tok = rows[pos]
        pos += 1
        if len(tok) != 2 or tok[0] != expect:
            raise MeshError(f"line {lineno}: expected '{expect} <int>'")
        try:
            return int(tok[1])
        except ValueError:
            raise MeshError(f"line {lineno}: bad integer {tok[1]!r}") from None

    if take("polymesh") != 1:
        raise MeshError(f"line {rows[0][0]}: unsupported polymesh version")
    nv = take("vertices")
    verts = np.empty((nv, 2))
    for i in range(nv):
        if pos >= len(rows):
            raise MeshError(f"line {len(text) + 1}: expected {nv} vertices, got {i}")
        lineno, tok = rows[pos]
        pos += 1
        try:
            if len(tok) != 2:
                raise ValueError
            verts[i] = float(tok[0]), float(tok[1])
        except ValueError:
            raise MeshError(f"line {lineno}: expected 'x y'") from None
    nc = take("cells")
    cells = []
    for k in range(nc):
        if pos >= len(rows):
            raise MeshError(f"line {len(text) + 1}: expected {nc} cells, got {k}")
        lineno, tok = rows[pos]
        pos += 1
        try:
            ids = [int(t) for t in tok]
        except ValueError:
            raise MeshError(f"line {lineno}: cell {k} has a non-integer entry") from None
        if not ids or ids[0] != len(ids) - 1:
            raise MeshError(f"line {lineno}: cell {k} vertex count does not match")
        bad = [v for v in ids[1:] if v < 0 or v >= nv]
        if bad:
            raise MeshError(f"line {lineno}: cell {k} references missing vertex {bad[0]}")
        cells.append(tuple(ids[1:]))
    if pos != len(rows):
        raise MeshError(f"line {rows[pos][0]}: trailing content")
    mesh = PolygonalMesh(verts, cells)
    if check:
        mesh.check()
    return mesh
