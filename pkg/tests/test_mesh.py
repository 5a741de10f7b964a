import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from polyvem.mesh import (MeshError, PolygonalMesh, generate_distorted_squares,
                          generate_nonconvex, generate_voronoi, load_mesh, make_mesh,
                          mesh_for_diameter, nominal_diameter, resolution_for_diameter,
                          save_mesh, unit_square, validate_mesh, voronoi_from_seeds)
from oracles import shoelace


def interior_angles_reflex(pts):
    nxt, prv = np.roll(pts, -1, axis=0), np.roll(pts, 1, axis=0)
    a, b = pts - prv, nxt - pts
    cross = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    return cross < 0


def euler_ok(mesh):
    return mesh.n_vertices - mesh.n_edges + mesh.n_cells == 1


def total_area(mesh):
    return sum(shoelace(mesh.cell_points(k)) for k in range(mesh.n_cells))


# -------------------------------------------------------- distorted squares

def test_distorted_single_cell_is_unit_square():
    for dist, seed in [(0.0, 0), (0.3, 5), (0.49, 123)]:
        m = generate_distorted_squares(1, dist, seed)
        assert m.n_cells == 1 and m.n_vertices == 4
        assert np.allclose(sorted(map(tuple, m.vertices)), [(0, 0), (0, 1), (1, 0), (1, 1)])


def test_distorted_zero_distortion_uniform():
    m = generate_distorted_squares(5, 0.0, 0)
    assert m.n_cells == 25
    lengths = np.linalg.norm(m.vertices[m.edges[:, 0]] - m.vertices[m.edges[:, 1]], axis=1)
    assert np.allclose(lengths, 0.2, atol=1e-15)


def test_distorted_area_and_count():
    m = generate_distorted_squares(5, 0.2, 42)
    assert m.n_cells == 25
    assert abs(total_area(m) - 1.0) <= 1e-12


def test_distorted_rejects_bad_distortion():
    with pytest.raises(MeshError):
        generate_distorted_squares(3, 0.5, 0)


# --------------------------------------------------------------- nonconvex

def test_nonconvex_single_square_has_two_reflex_cells():
    m = generate_nonconvex(1)
    assert m.n_cells == 2
    for k in range(2):
        assert interior_angles_reflex(m.cell_points(k)).sum() == 1


def test_nonconvex_n5_area():
    m = generate_nonconvex(5)
    assert m.n_cells == 50
    assert abs(total_area(m) - 1.0) <= 1e-12


def test_nonconvex_interior_edges_shared_twice():
    m = generate_nonconvex(2)
    counts = (m.edge_cells >= 0).sum(axis=1)
    assert set(counts[~m.boundary_edge_flags]) == {2}
    assert set(counts[m.boundary_edge_flags]) == {1}


# ----------------------------------------------------------------- voronoi

def test_voronoi_single_seed_is_square():
    m = generate_voronoi(1, 10, 3)
    assert m.n_cells == 1
    assert abs(shoelace(m.cell_points(0)) - 1.0) < 1e-12


def test_voronoi_quadrant_seeds_give_congruent_squares():
    m = voronoi_from_seeds(np.array([[.25, .25], [.75, .25], [.25, .75], [.75, .75]]))
    assert m.n_cells == 4
    for k in range(4):
        pts = m.cell_points(k)
        assert abs(shoelace(pts) - 0.25) < 1e-12
        assert np.ptp(pts[:, 0]) == pytest.approx(0.5) and np.ptp(pts[:, 1]) == pytest.approx(0.5)


def test_voronoi_lloyd_regularizes():
    raw = generate_voronoi(25, 0, 7)
    cvt = generate_voronoi(25, 100, 7)
    assert np.std(cvt.cell_areas()) < np.std(raw.cell_areas())


# -------------------------------------------------------------- invariants

FAMILY_CASES = [("distorted", 3), ("distorted", 6), ("nonconvex", 3), ("voronoi", 4),
                ("voronoi", 6)]


@pytest.mark.parametrize("family,n", FAMILY_CASES)
def test_partition_invariants(family, n):
    m = make_mesh(family, n, seed=11)
    assert abs(total_area(m) - 1.0) <= 1e-10
    counts = (m.edge_cells >= 0).sum(axis=1)
    assert np.all((counts == 1) == m.boundary_edge_flags)
    assert np.all((counts == 1) | (counts == 2))
    assert euler_ok(m)


@pytest.mark.parametrize("family,n", FAMILY_CASES)
def test_generators_deterministic(family, n):
    a, b = make_mesh(family, n, seed=5), make_mesh(family, n, seed=5)
    assert np.array_equal(a.vertices, b.vertices) and a.cells == b.cells


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 8), dist=st.floats(0.0, 0.45), seed=st.integers(0, 10**6))
def test_distorted_property(n, dist, seed):
    m = generate_distorted_squares(n, dist, seed)
    assert abs(total_area(m) - 1.0) <= 1e-10
    assert euler_ok(m)
    assert np.all(m.cell_areas() > 0)


def test_diameter_resolution_roundtrip():
    for fam in ("distorted", "nonconvex", "voronoi"):
        for h in (1 / 4, 1 / 8, 1 / 16, 1 / 32):
            n = resolution_for_diameter(fam, h)
            assert nominal_diameter(fam, n) <= h + 1e-12
            assert n == 1 or nominal_diameter(fam, n - 1) > h
    assert [resolution_for_diameter("distorted", 1 / 2 ** k) for k in (2, 3, 4, 5)] == [6, 12, 23, 46]
    assert [resolution_for_diameter("voronoi", 1 / 2 ** k) for k in (2, 3, 4, 5)] == [5, 10, 20, 40]
    mesh, nominal = mesh_for_diameter("distorted", 0.25, distortion=0.0)
    assert mesh.h == pytest.approx(nominal)
    with pytest.raises(MeshError, match="distorted"):
        nominal_diameter("hexagons", 3)


# -------------------------------------------------------------- validation

def test_validate_unit_square_passes():
    rep = validate_mesh(unit_square(), 0.3, 0.5)
    assert rep.ok
    assert rep.kernel_radius[0] == pytest.approx(0.5)


def test_validate_bowtie_structural_failure():
    bow = PolygonalMesh(np.array([[0, 0], [1, 1], [1, 0], [0, 1]], float), [(0, 1, 2, 3)])
    rep = validate_mesh(bow, 0.1, 0.1)
    assert rep.structural_errors
    assert not rep.ok


def test_validate_convex_zero_delta():
    m = generate_voronoi(16, 20, 2)
    rep = validate_mesh(m, 0.0, 0.0)
    assert rep.star_shape_ok.all()


def _visible(center, pts, samples):
    """Brute force: every sample boundary point is visible from ``center``."""
    from polyvem.mesh import _segments_cross
    n = len(pts)
    for q in samples:
        for k in range(n):
            a, b = pts[k], pts[(k + 1) % n]
            # ignore edges touching the sample point itself
            if abs((b[0] - a[0]) * (q[1] - a[1]) - (b[1] - a[1]) * (q[0] - a[0])) < 1e-12 \
                    and min(a[0], b[0]) - 1e-12 <= q[0] <= max(a[0], b[0]) + 1e-12 \
                    and min(a[1], b[1]) - 1e-12 <= q[1] <= max(a[1], b[1]) + 1e-12:
                continue
            if _segments_cross(center, q, a, b):
                return False
    return True


@pytest.mark.parametrize("family,n", [("nonconvex", 2), ("distorted", 4), ("voronoi", 3)])
def test_star_shape_matches_visibility_oracle(family, n):
    from polyvem.mesh import chebyshev_kernel_center
    m = make_mesh(family, n, seed=1, distortion=0.3)
    rep = validate_mesh(m, 0.0, 0.0)
    rng = np.random.default_rng(0)
    for k in range(m.n_cells):
        pts = m.cell_points(k)
        center, r = chebyshev_kernel_center(pts)
        edge = rng.integers(0, len(pts), 1000)
        s = rng.uniform(0, 1, 1000)[:, None]
        samples = pts[edge] + s * (np.roll(pts, -1, axis=0)[edge] - pts[edge])
        assert rep.star_shape_ok[k] == (r > 0 and _visible(center, pts, samples))


# ---------------------------------------------------------------------- io

def test_io_roundtrip(tmp_path):
    m = unit_square()
    save_mesh(tmp_path / "sq.txt", m)
    back = load_mesh(tmp_path / "sq.txt")
    assert np.array_equal(back.vertices, m.vertices) and back.cells == m.cells


def test_io_missing_vertex(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("polymesh 1\nvertices 3\n0 0\n1 0\n0 1\ncells 1\n3 0 1 7\n")
    with pytest.raises(MeshError, match="cell 0"):
        load_mesh(path)


def test_io_voronoi_25(tmp_path):
    m = generate_voronoi(25, 100, 7)
    save_mesh(tmp_path / "v.txt", m)
    back = load_mesh(tmp_path / "v.txt")
    assert back.n_cells == 25
    assert abs(total_area(back) - 1.0) <= 1e-10
    assert np.array_equal(back.vertices, m.vertices)
