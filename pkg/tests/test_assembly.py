import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from polyvem.assembly import (SystemAssembler, assemble_species_system, local_convection,
                              local_coupling_rhs, local_mass, local_mass_consistency,
                              local_reaction_implicit, local_stiffness)
from polyvem.linalg import solve
from polyvem.mesh import generate_distorted_squares, make_mesh
from polyvem.problems import ProblemSpec, as_field, example1, example2
from polyvem.quadrature import polygon_rule
from polyvem.solver import LinearizedStepper
from polyvem.space import LocalElement, VemSpace, element_projectors
from conftest import polygons

SQUARE = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float)
PENT = np.array([[0, 0], [1, 0], [1, 1], [0.5, 0.4], [0, 1]], float)   # reflex at (0.5, 0.4)
ONE = as_field(1.0)


def projectors(pts, p):
    e = LocalElement(pts, p)
    return element_projectors(e, np.arange(e.nloc))


def fields(table):
    arr = np.empty(np.shape(table), dtype=object)
    for idx in np.ndindex(arr.shape):
        arr[idx] = as_field(np.asarray(table)[idx])
    return arr


def blank_problem(m=1, **kw):
    d = dict(m=m, xi=[1.0] * m, omega=(0.0, 0.0), A=np.zeros((m, m)), Q=np.zeros((m, m, m)),
             R=np.zeros((m, m)), forcing=[0.0] * m, initial=[0.0] * m)
    d.update(kw)
    return ProblemSpec(**d)


# -------------------------------------------------------------- mass

@pytest.mark.parametrize("p", [1, 2, 3])
def test_mass_of_constants_is_area(p):
    ep = projectors(PENT, p)
    one = ep.elem.D[:, 0]
    assert one @ local_mass(ep) @ one == pytest.approx(ep.elem.area, rel=1e-13)


def test_mass_reflex_pentagon_positive_definite():
    assert np.linalg.eigvalsh(local_mass(projectors(PENT, 2))).min() > 0


@settings(max_examples=30, deadline=None)
@given(poly=polygons(), p=st.integers(1, 3))
def test_local_forms_spd_and_bounded(poly, p):
    ep = projectors(poly, p)
    e = ep.elem
    Mk = local_mass(ep)
    assert np.allclose(Mk, Mk.T, atol=1e-14 * np.abs(Mk).max())
    ev = np.linalg.eigvalsh(Mk / e.area)
    assert ev.min() > 0 and ev.max() / ev.min() < 1e8
    K = local_stiffness(ep, ONE, 0.0)
    ev = np.linalg.eigvalsh(K)
    assert abs(ev[0]) < 1e-10 * ev[-1]                  # constants only
    assert ev[1] > 0 and ev[-1] / ev[1] < 1e8


# ----------------------------------------------------------- stiffness

@pytest.mark.parametrize("pts", [SQUARE, PENT])
@pytest.mark.parametrize("p", [1, 2, 3])
def test_stiffness_kernel_and_consistency(pts, p):
    ep = projectors(pts, p)
    e = ep.elem
    K = local_stiffness(ep, ONE, 0.0)
    assert np.allclose(K @ e.D[:, 0], 0.0, atol=1e-12)
    rule = polygon_rule(pts, 2 * p)
    g = e.basis.grad(rule.points)
    exact = np.einsum("q,qad,qbd->ab", rule.weights, g, g)
    assert np.allclose(e.D.T @ K @ e.D, exact, atol=1e-11)


def test_unit_square_p1_stiffness_consistency_part():
    ep = projectors(SQUARE, 1)
    K = local_stiffness(ep, ONE, 0.0)
    S = ep.stab_nabla
    consistency = K - 1.0 * S.T @ S                     # xi_bar = 1
    grads = np.array([[-0.5, -0.5], [0.5, -0.5], [0.5, 0.5], [-0.5, 0.5]])
    assert np.allclose(consistency, grads @ grads.T, atol=1e-14)
    assert np.allclose(consistency.sum(axis=1), 0.0, atol=1e-14)


# ---------------------------------------------------------- convection

def test_convection_zero_field():
    ep = projectors(PENT, 2)
    zero = as_field(0.0)
    assert not np.any(local_convection(ep, (zero, zero), 0.0))


def test_convection_constant_gradient():
    ep = projectors(SQUARE, 1)
    C = local_convection(ep, (ONE, as_field(0.0)), 0.0)
    u = SQUARE[:, 0]                                     # u = x, grad u = (1, 0)
    assert np.ones(4) @ C @ u == pytest.approx(1.0, abs=1e-14)


# ------------------------------------------------------------ reaction

def test_reaction_zero():
    ep = projectors(PENT, 2)
    G = local_reaction_implicit(ep, 0, np.ones((1, ep.elem.nloc)), fields([[0.0]]),
                                fields([[0.0]]), 0.0)
    assert not np.any(G)


def test_reaction_unit_lag_is_consistency_mass():
    ep = projectors(PENT, 2)
    ones = ep.elem.D[:, 0][None, :]
    G = local_reaction_implicit(ep, 0, ones, fields([[1.0]]), fields([[0.0]]), 0.0)
    assert np.allclose(G, local_mass_consistency(ep), atol=1e-14)


def test_reaction_diagonal_r_scales():
    ep = projectors(PENT, 2)
    G = local_reaction_implicit(ep, 0, np.zeros((1, ep.elem.nloc)), fields([[0.0]]),
                                fields([[2.5]]), 0.0)
    assert np.allclose(G, 2.5 * local_mass_consistency(ep), atol=1e-14)


# ---------------------------------------------------------- right side

def test_rhs_unit_forcing():
    ep = projectors(SQUARE, 1)
    b = local_coupling_rhs(ep, 0, np.zeros((1, 4)), fields(np.zeros((1, 1, 1))),
                           fields([[0.0]]), ONE, 0.0)
    assert np.allclose(b, 0.25, atol=1e-15)


def test_rhs_zero():
    ep = projectors(PENT, 2)
    b = local_coupling_rhs(ep, 0, np.zeros((2, ep.elem.nloc)), fields(np.ones((2, 2, 2))),
                           fields(np.ones((2, 2))), as_field(0.0), 0.0)
    assert not np.any(b)


def test_rhs_quadratic_coupling():
    ep = projectors(SQUARE, 1)
    Q = np.zeros((2, 2, 2))
    Q[0, 1, 1] = 1.0
    lag = np.vstack([np.zeros(4), 2.0 * np.ones(4)])
    b = local_coupling_rhs(ep, 0, lag, fields(Q), fields(np.zeros((2, 2))), as_field(0.0), 0.0)
    assert np.allclose(b, -4 * 0.25, atol=1e-14)


# ------------------------------------------------------------ global

@pytest.mark.parametrize("family", ["distorted", "nonconvex", "voronoi"])
@pytest.mark.parametrize("p", [1, 2, 3])
def test_batched_matches_reference(family, p):
    V = VemSpace(make_mesh(family, 3), p)
    pr = example2()
    asm = SystemAssembler(V, pr)
    lag = np.random.default_rng(0).standard_normal((pr.m, V.n_dofs))
    lc = asm.lagged_coefficients(lag)
    t = 0.3
    checks = [
        (asm.mass_blocks, local_mass),
        (asm.stiffness_blocks(1, t), lambda ep: local_stiffness(ep, pr.xi[1], t)),
        (asm.convection_blocks(t), lambda ep: local_convection(ep, pr.omega, t)),
        (asm.reaction_blocks(2, lc, t),
         lambda ep: local_reaction_implicit(ep, 2, lag[:, ep.dofs], pr.A, pr.R, t)),
    ]
    for blocks, ref in checks:
        for b, bl in zip(asm.batches, blocks):
            for j, c in enumerate(b.cells):
                r = ref(V.elements[c])
                assert np.allclose(bl[j], r, atol=1e-10 * max(1.0, np.abs(r).max()))
    ref = np.zeros(V.n_dofs)
    for ep in V.elements:
        ref[ep.dofs] += local_coupling_rhs(ep, 2, lag[:, ep.dofs], pr.Q, pr.R, pr.forcing[2], t)
    assert np.allclose(asm.load_vector(2, lc, t, lag), ref, atol=1e-10 * np.abs(ref).max())


def test_global_symmetry_and_kernel(space_p2):
    asm = SystemAssembler(space_p2, example1())
    M = asm.M.toarray()
    K = asm.global_matrix(asm.stiffness_blocks(1, 0.0)).toarray()
    for A in (M, K):
        assert np.abs(A - A.T).max() <= 1e-12 * np.abs(A).max()
    np.linalg.cholesky(M)
    one = space_p2.interpolate(lambda x, y: 1.0 + 0 * x)
    assert np.allclose(K @ one, 0.0, atol=1e-11)


def test_global_consistency_on_polynomials(space_p2):
    pr = blank_problem(omega=(1.0, -0.5))
    asm = SystemAssembler(space_p2, pr)
    u_f = lambda x, y: 1 + x - 2 * y + x * y
    v_f = lambda x, y: x * x - y + 0.3
    u, v = space_p2.interpolate(u_f), space_p2.interpolate(v_f)
    K = asm.global_matrix(asm.stiffness_blocks(0, 0.0))
    C = asm.global_matrix(asm.convection_blocks(0.0))
    mass = stiff = conv = 0.0
    for ep in space_p2.elements:
        r = polygon_rule(ep.elem.pts, 6)
        x, y = r.points.T
        ux, uy = 1 + y, -2 + x
        vx, vy = 2 * x, -1.0
        mass += r.weights @ (u_f(x, y) * v_f(x, y))
        stiff += r.weights @ (ux * vx + uy * vy)
        conv += r.weights @ ((1.0 * ux - 0.5 * uy) * v_f(x, y))
    assert v @ asm.M @ u == pytest.approx(mass, abs=1e-9)
    assert v @ K @ u == pytest.approx(stiff, abs=1e-9)
    assert v @ C @ u == pytest.approx(conv, abs=1e-9)


def test_zero_coefficient_system_is_identity_step(space_p2):
    pr = blank_problem(xi=[0.0], xi_floor=0.0)
    asm = SystemAssembler(space_p2, pr)
    rng = np.random.default_rng(1)
    u = rng.standard_normal(space_p2.n_dofs)
    u[space_p2.boundary] = 0.0
    A, rhs, ub = asm.species_system(0, u[None], u, 1e-2, 0.01)
    x = np.linalg.solve(A.toarray(), rhs)
    assert np.allclose(x, u[asm.pattern.free_idx], atol=1e-12)


def test_example1_one_step_residual():
    V = VemSpace(generate_distorted_squares(6, 0.2, 0), 1)
    pr = example1()
    st = LinearizedStepper(V, pr)
    U0 = st.initial_state().U
    for i in range(pr.m):
        A, rhs, _ = assemble_species_system(V, pr, i, U0, U0[i], 1e-3, 1e-3,
                                            assembler=st.assembler)
        x = solve(A, rhs)
        assert np.linalg.norm(A @ x - rhs) / np.linalg.norm(rhs) < 1e-10


def test_species_decoupling_bitwise():
    """Species 0's system ignores species 1 when no coefficient couples them."""
    V = VemSpace(generate_distorted_squares(3, 0.2, 2), 2)
    A = np.array([[1.0, 0.0], [2.0, 1.0]])
    pr = blank_problem(m=2, A=A, forcing=["x*y", "1"])
    asm = SystemAssembler(V, pr)
    rng = np.random.default_rng(2)
    lag = rng.standard_normal((2, V.n_dofs))
    lag2 = lag.copy()
    lag2[1] = rng.standard_normal(V.n_dofs)
    A1, r1, _ = asm.species_system(0, lag, lag[0], 0.1, 0.1)
    A2, r2, _ = SystemAssembler(V, pr).species_system(0, lag2, lag[0], 0.1, 0.1)
    assert np.array_equal(A1.data, A2.data) and np.array_equal(r1, r2)


def test_lag_enters_through_pi0_only():
    V = VemSpace(generate_distorted_squares(2, 0.1, 2), 2)
    pr = example2()
    asm = SystemAssembler(V, pr)
    # a dof vector invisible to every cell's Pi0
    _, s, vt = np.linalg.svd(asm.coef_map.toarray())
    z = vt[-1] if s[-1] < 1e-12 or len(s) < V.n_dofs else None
    if z is None:
        pytest.skip("Pi0 map is injective on this mesh")
    rng = np.random.default_rng(3)
    lag = rng.standard_normal((pr.m, V.n_dofs))
    lag2 = lag.copy()
    lag2[1] += z
    A1, r1, _ = asm.species_system(0, lag, lag[0], 0.1, 0.1)
    A2, r2, _ = asm.species_system(0, lag2, lag[0], 0.1, 0.1)
    assert np.allclose(A1.toarray(), A2.toarray(), atol=1e-12)
    assert np.allclose(r1, r2, atol=1e-12 * np.abs(r1).max())


def test_dimension_mismatch(space_p2):
    asm = SystemAssembler(space_p2, example1())
    with pytest.raises(ValueError, match="dimensions"):
        asm.species_system(0, np.zeros((2, 3)), np.zeros(3), 0.1, 0.1)
