import numpy as np
import pytest

from polyvem.analysis import compute_errors
from polyvem.mesh import generate_distorted_squares, mesh_for_diameter
from polyvem.problems import ProblemSpec, example1
from polyvem.solver import (ConvergenceError, DiscreteState, LinearizedStepper, SolverConfig,
                            locate_points, run, run_iteration_method, run_twogrid_method,
                            step_linearized, transfer_coarse_to_fine, transfer_matrix)
from polyvem.space import VemSpace


def problem(m=2, **kw):
    d = dict(m=m, xi=[1.0] * m, omega=(1.0, 0.5), A=np.zeros((m, m)), Q=np.zeros((m, m, m)),
             R=np.zeros((m, m)), forcing=["x*y*(1-x)"] * m, initial=["x*(1-x)*y*(1-y)"] * m)
    d.update(kw)
    return ProblemSpec(**d)


@pytest.fixture(scope="module")
def V():
    return VemSpace(generate_distorted_squares(4, 0.2, 1), 2)


def test_zero_coefficients_identity_step(V):
    pr = problem(m=2, xi=[0.0, 0.0], xi_floor=0.0, omega=(0.0, 0.0), forcing=[0.0, 0.0])
    st = LinearizedStepper(V, pr)
    s0 = st.initial_state()
    s1 = step_linearized(s0, s0, pr, V, 0.05, stepper=st)
    assert np.allclose(s1.U, s0.U, atol=1e-12)
    assert s1.t == pytest.approx(0.05)


def test_zero_data_stays_zero(V):
    pr = problem(A=[[1.0, 2.0], [0.5, 1.0]], Q=np.ones((2, 2, 2)), R=[[1.0, -1.0], [2.0, 0.0]],
                 forcing=[0.0, 0.0], initial=[0.0, 0.0])
    traj = run_iteration_method(pr, V.mesh, V, SolverConfig(dt=0.1, T=0.5))
    assert not np.any(traj.state.U)
    assert traj.iterations == [1] * 5


def test_linear_problem_two_iterations(V):
    pr = problem(R=[[0.5, 0.0], [0.0, 2.0]])
    traj = run_iteration_method(pr, V.mesh, V, SolverConfig(dt=0.1, T=0.3, tol=1e-10))
    assert traj.iterations == [2, 2, 2]


def test_max_iter_raises(V):
    pr = example1()
    with pytest.raises(ConvergenceError) as err:
        run_iteration_method(pr, V.mesh, V, SolverConfig(dt=0.1, T=0.1, max_iter=1, tol=1e-12))
    assert err.value.step == 1


def test_boundary_dofs_stay_zero(V):
    pr = problem(A=[[1.0, 1.0], [1.0, 1.0]])
    traj = run_iteration_method(pr, V.mesh, V, SolverConfig(dt=0.05, T=0.2))
    assert np.all(traj.state.U[:, V.boundary] == 0.0)
    assert np.any(traj.state.U != 0.0)


def test_deterministic(V):
    cfg = SolverConfig(dt=0.05, T=0.2)
    a = run_iteration_method(example1(), V.mesh, V, cfg)
    b = run_iteration_method(example1(), V.mesh, V, cfg)
    assert np.array_equal(a.state.U, b.state.U) and a.iterations == b.iterations


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(dt=0.0)
    with pytest.raises(ValueError):
        SolverConfig(dt=0.1, algorithm="multigrid")
    with pytest.raises(ValueError):
        SolverConfig(dt=2.0, T=1.0)
    assert SolverConfig(dt=0.1, T=1.0).n_steps == 10


def test_converged_state_residual(V):
    pr = example1()
    st = LinearizedStepper(V, pr)
    cfg = SolverConfig(dt=1e-2, T=0.05, tol=1e-8)
    traj = run_iteration_method(pr, V.mesh, V, cfg, stepper=st)
    # re-run the last step from the penultimate state to get u_prev
    cfg4 = SolverConfig(dt=1e-2, T=0.04, tol=1e-8)
    prev = run_iteration_method(pr, V.mesh, V, cfg4).state.U
    assert st.residual(traj.state.U, prev, 0.05, 1e-2) < 10 * cfg.tol


def test_example1_table_magnitudes():
    mesh, _ = mesh_for_diameter("distorted", 1 / 8)
    V = VemSpace(mesh, 2)
    pr = example1()
    traj = run_iteration_method(pr, mesh, V, SolverConfig(dt=1e-3, T=1.0, tol=1e-6))
    (e0, e1), _ = compute_errors(traj.state.U, pr.exact, V, traj.state.t)
    assert 1.28e-5 / 3 <= e0 <= 3 * 1.28e-5
    assert 1.41e-3 / 3 <= e1 <= 3 * 1.41e-3


# ------------------------------------------------------------- transfer

@pytest.fixture(scope="module")
def nested():
    coarse = VemSpace(generate_distorted_squares(3, 0.0, 0), 2)
    fine = VemSpace(generate_distorted_squares(6, 0.0, 0), 2)
    return coarse, fine


def test_locate_points_ties_lowest_index(nested):
    coarse, _ = nested
    cells = locate_points(coarse.mesh, np.array([[1 / 3, 1 / 3], [0.5, 0.5], [1.0, 1.0]]))
    # (1/3, 1/3) touches four cells; the lowest index wins
    touching = [k for k in range(coarse.mesh.n_cells)
                if np.any(np.all(np.isclose(coarse.mesh.cell_points(k), [1 / 3, 1 / 3]), axis=1))]
    assert cells[0] == min(touching)
    assert cells[1] == 4


def test_transfer_reproduces_polynomials(nested):
    coarse, fine = nested
    f = lambda x, y: 1 + x - 2 * y + 3 * x * y - y * y
    uc = coarse.interpolate(f)
    uf = transfer_coarse_to_fine(DiscreteState(0.0, uc[None]), coarse, fine)[0]
    assert np.allclose(uf, fine.interpolate(f), atol=1e-9)


def test_transfer_constant(nested):
    coarse, fine = nested
    uc = coarse.interpolate(lambda x, y: 2.5 + 0 * x)
    uf = transfer_coarse_to_fine(DiscreteState(0.0, uc[None]), coarse, fine)[0]
    assert np.allclose(uf, fine.interpolate(lambda x, y: 2.5 + 0 * x), atol=1e-12)


def test_transfer_random_state_pi0(nested):
    """Inside the lowest-index coarse cell, which owns every fine dof in its
    closure, the fine Pi0 field equals the coarse one.  Elsewhere a random
    coarse Pi0 field jumps across coarse edges and no conforming fine field
    can match it exactly."""
    coarse, fine = nested
    rng = np.random.default_rng(0)
    uc = rng.standard_normal(coarse.n_dofs)
    uf = transfer_matrix(coarse, fine) @ uc
    box = coarse.mesh.cell_points(0)
    lo, hi = box.min(axis=0), box.max(axis=0)
    pts = rng.uniform(lo, hi, (100, 2))
    assert np.all(locate_points(coarse.mesh, pts) == 0)
    fc = locate_points(fine.mesh, pts)
    ce = coarse.elements[0]
    for x, f in zip(pts, fc):
        fe = fine.elements[f]
        vc = ce.elem.basis.eval(x[None])[0] @ ce.P0 @ uc[ce.dofs]
        vf = fe.elem.basis.eval(x[None])[0] @ fe.P0 @ uf[fe.dofs]
        assert abs(vc - vf) < 1e-9


def test_transfer_non_nested_voronoi():
    coarse = VemSpace(mesh_for_diameter("voronoi", 1 / 4)[0], 2)
    fine = VemSpace(mesh_for_diameter("voronoi", 1 / 8)[0], 2)
    f = lambda x, y: x * x - x * y + 0.5 * y
    uf = transfer_matrix(coarse, fine) @ coarse.interpolate(f)
    assert np.allclose(uf, fine.interpolate(f), atol=1e-9)


# ------------------------------------------------------------- two-grid

def test_twogrid_converges_to_iteration(nested):
    coarse, fine = nested
    pr = example1()
    cfg = SolverConfig(dt=0.05, T=0.2, tol=1e-10, ctol=1e-10, fiter=30)
    a = run_iteration_method(pr, fine.mesh, fine, cfg)
    b = run_twogrid_method(pr, coarse.mesh, coarse, fine.mesh, fine, cfg)
    assert np.allclose(a.state.U, b.state.U, atol=1e-8 * np.abs(a.state.U).max())
    assert b.coarse_state is not None and len(b.coarse_iterations) == 4


def test_run_dispatch(nested):
    coarse, fine = nested
    pr = example1()
    cfg = SolverConfig(dt=0.1, T=0.1, algorithm="twogrid")
    with pytest.raises(ValueError, match="coarse"):
        run(pr, cfg, fine)
    assert run(pr, cfg, fine, coarse).iterations == [1]
