import numpy as np
import pytest
from hypothesis import strategies as st

from polyvem.mesh import PolygonalMesh, generate_distorted_squares, unit_square
from polyvem.space import VemSpace


def star_polygon(rng: np.random.Generator, n: int | None = None, reflex: bool = True):
    """Random simple polygon, star-shaped about its origin, CCW.

    Radii vary in [0.35, 1] so several vertices usually become reflex.
    """
    n = int(rng.integers(3, 9)) if n is None else n
    gaps = rng.uniform(0.4, 1.0, n)
    ang = np.cumsum(gaps) / gaps.sum() * 2 * np.pi
    r = rng.uniform(0.35, 1.0, n) if reflex else np.ones(n)
    pts = np.column_stack([r * np.cos(ang), r * np.sin(ang)])
    scale = rng.uniform(0.05, 2.0)
    shift = rng.uniform(-3, 3, 2)
    return pts * scale + shift


@st.composite
def polygons(draw, min_vertices=3, max_vertices=8):
    seed = draw(st.integers(0, 2**32 - 1))
    n = draw(st.integers(min_vertices, max_vertices))
    return star_polygon(np.random.default_rng(seed), n)


def single_cell_mesh(pts) -> PolygonalMesh:
    return PolygonalMesh(np.asarray(pts, dtype=float), [tuple(range(len(pts)))])


@pytest.fixture
def square_mesh():
    return unit_square()


@pytest.fixture(scope="session")
def grid4():
    return generate_distorted_squares(4, 0.2, 3)


@pytest.fixture(scope="session")
def space_p2(grid4):
    return VemSpace(grid4, 2)


# ------------------------------------------------------- acceptance lines

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance(capsys):
    """Record one PASS/FAIL line per criterion; printed live and in the summary."""
    def record(number, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
