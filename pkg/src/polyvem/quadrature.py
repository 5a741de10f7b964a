"""Gauss-Lobatto edge rules and polygon interior rules."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

from .mesh import chebyshev_kernel_center, polygon_area, polygon_centroid


class QuadratureError(ValueError):
    pass


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray
    weights: np.ndarray
    exact_degree: int

    def __post_init__(self):
        if len(self.points) != len(self.weights):
            raise QuadratureError("points and weights differ in length")

    def integrate(self, values: np.ndarray) -> float:
        return float(np.dot(self.weights, values))


@lru_cache(maxsize=None)
def _lobatto(n_points: int) -> tuple[np.ndarray, np.ndarray]:
    N = n_points - 1
    # Chebyshev-Gauss-Lobatto initial guess, Newton on x P_N - P_{N-1}
    x = -np.cos(np.pi * np.arange(n_points) / N)
    P = np.zeros((n_points, n_points))
    xold = 2.0 * np.ones_like(x)
    for _ in range(100):
        if np.max(np.abs(x - xold)) <= 1e-15:
            break
        xold = x
        P[:, 0] = 1.0
        P[:, 1] = x
        for k in range(2, n_points):
            P[:, k] = ((2 * k - 1) * x * P[:, k - 1] - (k - 1) * P[:, k - 2]) / k
        x = xold - (x * P[:, N] - P[:, N - 1]) / (n_points * P[:, N])
    P[:, 0] = 1.0
    P[:, 1] = x
    for k in range(2, n_points):
        P[:, k] = ((2 * k - 1) * x * P[:, k - 1] - (k - 1) * P[:, k - 2]) / k
    w = 2.0 / (N * n_points * P[:, N] ** 2)
    x[0], x[-1] = -1.0, 1.0
    # enforce exact symmetry
    x = 0.5 * (x - x[::-1])
    w = 0.5 * (w + w[::-1])
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def gauss_lobatto_rule(n_points: int) -> QuadratureRule:
    """Gauss-Lobatto rule on [-1, 1]; exact to degree 2*n_points - 3."""
    if n_points < 2:
        raise QuadratureError("Gauss-Lobatto needs at least 2 points")
    x, w = _lobatto(n_points)
    return QuadratureRule(x, w, 2 * n_points - 3)


@lru_cache(maxsize=None)
def _reference_triangle(degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Collapsed (Duffy) Gauss rule on the triangle (0,0), (1,0), (0,1)."""
    n = max(1, (degree + 2) // 2)
    a, wa = roots_jacobi(n, 1.0, 0.0)
    b, wb = roots_legendre(n)
    s = 0.5 * (1.0 + a)
    t = 0.5 * (1.0 + b)
    S, T = np.meshgrid(s, t, indexing="ij")
    pts = np.column_stack([S.ravel(), (T * (1.0 - S)).ravel()])
    w = (0.25 * wa)[:, None] * (0.5 * wb)[None, :]
    return pts, w.ravel()


def triangle_rule(tri: np.ndarray, degree: int) -> QuadratureRule:
    ref, w = _reference_triangle(degree)
    p0, p1, p2 = tri
    jac = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p1[1] - p0[1]) * (p2[0] - p0[0])
    pts = p0 + ref[:, :1] * (p1 - p0) + ref[:, 1:] * (p2 - p0)
    return QuadratureRule(pts, w * jac, degree)


def _fan_ok(apex: np.ndarray, pts: np.ndarray, rel: float = 1e-12) -> bool:
    a = pts - apex
    b = np.roll(pts, -1, axis=0) - apex
    cross = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    return bool(np.all(cross > rel * np.abs(cross).max()))


def ear_clip(pts: np.ndarray) -> list[tuple[int, int, int]]:
    """Triangulate a simple counter-clockwise polygon by ear clipping."""
    idx = list(range(len(pts)))
    tris = []

    def area2(i, j, k):
        a, b, c = pts[i], pts[j], pts[k]
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    guard = 0
    while len(idx) > 3:
        guard += 1
        if guard > 10 * len(pts) ** 2:
            raise QuadratureError("ear clipping failed; polygon is not simple")
        m = len(idx)
        for k in range(m):
            i, j, l = idx[k - 1], idx[k], idx[(k + 1) % m]
            if area2(i, j, l) <= 0:
                continue
            tri = pts[[i, j, l]]
            inside = False
            for q in idx:
                if q in (i, j, l):
                    continue
                if (area2(i, j, q) >= 0 and area2(j, l, q) >= 0 and area2(l, i, q) >= 0
                        and not np.any(np.all(np.isclose(tri, pts[q]), axis=1))):
                    inside = True
                    break
            if not inside:
                tris.append((i, j, l))
                idx.pop(k)
                break
        else:
            raise QuadratureError("no ear found; polygon is not simple")
    tris.append(tuple(idx))
    return tris


def triangulate(pts: np.ndarray) -> list[np.ndarray]:
    """Sub-triangles with positive orientation covering the polygon.

    Fan from the centroid when it sees every edge, else from the centre of
    the largest disc in the kernel, else ear clipping.
    """
    pts = np.asarray(pts, dtype=float)
    if len(pts) == 3:
        return [pts]
    apex = polygon_centroid(pts)
    if not _fan_ok(apex, pts):
        apex = None
        try:
            c, r = chebyshev_kernel_center(pts)
            if r > 0 and _fan_ok(c, pts):
                apex = c
        except Exception:
            apex = None
    if apex is not None:
        nxt = np.roll(pts, -1, axis=0)
        return [np.array([apex, pts[k], nxt[k]]) for k in range(len(pts))]
    return [pts[list(t)] for t in ear_clip(pts)]


def polygon_rule(cell: np.ndarray, degree: int) -> QuadratureRule:
    """Rule exact for polynomials of total degree <= ``degree`` on a simple polygon."""
    if degree < 0:
        raise QuadratureError("degree must be non-negative")
    cell = np.asarray(cell, dtype=float)
    if polygon_area(cell) <= 0:
        raise QuadratureError("polygon must be counter-clockwise with positive area")
    rules = [triangle_rule(t, degree) for t in triangulate(cell)]
    return QuadratureRule(
        np.vstack([r.points for r in rules]),
        np.concatenate([r.weights for r in rules]),
        degree,
    )


def integrate(cell: np.ndarray, f, degree: int) -> float:
    """Integrate ``f(x, y)`` over the polygon with a rule of the given degree."""
    rule = polygon_rule(cell, degree)
    vals = np.broadcast_to(np.asarray(f(rule.points[:, 0], rule.points[:, 1]), dtype=float),
                           rule.weights.shape)
    return rule.integrate(vals)
