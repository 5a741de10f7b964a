"""Final-time error norms, convergence rates and CSV reports."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .quadrature import polygon_rule

CSV_HEADER = ("param", "species", "e0", "e1", "roc0", "roc1", "seconds", "iters")


def compute_errors(U: np.ndarray, exact, space, t: float,
                   quad_degree: int | None = None) -> list[tuple[float, float]]:
    """Per-species (e0, e1) with e0 from Pi0 u_h and e1 from grad Pi_nabla u_h.

    ``U`` is (m, n_dofs) or a :class:`~polyvem.solver.DiscreteState`;
    ``exact`` a list of :class:`~polyvem.problems.ExactSolution`.
    """
    if exact is None:
        raise ValueError("error norms need an exact solution")
    U = np.atleast_2d(getattr(U, "U", U))
    if len(exact) != len(U):
        raise ValueError("one exact solution per species is required")
    e0 = np.zeros(len(U))
    e1 = np.zeros(len(U))
    for ep in space.elements:
        e = ep.elem
        if quad_degree is None:
            rule, mono = e.rule, e.mono_q
        else:
            rule = polygon_rule(e.pts, quad_degree)
            mono = e.basis.eval(rule.points)
        x, y = rule.points[:, 0], rule.points[:, 1]
        grad = e.basis.grad(rule.points)
        for i, ex in enumerate(exact):
            loc = U[i, ep.dofs]
            u = np.broadcast_to(ex.value(t, x, y), x.shape)
            d0 = u - mono @ (ep.P0 @ loc)
            g = np.einsum("qad,a->qd", grad, ep.Pnabla @ loc)
            dx = np.broadcast_to(ex.grad[0](t, x, y), x.shape) - g[:, 0]
            dy = np.broadcast_to(ex.grad[1](t, x, y), x.shape) - g[:, 1]
            e0[i] += rule.weights @ (d0 * d0)
            e1[i] += rule.weights @ (dx * dx + dy * dy)
    return [(math.sqrt(a), math.sqrt(b)) for a, b in zip(e0, e1)]


def convergence_rates(errors, steps) -> list[float | None]:
    """log(e_prev/e)/log(s_prev/s) between consecutive entries; None where undefined."""
    errors = list(errors)
    steps = list(steps)
    if len(errors) != len(steps):
        raise ValueError("errors and steps differ in length")
    out: list[float | None] = []
    for k in range(1, len(errors)):
        ea, eb, sa, sb = errors[k - 1], errors[k], steps[k - 1], steps[k]
        if ea > 0 and eb > 0 and sa > 0 and sb > 0 and sa != sb:
            out.append(math.log(ea / eb) / math.log(sa / sb))
        else:
            out.append(None)
    return out


@dataclass
class ReportRow:
    param: float
    species: int
    e0: float
    e1: float
    roc0: float | None = None
    roc1: float | None = None
    seconds: float = 0.0
    iters: int = 0
    step: float | None = None  # value used for rates when it differs from param

    @property
    def rate_step(self) -> float:
        return self.param if self.step is None else self.step


@dataclass
class ConvergenceReport:
    rows: list[ReportRow] = field(default_factory=list)

    def add_level(self, param: float, errors, seconds: float = 0.0, iters: int = 0,
                  step: float | None = None):
        """Append one refinement level; rates against the previous level are filled in.

        ``step`` is the mesh size or time step used for rates when it differs
        from the reported ``param`` (e.g. a nominal diameter behind a target h).
        """
        prev = {r.species: r for r in self.rows if r.param == self.params[-1]} if self.rows else {}
        for i, (e0, e1) in enumerate(errors, start=1):
            row = ReportRow(param, i, e0, e1, seconds=seconds, iters=iters, step=step)
            if i in prev:
                p = prev[i]
                steps = [p.rate_step, row.rate_step]
                row.roc0 = convergence_rates([p.e0, e0], steps)[0]
                row.roc1 = convergence_rates([p.e1, e1], steps)[0]
            self.rows.append(row)

    @property
    def params(self) -> list[float]:
        seen = []
        for r in self.rows:
            if r.param not in seen:
                seen.append(r.param)
        return seen

    def species_rows(self, i: int) -> list[ReportRow]:
        return [r for r in self.rows if r.species == i]


def _fmt_rate(v):
    return "" if v is None else f"{v:.2f}"


def emit_report(report: ConvergenceReport, path) -> Path:
    """Write ``report`` as CSV; errors with 6 significant digits, rates with 2 decimals."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in report.rows:
            w.writerow([f"{r.param:.6g}", r.species, f"{r.e0:.6g}", f"{r.e1:.6g}",
                        _fmt_rate(r.roc0), _fmt_rate(r.roc1), f"{r.seconds:.3f}", r.iters])
    return path


def read_report(path) -> ConvergenceReport:
    rep = ConvergenceReport()
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if tuple(rd.fieldnames or ()) != CSV_HEADER:
            raise ValueError(f"unexpected header in {path}")
        for d in rd:
            rep.rows.append(ReportRow(
                float(d["param"]), int(d["species"]), float(d["e0"]), float(d["e1"]),
                float(d["roc0"]) if d["roc0"] else None,
                float(d["roc1"]) if d["roc1"] else None,
                float(d["seconds"]), int(d["iters"])))
    return rep


# ---------------------------------------------------------- comparisons

COMPARE_HEADER = ("param", "coarse", "species", "e0_iteration", "e1_iteration",
                  "e0_twogrid", "e1_twogrid", "rel0", "rel1",
                  "seconds_iteration", "seconds_twogrid")


@dataclass
class ComparisonRow:
    param: float
    coarse: float
    species: int
    e0_iteration: float
    e1_iteration: float
    e0_twogrid: float
    e1_twogrid: float
    seconds_iteration: float
    seconds_twogrid: float

    @property
    def rel0(self) -> float:
        return relative_gap(self.e0_twogrid, self.e0_iteration)

    @property
    def rel1(self) -> float:
        return relative_gap(self.e1_twogrid, self.e1_iteration)


def relative_gap(a: float, b: float) -> float:
    """|a - b| / |b|, 0 when both vanish."""
    if b == 0.0:
        return 0.0 if a == 0.0 else math.inf
    return abs(a - b) / abs(b)


def emit_comparison(rows: list[ComparisonRow], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COMPARE_HEADER)
        for r in rows:
            w.writerow([f"{r.param:.6g}", f"{r.coarse:.6g}", r.species,
                        f"{r.e0_iteration:.6g}", f"{r.e1_iteration:.6g}",
                        f"{r.e0_twogrid:.6g}", f"{r.e1_twogrid:.6g}",
                        f"{r.rel0:.2e}", f"{r.rel1:.2e}",
                        f"{r.seconds_iteration:.3f}", f"{r.seconds_twogrid:.3f}"])
    return path
