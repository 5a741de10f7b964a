"""Command line: convergence sweeps, algorithm comparison, mesh generation.

    polyvem convergence --config run.yaml [--order P] [--mesh FAMILY] [--dt DT]
                        [--algorithm NAME] [--out PATH]
    polyvem compare --config run.yaml [...same overrides]
    polyvem meshgen --family voronoi --n 25 --seed 7 --out mesh.txt

Failures print a single line ``error: <Kind>: <message>`` on stderr and
exit with status 1 (2 for malformed command lines).
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .analysis import (ComparisonRow, ConvergenceReport, compute_errors, emit_comparison,
                       emit_report)
from .config import ConfigError, RunConfig, load_config
from .mesh import (MESH_FAMILIES, MeshError, generate_distorted_squares, generate_nonconvex,
                   generate_voronoi, mesh_for_diameter, resolution_for_diameter, save_mesh)
from .solver import run_iteration_method, run_twogrid_method, transfer_matrix
from .space import VemSpace

log = logging.getLogger("polyvem")

MESHGEN_FAMILIES = {"distorted": "distorted", "squares": "distorted",
                    "nonconvex": "nonconvex", "voronoi": "voronoi"}


# ------------------------------------------------------------ orchestration

def build_space(cfg: RunConfig, h: float):
    """(space, nominal diameter) for target diameter ``h``."""
    mesh, nominal = mesh_for_diameter(cfg.mesh_family, h, **cfg.mesh_kwargs())
    return VemSpace(mesh, cfg.order), nominal


def solve_once(cfg: RunConfig, problem, space, dt: float, coarse_space=None, algorithm=None):
    scfg = cfg.solver_config(dt, algorithm)
    if scfg.algorithm == "iteration":
        return run_iteration_method(problem, space.mesh, space, scfg)
    return run_twogrid_method(problem, coarse_space.mesh, coarse_space, space.mesh, space, scfg,
                              transfer=transfer_matrix(coarse_space, space))


def run_convergence(cfg: RunConfig) -> ConvergenceReport:
    """Spatial sweep over ``cfg.h_values``, or a temporal sweep over
    ``cfg.dt_values`` at the first mesh diameter when that list is set."""
    problem = cfg.build_problem()
    if not problem.has_exact:
        raise ConfigError("problem: convergence needs an exact solution")
    report = ConvergenceReport()
    temporal = bool(cfg.dt_values)
    levels = cfg.dt_values if temporal else cfg.h_values
    cache = {}
    for k, value in enumerate(levels):
        h = cfg.h_values[0] if temporal else value
        if h not in cache:
            cache[h] = build_space(cfg, h)
        space, nominal = cache[h]
        dt = cfg.time_step(h) if not temporal else cfg.T / round(cfg.T / value)
        coarse = None
        if cfg.algorithm == "twogrid":
            coarse, _ = build_space(cfg, cfg.coarse_diameter(0 if temporal else k))
        log.info("level %s: %d dofs, dt=%.3g", value, space.n_dofs, dt)
        traj = solve_once(cfg, problem, space, dt, coarse)
        errors = compute_errors(traj.state.U, problem.exact, space, traj.state.t)
        report.add_level(value, errors, seconds=traj.seconds, iters=sum(traj.iterations),
                         step=None if temporal else nominal)
    return report


def run_compare(cfg: RunConfig) -> list[ComparisonRow]:
    """Iteration and two-grid methods on the same fine meshes."""
    problem = cfg.build_problem()
    if not problem.has_exact:
        raise ConfigError("problem: compare needs an exact solution")
    rows = []
    for k, h in enumerate(cfg.h_values):
        H = cfg.coarse_diameter(k)
        space, _ = build_space(cfg, h)
        coarse, _ = build_space(cfg, H)
        dt = cfg.time_step(h)
        a = solve_once(cfg, problem, space, dt, algorithm="iteration")
        b = solve_once(cfg, problem, space, dt, coarse, algorithm="twogrid")
        ea = compute_errors(a.state.U, problem.exact, space, a.state.t)
        eb = compute_errors(b.state.U, problem.exact, space, b.state.t)
        for i, ((a0, a1), (b0, b1)) in enumerate(zip(ea, eb), start=1):
            rows.append(ComparisonRow(h, H, i, a0, a1, b0, b1, a.seconds, b.seconds))
    return rows


# ----------------------------------------------------------------- commands

def cmd_convergence(cfg: RunConfig) -> Path:
    return emit_report(run_convergence(cfg), cfg.output)


def cmd_compare(cfg: RunConfig) -> Path:
    return emit_comparison(run_compare(cfg), cfg.output)


def cmd_meshgen(family: str, path, *, n: int | None = None, h: float | None = None,
                distortion: float = 0.2, seed: int = 0, lloyd_iterations: int = 100) -> Path:
    """Write a mesh file. ``n`` is cells per side, or the seed count for Voronoi."""
    if family not in MESHGEN_FAMILIES:
        raise MeshError(f"unknown mesh family {family!r}; valid families: "
                        f"{', '.join(sorted(MESHGEN_FAMILIES))}")
    fam = MESHGEN_FAMILIES[family]
    if (n is None) == (h is None):
        raise ValueError("give exactly one of n and h")
    if h is not None:
        n = resolution_for_diameter(fam, h)
        if fam == "voronoi":
            n = n * n
    if n < 1:
        raise MeshError("n must be at least 1")
    if fam == "distorted":
        mesh = generate_distorted_squares(n, distortion, seed)
    elif fam == "nonconvex":
        mesh = generate_nonconvex(n)
    else:
        mesh = generate_voronoi(n, lloyd_iterations, seed)
    save_mesh(path, mesh)
    return Path(path)


# -------------------------------------------------------------------- parser

def _add_overrides(p: argparse.ArgumentParser):
    p.add_argument("--config", required=True, help="YAML run configuration")
    p.add_argument("--order", type=int, help="VEM order p")
    p.add_argument("--mesh", choices=MESH_FAMILIES, help="mesh family")
    p.add_argument("--dt", help="time step, or 'auto' for h^(p+1)")
    p.add_argument("--algorithm", choices=("iteration", "twogrid"))
    p.add_argument("--out", help="output CSV path")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="polyvem", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_overrides(sub.add_parser("convergence", help="error and rate sweep"))
    _add_overrides(sub.add_parser("compare", help="iteration vs two-grid"))
    mg = sub.add_parser("meshgen", help="write a mesh file")
    mg.add_argument("--config", help="take family and generator options from a config")
    mg.add_argument("--family", help=f"one of {', '.join(sorted(MESHGEN_FAMILIES))}")
    size = mg.add_mutually_exclusive_group()
    size.add_argument("--n", type=int, help="cells per side (seed count for voronoi)")
    size.add_argument("--h", type=float, help="target cell diameter")
    mg.add_argument("--distortion", type=float, default=None)
    mg.add_argument("--seed", type=int, default=None)
    mg.add_argument("--lloyd-iterations", type=int, default=None)
    mg.add_argument("--out", required=True, help="mesh file path")
    return parser


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    changes = {}
    if args.order is not None:
        changes["order"] = args.order
    if args.mesh is not None:
        changes["mesh_family"] = args.mesh
    if args.dt is not None:
        try:
            changes["dt"] = "auto" if args.dt == "auto" else float(args.dt)
        except ValueError:
            raise ConfigError(f"--dt: expected a number or 'auto', got {args.dt!r}") from None
    if args.algorithm is not None:
        changes["algorithm"] = args.algorithm
    if args.out is not None:
        changes["output"] = args.out
    return replace(cfg, **changes).validate()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        if args.command == "meshgen":
            base = load_config(args.config) if args.config else RunConfig()
            family = args.family or (base.mesh_family if args.config else None)
            if family is None:
                raise ConfigError("--family: required without --config")
            n, h = args.n, args.h
            if n is None and h is None:
                h = base.h_values[0]
            out = cmd_meshgen(
                family, args.out, n=n, h=h,
                distortion=base.distortion if args.distortion is None else args.distortion,
                seed=base.seed if args.seed is None else args.seed,
                lloyd_iterations=(base.lloyd_iterations if args.lloyd_iterations is None
                                  else args.lloyd_iterations))
        else:
            cfg = _apply_overrides(load_config(args.config), args)
            out = cmd_convergence(cfg) if args.command == "convergence" else cmd_compare(cfg)
    except Exception as exc:  # one machine-parsable line, no traceback
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
