"""Run configuration: a YAML file with nested sections.

Example::

    problem: example1          # built-in name, or a mapping (see below)
    order: 2
    mesh:
      family: distorted        # distorted | nonconvex | voronoi
      distortion: 0.2
      seed: 0
      lloyd_iterations: 100
    time:
      T: 1.0
      dt: auto                 # a number, or auto for dt = h^(order+1)
    solver:
      algorithm: iteration     # iteration | twogrid
      tol: 1.0e-6
      ctol: 1.0e-3
      fiter: 1
      max_iter: 100
    coarse:
      h: [0.25]                # coarse diameter per fine level, or
      ratio: 2                 # H = ratio * h
    sweep:
      h: [0.25, 0.125]         # target cell diameters
      dt: []                   # time steps (temporal sweep at one h)
    output: report.csv

An inline problem is a mapping with ``xi``, ``omega``, ``A`` and optionally
``Q``, ``R``, ``T``; either ``exact`` (manufactured: forcing, initial and
boundary data are derived) or ``forcing``, ``initial`` and ``boundary``.
Coefficients are numbers or expression strings in x, y, t.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .mesh import MESH_FAMILIES
from .problems import EXAMPLES, ProblemSpec, get_example, manufactured_problem
from .solver import ALGORITHMS, SolverConfig


class ConfigError(ValueError):
    """Schema violation; the message starts with the offending key path."""


@dataclass
class RunConfig:
    problem: Any = "example1"
    order: int = 1
    mesh_family: str = "distorted"
    distortion: float = 0.2
    seed: int = 0
    lloyd_iterations: int = 100
    T: float = 1.0
    dt: float | str = "auto"
    algorithm: str = "iteration"
    tol: float = 1e-6
    ctol: float = 1e-3
    fiter: int = 1
    max_iter: int = 100
    coarse_h: list = field(default_factory=list)
    coarse_ratio: float | None = 2.0
    h_values: list = field(default_factory=lambda: [0.25])
    dt_values: list = field(default_factory=list)
    output: str = "report.csv"

    def validate(self) -> "RunConfig":
        if isinstance(self.problem, str):
            if self.problem not in EXAMPLES:
                raise ConfigError(f"problem: unknown example {self.problem!r}; "
                                  f"available: {', '.join(EXAMPLES)}")
        elif isinstance(self.problem, dict):
            problem_from_mapping(self.problem)
        else:
            raise ConfigError("problem: expected a name or a mapping")
        if not (isinstance(self.order, int) and 1 <= self.order <= 6):
            raise ConfigError("order: expected an integer between 1 and 6")
        if self.mesh_family not in MESH_FAMILIES:
            raise ConfigError(f"mesh.family: unknown family {self.mesh_family!r}; "
                              f"valid families: {', '.join(MESH_FAMILIES)}")
        if not 0 <= self.distortion < 0.5:
            raise ConfigError("mesh.distortion: expected a value in [0, 0.5)")
        if not self.T > 0:
            raise ConfigError("time.T: must be positive")
        if self.dt != "auto":
            if not isinstance(self.dt, (int, float)) or not self.dt > 0:
                raise ConfigError("time.dt: expected a positive number or 'auto'")
            if self.dt > self.T * (1 + 1e-12):
                raise ConfigError("time.dt: must not exceed time.T")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"solver.algorithm: expected one of {', '.join(ALGORITHMS)}")
        for key, v in (("solver.tol", self.tol), ("solver.ctol", self.ctol)):
            if not v > 0:
                raise ConfigError(f"{key}: must be positive")
        for key, v in (("solver.fiter", self.fiter), ("solver.max_iter", self.max_iter)):
            if not (isinstance(v, int) and v >= 1):
                raise ConfigError(f"{key}: expected an integer >= 1")
        if not self.h_values:
            raise ConfigError("sweep.h: must list at least one mesh diameter")
        for k, h in enumerate(self.h_values):
            if not (isinstance(h, (int, float)) and h > 0):
                raise ConfigError(f"sweep.h[{k}]: expected a positive number")
        for k, d in enumerate(self.dt_values):
            if not (isinstance(d, (int, float)) and d > 0):
                raise ConfigError(f"sweep.dt[{k}]: expected a positive number")
        if self.coarse_h and len(self.coarse_h) != len(self.h_values):
            raise ConfigError("coarse.h: needs one entry per sweep.h entry")
        if not self.coarse_h and self.coarse_ratio is not None and not self.coarse_ratio > 1:
            raise ConfigError("coarse.ratio: must exceed 1")
        return self

    # ------------------------------------------------------------ helpers

    def build_problem(self) -> ProblemSpec:
        if isinstance(self.problem, str):
            return get_example(self.problem)
        return problem_from_mapping(self.problem)

    def time_step(self, h: float) -> float:
        """Step that divides T evenly: dt, or h^(order+1) when dt is auto."""
        target = h ** (self.order + 1) if self.dt == "auto" else float(self.dt)
        n = max(1, math.ceil(self.T / target - 1e-9))
        return self.T / n

    def coarse_diameter(self, index: int) -> float:
        if self.coarse_h:
            return float(self.coarse_h[index])
        if self.coarse_ratio is None:
            raise ConfigError("coarse: the two-grid method needs coarse.h or coarse.ratio")
        return float(self.coarse_ratio) * float(self.h_values[index])

    def solver_config(self, dt: float, algorithm: str | None = None) -> SolverConfig:
        return SolverConfig(dt=dt, T=self.T, algorithm=algorithm or self.algorithm,
                            tol=self.tol, ctol=self.ctol, fiter=self.fiter,
                            max_iter=self.max_iter)

    def mesh_kwargs(self) -> dict:
        if self.mesh_family == "distorted":
            return {"distortion": self.distortion, "seed": self.seed}
        if self.mesh_family == "voronoi":
            return {"seed": self.seed, "lloyd_iterations": self.lloyd_iterations}
        return {}


def problem_from_mapping(d: dict) -> ProblemSpec:
    """ProblemSpec from an inline config mapping."""
    path = "problem"
    for key in ("xi", "omega", "A"):
        if key not in d:
            raise ConfigError(f"{path}.{key}: missing")
    known = {"name", "xi", "omega", "A", "Q", "R", "exact", "forcing", "initial", "boundary", "T"}
    extra = set(d) - known
    if extra:
        raise ConfigError(f"{path}.{sorted(extra)[0]}: unknown key")
    m = len(d["xi"])
    try:
        if "exact" in d:
            return manufactured_problem(
                xi=d["xi"], omega=d["omega"], A=d["A"],
                Q=d.get("Q", np.zeros((m, m, m)).tolist()),
                R=d.get("R", np.zeros((m, m)).tolist()),
                exact=d["exact"], name=d.get("name", "inline"), T=float(d.get("T", 1.0)))
        for key in ("forcing", "initial"):
            if key not in d:
                raise ConfigError(f"{path}.{key}: missing (or give problem.exact)")
        return ProblemSpec(
            m=m, xi=d["xi"], omega=tuple(d["omega"]), A=d["A"],
            Q=d.get("Q", np.zeros((m, m, m)).tolist()), R=d.get("R", np.zeros((m, m)).tolist()),
            forcing=d["forcing"], initial=d["initial"], boundary=d.get("boundary"),
            name=d.get("name", "inline"), T=float(d.get("T", 1.0)))
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


# ------------------------------------------------------------- YAML layer

_SECTIONS = {
    "mesh": {"family": "mesh_family", "distortion": "distortion", "seed": "seed",
             "lloyd_iterations": "lloyd_iterations"},
    "time": {"T": "T", "dt": "dt"},
    "solver": {"algorithm": "algorithm", "tol": "tol", "ctol": "ctol", "fiter": "fiter",
               "max_iter": "max_iter"},
    "coarse": {"h": "coarse_h", "ratio": "coarse_ratio"},
    "sweep": {"h": "h_values", "dt": "dt_values"},
}
_TOP = {"problem": "problem", "order": "order", "output": "output"}
_REQUIRED = ("problem", "order", "time.dt")


def _number(key, v):
    if isinstance(v, bool):
        raise ConfigError(f"{key}: expected a number")
    if isinstance(v, str) and v != "auto":
        try:
            return float(v)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {v!r}") from None
    return v


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>: expected a mapping")
    for req in _REQUIRED:
        sec, _, key = req.rpartition(".")
        holder = data.get(sec, {}) if sec else data
        if not isinstance(holder, dict) or key not in holder:
            raise ConfigError(f"{req}: missing required key")
    kwargs: dict = {}
    for key, value in data.items():
        if key in _TOP:
            kwargs[_TOP[key]] = value
        elif key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"{key}: expected a mapping")
            for sub, v in value.items():
                if sub not in _SECTIONS[key]:
                    raise ConfigError(f"{key}.{sub}: unknown key")
                kwargs[_SECTIONS[key][sub]] = v
        else:
            raise ConfigError(f"{key}: unknown key")
    for name in ("T", "tol", "ctol", "distortion"):
        if name in kwargs:
            kwargs[name] = _number(name, kwargs[name])
    if "dt" in kwargs:
        kwargs["dt"] = _number("time.dt", kwargs["dt"])
    for name in ("h_values", "dt_values", "coarse_h"):
        if name in kwargs:
            v = kwargs[name]
            if v is None:
                v = []
            if not isinstance(v, list):
                v = [v]
            kwargs[name] = [_number(name, x) for x in v]
    return RunConfig(**kwargs).validate()


def config_to_dict(cfg: RunConfig) -> dict:
    flat = asdict(cfg)
    out: dict = {k: flat[v] for k, v in _TOP.items()}
    for sec, keys in _SECTIONS.items():
        out[sec] = {k: flat[v] for k, v in keys.items()}
    return out


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"<file>: cannot read {path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"<file>: invalid YAML in {path}: {exc}") from None
    return config_from_dict(data or {})


def save_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=False))
    return path
