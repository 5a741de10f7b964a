import numpy as np
import pytest
import yaml

from polyvem.analysis import read_report
from polyvem.cli import main, run_compare
from polyvem.config import config_from_dict
from polyvem.mesh import load_mesh


def write_config(tmp_path, **overrides):
    data = {"problem": "example1", "order": 1, "mesh": {"family": "distorted"},
            "time": {"T": 0.1, "dt": 0.05}, "sweep": {"h": [0.5]},
            "output": str(tmp_path / "out.csv")}
    for k, v in overrides.items():
        data[k] = v
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(data))
    return path


def test_convergence_single_entry(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["convergence", "--config", str(cfg)]) == 0
    rep = read_report(tmp_path / "out.csv")
    assert len(rep.rows) == 2
    assert all(r.roc0 is None and r.roc1 is None for r in rep.rows)
    assert capsys.readouterr().out.strip().endswith("out.csv")


def test_convergence_overrides(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "o2.csv"
    assert main(["convergence", "--config", str(cfg), "--order", "2", "--mesh", "voronoi",
                 "--dt", "0.1", "--out", str(out)]) == 0
    assert len(read_report(out).rows) == 2


def test_convergence_spatial_rates(tmp_path):
    cfg = write_config(tmp_path, time={"T": 0.05, "dt": "auto"}, sweep={"h": [0.25, 0.125]})
    assert main(["convergence", "--config", str(cfg)]) == 0
    rows = read_report(tmp_path / "out.csv").rows
    assert rows[-1].roc1 == pytest.approx(1.0, abs=0.2)


def test_convergence_temporal_sweep(tmp_path):
    cfg = write_config(tmp_path, time={"T": 1.0, "dt": 0.1}, order=2,
                       sweep={"h": [0.125], "dt": [0.5, 0.25, 0.125]})
    assert main(["convergence", "--config", str(cfg)]) == 0
    rows = read_report(tmp_path / "out.csv").rows
    assert [r.param for r in rows[::2]] == [0.5, 0.25, 0.125]
    assert rows[-2].roc0 == pytest.approx(1.0, abs=0.3)


def test_compare_command(tmp_path):
    cfg = write_config(tmp_path, order=2, sweep={"h": [0.25]}, coarse={"h": [0.5]})
    assert main(["compare", "--config", str(cfg)]) == 0
    lines = (tmp_path / "out.csv").read_text().splitlines()
    assert lines[0].startswith("param,coarse,species") and len(lines) == 3


def test_compare_single_step_linear_problem():
    cfg = config_from_dict({
        "problem": {"xi": [1], "omega": [1, 0], "A": [[0]], "R": [[1.0]],
                    "exact": ["x*(1-x)*y*(1-y)*(1+t)"]},
        "order": 2, "time": {"T": 0.1, "dt": 0.1}, "sweep": {"h": [0.25]},
        "solver": {"tol": 1e-10, "ctol": 1e-10, "fiter": 2}})
    (row,) = run_compare(cfg)
    assert row.rel0 < 1e-8 and row.rel1 < 1e-8


def test_meshgen_voronoi(tmp_path):
    out = tmp_path / "m.txt"
    assert main(["meshgen", "--family", "voronoi", "--n", "25", "--seed", "7",
                 "--out", str(out)]) == 0
    assert load_mesh(out).n_cells == 25


def test_meshgen_uniform_squares(tmp_path):
    out = tmp_path / "sq.txt"
    assert main(["meshgen", "--family", "squares", "--n", "5", "--distortion", "0",
                 "--out", str(out)]) == 0
    m = load_mesh(out)
    lengths = np.linalg.norm(m.vertices[m.edges[:, 0]] - m.vertices[m.edges[:, 1]], axis=1)
    assert m.n_cells == 25 and np.allclose(lengths, 0.2)


def test_meshgen_invalid_family(tmp_path, capsys):
    assert main(["meshgen", "--family", "hexagons", "--n", "3",
                 "--out", str(tmp_path / "x.txt")]) == 1
    err = capsys.readouterr().err.strip()
    assert err.count("\n") == 0
    assert err.startswith("error: MeshError:")
    for fam in ("distorted", "nonconvex", "squares", "voronoi"):
        assert fam in err


def test_missing_dt_error_line(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("problem: example1\norder: 1\n")
    assert main(["convergence", "--config", str(path)]) == 1
    assert capsys.readouterr().err.strip() == "error: ConfigError: time.dt: missing required key"


def test_missing_config_file(tmp_path, capsys):
    assert main(["compare", "--config", str(tmp_path / "nope.yaml")]) == 1
    assert capsys.readouterr().err.startswith("error: ConfigError: <file>")


def test_bad_command_line():
    with pytest.raises(SystemExit) as exc:
        main(["convergence"])
    assert exc.value.code == 2
