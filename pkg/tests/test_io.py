import csv
import math

import numpy as np
import pytest
import tomli

from bingham_dg.forms import Discretization, FieldState
from bingham_dg.huber import PhysParams
from bingham_dg.io import (CONVERGENCE_COLUMNS, ConfigError, OutputError, format_convergence_table,
                           parse_config, parse_config_text, parse_override, run_case,
                           run_convergence_study, write_config, write_convergence_csv,
                           write_fields)
from bingham_dg.mesh import generate_structured_mesh


def read_vtk(path) -> dict:
    """Test-only reader for the legacy ASCII files written by ``write_fields``."""
    lines = path.read_text().splitlines()
    out, i = {}, 0
    while i < len(lines):
        tok = lines[i].split()
        if tok and tok[0] == "POINTS":
            n = int(tok[1])
            out["points"] = np.array([[float(v) for v in l.split()] for l in lines[i + 1:i + 1 + n]])
            i += n
        elif tok and tok[0] == "CELLS":
            n = int(tok[1])
            out["cells"] = np.array([[int(v) for v in l.split()[1:]] for l in lines[i + 1:i + 1 + n]])
            i += n
        elif tok and tok[0] == "SCALARS":
            n = len(out["cells"])
            cast = int if tok[2] == "int" else float
            out[tok[1]] = np.array([cast(l) for l in lines[i + 2:i + 2 + n]])
            i += n + 1
        elif tok and tok[0] == "VECTORS":
            n = len(out["cells"])
            out[tok[1]] = np.array([[float(v) for v in l.split()] for l in lines[i + 1:i + 1 + n]])
            i += n
        i += 1
    return out


def test_minimal_config_defaults():
    cfg = parse_config_text('case = "cavity"')
    assert cfg.case == "cavity" and cfg.gamma == 1e3 and cfg.ssn_tol == 1e-5
    assert (cfg.nx, cfg.ny) == (32, 32) and cfg.params.tau_s == 2.5
    assert abs(cfg.params.eta - 0.01) < 1e-15
    assert cfg.ssn_max_iter == 50 and cfg.output_every == 1


def test_negative_tau_names_key():
    text = 'case = "cavity"\n[physics]\ntau_s = -1.0\n'
    with pytest.raises(ConfigError) as e:
        parse_config_text(text)
    assert e.value.key == "physics.tau_s" and e.value.line == 3
    assert "tau_s" in str(e.value)


def test_override_is_honored():
    cfg = parse_config_text('case = "cavity"\n[physics]\ngamma = 1000.0\n',
                            ["physics.gamma=10"])
    assert cfg.gamma == 10.0


@pytest.mark.parametrize("text, key", [
    ('case = "cavity"\n[physics]\nviscosity = 1.0\n', "physics.viscosity"),
    ('case = "cavity"\n[plot]\nx = 1\n', "plot"),
    ('[case]\nname = "cavity"\nnx = 0\n', "case.nx"),
    ('case = "cavity"\n[physics]\neta = 0.1\nRe = 10.0\n', "physics.Re"),
    ('case = "cavity"\n[physics]\nnorm = "l1"\n', "physics.norm"),
    ('case = "cavity"\n[time]\ndt = 0.3\nt_end = 1.0\n', "time.dt"),
    ('[case]\nname = "cavity"\nnx = "many"\n', "case.nx"),
    ('case = "kettle"\n', "case.name"),
])
def test_invalid_configs(text, key):
    with pytest.raises(ConfigError) as e:
        parse_config_text(text)
    assert e.value.key == key


def test_parse_error_and_missing_file(tmp_path):
    with pytest.raises(ConfigError) as e:
        parse_config_text('case = "cavity"\n[physics\n')
    assert e.value.line == 2
    with pytest.raises(ConfigError, match="not found"):
        parse_config(tmp_path / "absent.toml")


def test_parse_override():
    assert parse_override("physics.gamma=10") == ("physics", "gamma", 10)
    assert parse_override("case.split = alternating") == ("case", "split", "alternating")
    assert parse_override("physics.gravity=[0, -2.5]") == ("physics", "gravity", [0, -2.5])
    for bad in ("gamma=10", "physics.gamma", "a.b.c=1"):
        with pytest.raises(ConfigError):
            parse_override(bad)


def test_config_echo_round_trip(tmp_path):
    cfg = parse_config_text('[case]\nname = "rayleigh_taylor"\nnx = 8\nny = 32\n',
                            ["physics.tau_s=0.1"])
    path = write_config(cfg, tmp_path / "resolved.toml")
    again = parse_config_text(path.read_text())
    assert again == cfg
    assert tomli.loads(path.read_text())["physics"]["tau_s"] == 0.1


def _two_cell_disc():
    return Discretization(generate_structured_mesh(1, 1))


def test_vtk_zero_state(tmp_path):
    disc = _two_cell_disc()
    state = FieldState(np.ones(2), np.zeros(disc.nu), np.zeros(2), np.zeros(8))
    path = write_fields(state, disc, tmp_path / "f.vtk", PhysParams(tau_s=1.0))
    data = read_vtk(path)
    np.testing.assert_array_equal(data["points"][:, :2], disc.mesh.vertices)
    np.testing.assert_array_equal(data["cells"], disc.mesh.cells)
    np.testing.assert_array_equal(data["rho"], [1.0, 1.0])
    np.testing.assert_array_equal(data["chi"], [0, 0])
    np.testing.assert_array_equal(data["Du_norm"], [0.0, 0.0])
    np.testing.assert_array_equal(data["velocity"], 0.0)


def test_vtk_round_trip_is_bit_exact(tmp_path, rng):
    disc = Discretization(generate_structured_mesh(3, 2))
    state = FieldState(1 + rng.random(disc.nc), rng.standard_normal(disc.nu),
                       rng.standard_normal(disc.nc), np.zeros(4 * disc.nc), time=0.1 + 0.2)
    a = write_fields(state, disc, tmp_path / "a.vtk", PhysParams(tau_s=0.5))
    b = write_fields(state, disc, tmp_path / "b.vtk", PhysParams(tau_s=0.5))
    assert a.read_bytes() == b.read_bytes()
    data = read_vtk(a)
    np.testing.assert_array_equal(data["rho"], state.rho)
    np.testing.assert_array_equal(data["p"], state.p)


def test_unwritable_output_raises():
    disc = _two_cell_disc()
    state = FieldState(np.ones(2), np.zeros(disc.nu), np.zeros(2), np.zeros(8))
    with pytest.raises(OutputError, match="/proc"):
        write_fields(state, disc, "/proc/bingham/f.vtk", PhysParams())


def test_convergence_study_needs_two_levels():
    for bad in (1, 0, 2.0, True):
        with pytest.raises(ValueError):
            run_convergence_study(bad)


def test_convergence_csv(tmp_path):
    rows = [{"h": 0.25, "e_u": 0.5, "e_p": 4.0, "div_inf": 1e-15,
             "rate_u": math.nan, "rate_p": math.nan},
            {"h": 0.125, "e_u": 0.125, "e_p": 1.0, "div_inf": 2e-15, "rate_u": 2.0,
             "rate_p": 2.0}]
    path = write_convergence_csv(rows, tmp_path / "c.csv")
    with path.open() as fh:
        got = list(csv.reader(fh))
    assert tuple(got[0]) == CONVERGENCE_COLUMNS == ("h", "e_u", "rate_u", "e_p", "rate_p", "div_inf")
    assert got[1][2] == "nan" and float(got[2][2]) == 2.0
    table = format_convergence_table(rows)
    assert table.splitlines()[2].split()[2] == "2.0000"


def test_small_study(tmp_path):
    rows = run_convergence_study(2, 0.25, tmp_path / "c.csv")
    assert [r["h"] for r in rows] == [0.25, 0.125]
    assert all(r["div_inf"] <= 1e-10 for r in rows)
    assert rows[1]["e_u"] < rows[0]["e_u"]


def test_run_case_outputs(tmp_path):
    cfg = parse_config_text('[case]\nname = "cavity"\nnx = 4\nny = 4\n'
                            '[time]\ndt = 0.1\nt_end = 0.2\n[output]\nevery = 2\n')
    res = run_case(cfg, tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["config_resolved.toml", "diagnostics.csv", "fields_00000.vtk",
                     "fields_00002.vtk", "ssn_history.csv"]
    assert len(res.records) == 2 and len(res.states) == 3
    with (tmp_path / "ssn_history.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "iter", "abs_res", "rel_res", "active_fraction"]
    assert {r[0] for r in rows[1:]} == {"1", "2"}
