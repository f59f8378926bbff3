"""Run configuration, field and CSV output, and the channel convergence study."""
from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from .cases import CASES, CaseSpec, build_case, default_case
from .diagnostics import convergence_rate, div_inf_norm, error_norms, record, write_diagnostics_csv
from .forms import Discretization, FieldState
from .huber import NORMS, PhysParams, classify_active, tensor_norm
from .mesh import Mesh
from .ssn import SolverConfig
from .timeloop import ClockError, NonConvergenceError, SimulationClock, run, solve_steady

# section -> key -> expected type; "num" accepts int or float, "vec2" two numbers
SCHEMA = {
    "case": {"name": "str", "nx": "int", "ny": "int", "split": "str", "omega": "num",
             "rho_m": "num", "rho_M": "num", "heavy_on_top": "bool"},
    "physics": {"eta": "num", "Re": "num", "tau_s": "num", "gamma": "num",
                "rho_min_guard": "num", "norm": "str", "gravity": "vec2"},
    "time": {"dt": "num", "t_end": "num"},
    "solver": {"tol": "num", "max_iter": "int", "a0": "num", "symmetrize_mean": "bool",
               "clamp_density": "bool"},
    "output": {"directory": "str", "every": "int"},
}
SPLITS = ("right", "alternating")
CONVERGENCE_COLUMNS = ("h", "e_u", "rate_u", "e_p", "rate_p", "div_inf")


class ConfigError(ValueError):
    """Invalid configuration; ``key`` and ``line`` locate the offending entry."""

    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = f"{key}" if key else ""
        if line is not None:
            where += f" (line {line})" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.key = key
        self.line = line


class OutputError(OSError):
    """File output failed; the message names the path."""


class ConvergenceStudyError(RuntimeError):
    """A level failed; ``rows`` holds the levels completed before it."""

    def __init__(self, message: str, rows: list):
        super().__init__(message)
        self.rows = rows


@dataclass(frozen=True)
class RunConfig:
    case: str
    nx: int
    ny: int
    split: str
    omega: float
    rho_m: float
    rho_M: float
    heavy_on_top: bool
    params: PhysParams
    dt: float
    t_end: float
    a0: float = 10.0
    ssn_tol: float = 1e-5
    ssn_max_iter: int = 50
    symmetrize_mean: bool = False
    clamp_density: bool = False
    output_dir: str = "output"
    output_every: int = 1
    steady: bool = False
    line_map: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def gamma(self) -> float:
        return self.params.gamma

    def case_spec(self) -> CaseSpec:
        spec = default_case(self.case)
        return replace(spec, nx=self.nx, ny=self.ny, split=self.split, omega=self.omega,
                       rho_m=self.rho_m, rho_M=self.rho_M, heavy_on_top=self.heavy_on_top,
                       params=self.params, tau_s=self.params.tau_s, dt=self.dt,
                       t_end=self.t_end, a0=self.a0, symmetrize_mean=self.symmetrize_mean)

    def solver_config(self) -> SolverConfig:
        return SolverConfig(tol=self.ssn_tol, max_iter=self.ssn_max_iter,
                            clamp_density=self.clamp_density)

    def to_dict(self) -> dict:
        """Fully resolved configuration in the sectioned file layout."""
        p = self.params
        return {
            "case": {"name": self.case, "nx": self.nx, "ny": self.ny, "split": self.split,
                     "omega": self.omega, "rho_m": self.rho_m, "rho_M": self.rho_M,
                     "heavy_on_top": self.heavy_on_top},
            "physics": {"eta": p.eta, "tau_s": p.tau_s, "gamma": p.gamma,
                        "rho_min_guard": p.rho_min_guard, "norm": p.norm,
                        "gravity": [float(g) for g in p.gravity]},
            "time": {"dt": self.dt, "t_end": self.t_end},
            "solver": {"tol": self.ssn_tol, "max_iter": self.ssn_max_iter, "a0": self.a0,
                       "symmetrize_mean": self.symmetrize_mean,
                       "clamp_density": self.clamp_density},
            "output": {"directory": self.output_dir, "every": self.output_every},
        }


def _line_map(text: str) -> dict:
    """``(section, key) -> line number`` for simple ``key = value`` lines."""
    out, section = {}, None
    for i, line in enumerate(text.splitlines(), start=1):
        m = re.match(r"\s*\[([^\[\]]+)\]", line)
        if m:
            section = m.group(1).strip()
            continue
        m = re.match(r"\s*([A-Za-z0-9_\-]+)\s*=", line)
        if m:
            out[(section, m.group(1))] = i
    return out


def _check_type(kind: str, value) -> bool:
    if kind == "str":
        return isinstance(value, str)
    if kind == "int":
        return isinstance(value, int) and not isinstance(value, bool)
    if kind == "bool":
        return isinstance(value, bool)
    if kind == "num":
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    return (isinstance(value, list) and len(value) == 2
            and all(_check_type("num", v) for v in value))


def _normalize(data: dict, lines: dict) -> dict:
    """Move a top-level ``case = "name"`` into ``[case]`` and reject unknown keys."""
    data = {k: (dict(v) if isinstance(v, dict) else v) for k, v in data.items()}
    if isinstance(data.get("case"), str):
        data["case"] = {"name": data["case"]}
        lines[("case", "name")] = lines.get((None, "case"))
    for sec, body in data.items():
        if sec not in SCHEMA:
            raise ConfigError("unknown key or section", sec, lines.get((None, sec)))
        if not isinstance(body, dict):
            raise ConfigError("expected a section table", sec, lines.get((None, sec)))
        for key, value in body.items():
            name = f"{sec}.{key}"
            if key not in SCHEMA[sec]:
                raise ConfigError("unknown key", name, lines.get((sec, key)))
            kind = SCHEMA[sec][key]
            if not _check_type(kind, value):
                raise ConfigError(f"expected {kind}, got {value!r}", name, lines.get((sec, key)))
    return data


def _resolve(data: dict, lines: dict) -> RunConfig:
    get = lambda sec, key, default=None: data.get(sec, {}).get(key, default)  # noqa: E731

    def err(sec, key, msg):
        return ConfigError(msg, f"{sec}.{key}", lines.get((sec, key)))

    name = get("case", "name")
    if name is None:
        raise ConfigError("missing case name", "case.name")
    if name not in CASES:
        raise err("case", "name", f"unknown case {name!r}; expected one of {CASES}")
    base = default_case(name)
    bp = base.params

    for sec, key in (("case", "nx"), ("case", "ny"), ("solver", "max_iter")):
        v = get(sec, key)
        if v is not None and v < 1:
            raise err(sec, key, f"must be >= 1, got {v}")
    split = get("case", "split", base.split)
    if split not in SPLITS:
        raise err("case", "split", f"expected one of {SPLITS}, got {split!r}")
    for sec, key in (("physics", "eta"), ("physics", "Re"), ("physics", "gamma"),
                     ("physics", "rho_min_guard"), ("time", "dt"), ("time", "t_end"),
                     ("solver", "tol"), ("solver", "a0"), ("case", "rho_m"), ("case", "rho_M")):
        v = get(sec, key)
        if v is not None and not (math.isfinite(v) and v > 0):
            raise err(sec, key, f"must be a positive number, got {v}")
    tau_s = get("physics", "tau_s", bp.tau_s)
    if not (math.isfinite(tau_s) and tau_s >= 0):
        raise err("physics", "tau_s", f"must be >= 0, got {tau_s}")
    if get("physics", "eta") is not None and get("physics", "Re") is not None:
        raise err("physics", "Re", "give either eta or Re, not both")
    eta = get("physics", "eta", bp.eta)
    if get("physics", "Re") is not None:
        eta = 1.0 / get("physics", "Re")
    norm = get("physics", "norm", bp.norm)
    if norm not in NORMS:
        raise err("physics", "norm", f"expected one of {tuple(NORMS)}, got {norm!r}")
    every = get("output", "every", 1)
    if every < 0:
        raise err("output", "every", f"must be >= 0, got {every}")
    rho_m, rho_M = get("case", "rho_m", base.rho_m), get("case", "rho_M", base.rho_M)
    if rho_M < rho_m:
        raise err("case", "rho_M", f"must be >= rho_m = {rho_m}, got {rho_M}")

    params = PhysParams(eta=float(eta), tau_s=float(tau_s),
                        gamma=float(get("physics", "gamma", 1e3)),
                        gravity=tuple(float(g) for g in get("physics", "gravity", bp.gravity)),
                        rho_min_guard=float(get("physics", "rho_min_guard", bp.rho_min_guard)),
                        norm=norm)
    dt, t_end = float(get("time", "dt", base.dt)), float(get("time", "t_end", base.t_end))
    if not base.steady:
        try:
            SimulationClock(dt, t_end)
        except ClockError as exc:
            raise err("time", "dt", str(exc)) from None
    return RunConfig(
        case=name, nx=get("case", "nx", base.nx), ny=get("case", "ny", base.ny), split=split,
        omega=float(get("case", "omega", base.omega)), rho_m=float(rho_m), rho_M=float(rho_M),
        heavy_on_top=get("case", "heavy_on_top", base.heavy_on_top), params=params,
        dt=dt, t_end=t_end, a0=float(get("solver", "a0", base.a0)),
        ssn_tol=float(get("solver", "tol", 1e-5)), ssn_max_iter=get("solver", "max_iter", 50),
        symmetrize_mean=get("solver", "symmetrize_mean", base.symmetrize_mean),
        clamp_density=get("solver", "clamp_density", False),
        output_dir=get("output", "directory", "output"), output_every=every,
        steady=base.steady, line_map=lines)


def parse_override(item: str) -> tuple[str, str, object]:
    """``section.key=value`` from the command line; the value is read as TOML."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form section.key=value")
    lhs, rhs = (s.strip() for s in item.split("=", 1))
    if lhs.count(".") != 1:
        raise ConfigError(f"override key {lhs!r} must be section.key", lhs)
    sec, key = lhs.split(".")
    try:
        value = tomli.loads(f"v = {rhs}")["v"]
    except tomli.TOMLDecodeError:
        value = rhs
    return sec, key, value


def parse_config_text(text: str, overrides=()) -> RunConfig:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"parse error: {exc}", None, int(m.group(1)) if m else None) from None
    lines = _line_map(text)
    data = _normalize(data, lines)
    for item in overrides:
        sec, key, value = parse_override(item)
        data.setdefault(sec, {})
        if not isinstance(data[sec], dict):
            raise ConfigError("expected a section table", sec)
        data[sec][key] = value
        lines.pop((sec, key), None)
    data = _normalize(data, lines)
    return _resolve(data, lines)


def parse_config(path, overrides=()) -> RunConfig:
    """Read, validate and resolve a run configuration file.

    ``overrides`` are ``section.key=value`` strings applied after reading.
    Errors raise :class:`ConfigError` naming the key and line.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    return parse_config_text(text, overrides)


def write_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    return _write(path, tomli_w.dumps(cfg.to_dict()))


def _write(path: Path, text: str) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from exc
    return path


def _fmt(values) -> list[str]:
    return [f"{v:.17g}" for v in np.asarray(values, dtype=float).ravel()]


def write_fields(state: FieldState, disc: Discretization, path, params: PhysParams) -> Path:
    """Legacy ASCII VTK unstructured grid with cell data and cell-averaged velocity.

    Cell arrays: ``rho``, ``p``, ``chi`` (active flag), ``Du_norm`` and the
    vector ``velocity``. Output bytes depend only on the inputs.
    """
    mesh: Mesh = disc.mesh
    nv, nc = mesh.num_vertices, mesh.num_cells
    Du = disc.strain_rate(state.u)
    chi = classify_active(Du, params)
    uq = np.einsum("kqbi,kb->kqi", disc.cell_vals, state.u[disc.cell_dofs])
    ubar = np.einsum("kq,kqi->ki", disc.cell_w, uq) / disc.areas[:, None]
    lines = ["# vtk DataFile Version 3.0", f"bingham_dg fields t={state.time:.17g}", "ASCII",
             "DATASET UNSTRUCTURED_GRID", f"POINTS {nv} double"]
    lines += [f"{x:.17g} {y:.17g} 0" for x, y in mesh.vertices]
    lines.append(f"CELLS {nc} {4 * nc}")
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.cells]
    lines.append(f"CELL_TYPES {nc}")
    lines += ["5"] * nc
    lines.append(f"CELL_DATA {nc}")
    for name, vals, kind in (("rho", state.rho, "double"), ("p", state.p, "double"),
                             ("chi", chi, "int"), ("Du_norm", tensor_norm(Du, params), "double")):
        lines += [f"SCALARS {name} {kind} 1", "LOOKUP_TABLE default"]
        lines += [str(int(v)) for v in vals] if kind == "int" else _fmt(vals)
    lines.append("VECTORS velocity double")
    lines += [f"{a:.17g} {b:.17g} 0" for a, b in ubar]
    return _write(Path(path), "\n".join(lines) + "\n")


def write_ssn_history(reports, path) -> Path:
    """One row per SSN iteration of every step: step, iter, abs_res, rel_res, active_fraction."""
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "iter", "abs_res", "rel_res", "active_fraction"])
            for step, rep in reports:
                for k, ((a, r), f) in enumerate(zip(rep.residual_history,
                                                    rep.active_fraction_history)):
                    w.writerow([step, k, f"{a:.17g}", f"{r:.17g}", f"{f:.17g}"])
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from exc
    return path


@dataclass
class RunResult:
    states: list
    reports: list
    records: list
    output_dir: Path


def run_case(cfg: RunConfig, output_dir=None, log=None) -> RunResult:
    """Run a configured case and write all outputs into ``output_dir``.

    Writes ``config_resolved.toml`` first, then ``fields_<step>.vtk`` every
    ``output_every`` steps (and at the last step), ``diagnostics.csv`` and
    ``ssn_history.csv``. Raises ``NonConvergenceError`` after writing what
    was computed so far.
    """
    out = Path(output_dir if output_dir is not None else cfg.output_dir)
    write_config(cfg, out / "config_resolved.toml")
    setup = build_case(cfg.case_spec())
    problem, disc = setup.problem, setup.problem.disc
    scfg = cfg.solver_config()
    reports, records = [], []

    def emit(step, state, previous, report):
        reports.append((step, report))
        records.append(record(problem, state, previous))
        if log is not None:
            log(f"step {step} t={state.time:.6g} ssn_iter={report.iterations} "
                f"div={records[-1].div_inf:.3e} active={records[-1].active_fraction_shear:.4f}")
        if cfg.output_every and (step % cfg.output_every == 0 or step == last):
            write_fields(state, disc, out / f"fields_{step:05d}.vtk", cfg.params)

    write_fields(setup.initial, disc, out / "fields_00000.vtk", cfg.params)
    try:
        if cfg.steady:
            last = 1
            state, report = solve_steady(problem, setup.initial, scfg)
            if not report.converged:
                raise NonConvergenceError(
                    f"steady SSN did not converge after {report.iterations} iterations", report)
            emit(1, state, None, report)
            states = [setup.initial, state]
        else:
            clock = SimulationClock(cfg.dt, cfg.t_end)
            last = clock.num_steps
            states = run(problem, setup.initial, clock, scfg, on_step=emit,
                         checkpoint_dir=out)
    finally:
        write_diagnostics_csv(records, out / "diagnostics.csv")
        write_ssn_history(reports, out / "ssn_history.csv")
    return RunResult(states, reports, records, out)


def channel_errors(n: int, tau_s: float, cfg: SolverConfig | None = None, **overrides):
    """Solve the channel on an ``n`` by ``n`` grid; returns ``(e_u, e_p, div_inf, report)``."""
    setup = build_case(default_case("channel", nx=n, ny=n, tau_s=tau_s, **overrides))
    state, report = solve_steady(setup.problem, setup.initial, cfg)
    disc = setup.problem.disc
    eu, ep = error_norms(disc, state, setup.exact_velocity, setup.exact_pressure,
                         setup.exact_gradient)
    return eu, ep, div_inf_norm(disc, state.u), report


def run_convergence_study(levels: int, tau_s: float = 0.25, path=None,
                          cfg: SolverConfig | None = None, **overrides) -> list[dict]:
    """Channel errors and rates on ``h = 0.25 * 2**(1 - i)``, ``i = 1..levels``.

    Returns rows with keys ``CONVERGENCE_COLUMNS`` (rates are NaN on the first
    row) and writes them as CSV to ``path`` if given. A level that does not
    converge raises :class:`ConvergenceStudyError` carrying the finished rows,
    which are also written.
    """
    if not isinstance(levels, int) or isinstance(levels, bool) or levels < 2:
        raise ValueError(f"levels must be an integer >= 2, got {levels!r}")
    rows = []
    try:
        for i in range(1, levels + 1):
            h = 0.25 * 2.0 ** (1 - i)
            eu, ep, div, report = channel_errors(round(1 / h), tau_s, cfg, **overrides)
            if not report.converged:
                raise ConvergenceStudyError(
                    f"channel solve at h = {h:g} did not converge after {report.iterations} "
                    f"iterations", rows)
            row = {"h": h, "e_u": eu, "e_p": ep, "div_inf": div,
                   "rate_u": math.nan, "rate_p": math.nan}
            if rows:
                prev = rows[-1]
                row["rate_u"] = convergence_rate(prev["e_u"], eu, prev["h"], h)
                row["rate_p"] = convergence_rate(prev["e_p"], ep, prev["h"], h)
            rows.append(row)
    finally:
        if path is not None:
            write_convergence_csv(rows, path)
    return rows


def write_convergence_csv(rows, path) -> Path:
    path = Path(path)
    text = ",".join(CONVERGENCE_COLUMNS) + "\n"
    text += "".join(",".join(f"{r[c]:.17g}" for c in CONVERGENCE_COLUMNS) + "\n" for r in rows)
    return _write(path, text)


def format_convergence_table(rows) -> str:
    head = f"{'h':>10} {'e_u':>12} {'rate_u':>8} {'e_p':>12} {'rate_p':>8} {'div_inf':>10}"
    out = [head]
    for r in rows:
        ru = "" if math.isnan(r["rate_u"]) else f"{r['rate_u']:.4f}"
        rp = "" if math.isnan(r["rate_p"]) else f"{r['rate_p']:.4f}"
        out.append(f"{r['h']:>10.6g} {r['e_u']:>12.4e} {ru:>8} {r['e_p']:>12.4e} {rp:>8} "
                   f"{r['div_inf']:>10.2e}")
    return "\n".join(out)


__all__ = ["RunConfig", "ConfigError", "OutputError", "ConvergenceStudyError", "parse_config",
           "parse_config_text", "parse_override", "write_config", "write_fields",
           "write_ssn_history", "run_case", "RunResult", "channel_errors",
           "run_convergence_study", "write_convergence_csv", "format_convergence_table"]
