"""Benchmark problems: channel, lid-driven cavity, Rayleigh-Taylor and falling droplet."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .fespace import interpolate
from .forms import Discretization, FieldState, Problem
from .huber import PhysParams, huber_norm
from .mesh import Mesh, generate_structured_mesh

CASES = ("channel", "cavity", "rayleigh_taylor", "droplet")


class CaseError(ValueError):
    """Unknown case name or inconsistent case data."""


@dataclass(frozen=True)
class CaseSpec:
    """Complete description of one benchmark run.

    ``boundary`` maps each side to "dirichlet" or "free_slip". Densities are
    dimensionless; ``numbers`` holds derived quantities such as Re and At.
    """

    name: str
    domain: tuple[float, float, float, float]
    nx: int
    ny: int
    params: PhysParams
    dt: float = 0.1
    t_end: float = 0.5
    steady: bool = False
    split: str = "alternating"
    boundary: dict = field(default_factory=lambda: dict.fromkeys(
        ("bottom", "top", "left", "right"), "dirichlet"))
    numbers: dict = field(default_factory=dict)
    tau_s: float = 0.0
    omega: float = 0.1
    rho_m: float = 1.0
    rho_M: float = 3.0
    heavy_on_top: bool = True
    a0: float = 10.0
    symmetrize_mean: bool = False


@dataclass
class CaseSetup:
    mesh: Mesh
    problem: Problem
    initial: FieldState
    boundary_velocity: Callable
    body_force: Callable
    exact_velocity: Callable | None = None
    exact_pressure: Callable | None = None
    exact_gradient: Callable | None = None


def analytical_channel_velocity(y, tau_s: float) -> np.ndarray:
    """Steady plane Bingham flow between plates ``y = 0`` and ``y = 1``.

    Parabolic branches below ``1/2 - tau_s`` and above ``1/2 + tau_s``, and the
    plug value ``(1 - 2 tau_s)^2 / 8`` in between. For ``tau_s >= 1/2`` the
    flow is blocked and zero is returned with a warning.
    """
    y = np.asarray(y, dtype=float)
    if tau_s >= 0.5:
        warnings.warn("tau_s >= 1/2 blocks the channel flow; returning zero velocity",
                      RuntimeWarning, stacklevel=2)
        return np.zeros_like(y)
    if tau_s < 0:
        raise ValueError(f"tau_s must be >= 0, got {tau_s}")
    plug = 0.125 * (1 - 2 * tau_s) ** 2
    lower = 0.125 * ((1 - 2 * tau_s) ** 2 - (1 - 2 * tau_s - 2 * y) ** 2)
    upper = 0.125 * ((1 - 2 * tau_s) ** 2 - (2 * y - 2 * tau_s - 1) ** 2)
    return np.where(y < 0.5 - tau_s, lower, np.where(y > 0.5 + tau_s, upper, plug))


def analytical_channel_dudy(y, tau_s: float) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if tau_s >= 0.5:
        return np.zeros_like(y)
    return np.where(y < 0.5 - tau_s, 0.5 * (1 - 2 * tau_s - 2 * y),
                    np.where(y > 0.5 + tau_s, -0.5 * (2 * y - 2 * tau_s - 1), 0.0))


def analytical_channel_pressure(x) -> np.ndarray:
    """Zero-mean pressure ``1/2 - x`` driving the unit-viscosity channel flow."""
    return 0.5 - np.asarray(x, dtype=float)


def rt_initial_density(x, y, rho_m: float, rho_M: float, omega: float, l: float = 1.0,
                       heavy_on_top: bool = True) -> np.ndarray:
    """Smoothed two-layer density with a cosine-perturbed interface.

    ``heavy_on_top=False`` gives the literal formula with the heavy fluid
    below the interface; the default flips the tanh so the heavy fluid sits
    above it, the unstable configuration under downward gravity.
    """
    s = 1.0 if not heavy_on_top else -1.0
    arg = (np.asarray(y) - omega * np.cos(2 * np.pi * np.asarray(x) / l)) / (0.01 * l)
    return 0.5 * (rho_m + rho_M) + 0.5 * (rho_m - rho_M) * s * np.tanh(arg)


def nondimensionalize(rho_m: float, rho_M: float, l: float, g: float, eta: float,
                      t_tilde: float | None = None) -> dict:
    """Atwood and Reynolds numbers, plus the Tryggvason time if ``t_tilde`` is given."""
    if min(rho_m, l, g, eta) <= 0:
        raise ValueError("densities, length, gravity and viscosity must be positive")
    if rho_M <= rho_m:
        raise ValueError(f"need rho_M > rho_m, got rho_M={rho_M}, rho_m={rho_m}")
    At = (rho_M - rho_m) / (rho_M + rho_m)
    out = {"At": At, "Re": rho_m * l ** 1.5 * math.sqrt(g) / eta,
           "time_scale": math.sqrt(l / g), "try_factor": math.sqrt(At)}
    if t_tilde is not None:
        out["t_try"] = t_tilde * math.sqrt(At)
    return out


def default_case(name: str, **overrides) -> CaseSpec:
    """Benchmark defaults; keyword overrides replace ``CaseSpec`` fields.

    ``Re``, ``tau_s``, ``gamma`` and ``eta`` overrides are folded into the
    physical parameters.
    """
    if name not in CASES:
        raise CaseError(f"unknown case {name!r}; expected one of {CASES}")
    re = overrides.pop("Re", None)
    gamma = overrides.pop("gamma", 1e3)
    tau_s = overrides.pop("tau_s", None)
    eta = overrides.pop("eta", None)
    rho_min_guard = overrides.pop("rho_min_guard", 1e-8)
    if name == "channel":
        tau = 0.25 if tau_s is None else tau_s
        params = PhysParams(eta=1.0 if eta is None else eta, tau_s=tau, gamma=gamma,
                            norm="shear", rho_min_guard=rho_min_guard)
        spec = CaseSpec(name, (0.0, 1.0, 0.0, 1.0), 16, 16, params, dt=1.0, t_end=1.0,
                        steady=True, tau_s=tau)
    elif name == "cavity":
        re = 100.0 if re is None else re
        tau = 2.5 if tau_s is None else tau_s
        params = PhysParams(eta=1.0 / re if eta is None else eta, tau_s=tau, gamma=gamma,
                            rho_min_guard=rho_min_guard)
        spec = CaseSpec(name, (0.0, 1.0, 0.0, 1.0), 32, 32, params, dt=0.1, t_end=0.5,
                        tau_s=tau, numbers={"Re": re})
    elif name == "rayleigh_taylor":
        re = 1000.0 if re is None else re
        tau = 0.0 if tau_s is None else tau_s
        params = PhysParams(eta=1.0 / re if eta is None else eta, tau_s=tau, gamma=gamma,
                            gravity=(0.0, -1.0), rho_min_guard=rho_min_guard)
        spec = CaseSpec(name, (-0.5, 0.5, -2.0, 2.0), 32, 128, params, dt=0.1, t_end=2.0,
                        tau_s=tau, boundary={"bottom": "dirichlet", "top": "dirichlet",
                                             "left": "free_slip", "right": "free_slip"})
    else:
        re = 1000.0 if re is None else re
        tau = 0.0 if tau_s is None else tau_s
        params = PhysParams(eta=1.0 / re if eta is None else eta, tau_s=tau, gamma=gamma,
                            gravity=(0.0, -1.0), rho_min_guard=rho_min_guard)
        spec = CaseSpec(name, (0.0, 2.0, 0.0, 3.0), 40, 60, params, dt=0.1, t_end=4.0,
                        tau_s=tau, rho_m=1.0, rho_M=15.0, numbers={"Re": re})
    spec = replace(spec, **overrides)
    if name == "rayleigh_taylor":
        nums = nondimensionalize(spec.rho_m, spec.rho_M, 1.0, 1.0, spec.params.eta)
        spec = replace(spec, numbers={**nums, "omega": spec.omega})
    return spec


def _validate(spec: CaseSpec):
    if spec.name not in CASES:
        raise CaseError(f"unknown case {spec.name!r}; expected one of {CASES}")
    for side, kind in spec.boundary.items():
        if side not in ("bottom", "top", "left", "right") or kind not in ("dirichlet", "free_slip"):
            raise CaseError(f"invalid boundary entry {side!r} = {kind!r}")
    if not spec.steady and spec.name == "channel":
        raise CaseError("the channel case has inflow boundaries and is only run as a steady problem")


def build_case(spec: CaseSpec) -> CaseSetup:
    """Mesh, problem definition and interpolated initial state for a case."""
    _validate(spec)
    mesh = generate_structured_mesh(spec.nx, spec.ny, spec.domain, split=spec.split)
    disc = Discretization(mesh)
    prm = spec.params
    zero = lambda x, t: np.zeros((len(x), 2))  # noqa: E731
    exact_u = exact_p = exact_g = None
    x0, x1, y0, y1 = spec.domain

    if spec.name == "channel":
        tau = prm.tau_s

        def g(x, t):
            return np.column_stack([analytical_channel_velocity(x[:, 1], tau), np.zeros(len(x))])

        def exact_g(x, t):
            out = np.zeros((len(x), 2, 2))
            out[:, 0, 1] = analytical_channel_dudy(x[:, 1], tau)
            return out

        exact_u = g
        exact_p = lambda x, t: analytical_channel_pressure(x[:, 0])  # noqa: E731
        rho0 = lambda x: np.ones(len(x))  # noqa: E731
        u0 = lambda x: g(x, 0.0)  # noqa: E731
        p0 = lambda x: analytical_channel_pressure(x[:, 0])  # noqa: E731
    elif spec.name == "cavity":
        tol = 1e-12 * (y1 - y0)

        def g(x, t):
            out = np.zeros((len(x), 2))
            out[np.abs(x[:, 1] - y1) < tol, 0] = 1.0
            return out

        rho0 = lambda x: np.ones(len(x))  # noqa: E731
        u0 = lambda x: np.zeros((len(x), 2))  # noqa: E731
        p0 = None
    elif spec.name == "rayleigh_taylor":
        g = zero
        rho0 = lambda x: rt_initial_density(x[:, 0], x[:, 1], spec.rho_m, spec.rho_M,  # noqa: E731
                                            spec.omega, 1.0, spec.heavy_on_top)
        u0 = lambda x: np.zeros((len(x), 2))  # noqa: E731
        p0 = None
    else:
        g = zero
        c, rad = np.array([1.0, 2.75]), 0.1
        rho0 = lambda x: np.where(np.hypot(*(x - c).T) < rad, spec.rho_M, spec.rho_m)  # noqa: E731
        u0 = lambda x: np.zeros((len(x), 2))  # noqa: E731
        p0 = None

    free = tuple(s for s, k in spec.boundary.items() if k == "free_slip")
    problem = Problem(disc, prm, a0=spec.a0, boundary_velocity=g, free_slip=free,
                      freeze_density=spec.steady, symmetrize_mean=spec.symmetrize_mean)
    rho = interpolate(disc.Q, rho0, disc.quad)
    u = interpolate(disc.V, u0, disc.quad)
    p = np.zeros(disc.nc) if p0 is None else interpolate(disc.Q, p0, disc.quad)
    z = initial_multiplier(disc, u, prm)
    initial = FieldState(rho, u, p, z, 0.0)
    body = lambda x, t: np.zeros((len(x), 2))  # noqa: E731
    return CaseSetup(mesh, problem, initial, g, body, exact_u, exact_p, exact_g)


def initial_multiplier(disc: Discretization, u: np.ndarray, params: PhysParams) -> np.ndarray:
    """``z = gamma tau_s Du / |Du|_gamma`` cellwise (zero when ``tau_s = 0``)."""
    if params.tau_s == 0.0:
        return np.zeros(4 * disc.nc)
    Du = disc.strain_rate(u)
    return (params.gamma * params.tau_s * Du / huber_norm(Du, params)[:, None, None]).ravel()
