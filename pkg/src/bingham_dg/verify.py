"""Property checks shared by the ``verify`` command and the test suite.

Each check returns a :class:`CheckResult` with the measured quantity and the
threshold it is compared against.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .cases import build_case, default_case
from .diagnostics import density_energy
from .forms import (Discretization, FieldState, Problem, assemble_c1h, assemble_c2h,
                    assemble_residual, divergence_matrix, pack, upwind_seminorm_rho,
                    upwind_seminorm_u)
from .huber import PhysParams, huber_norm, regularized_stress, tensor_norm
from .mesh import generate_structured_mesh
from .ssn import SolverConfig
from .timeloop import SimulationClock, advance


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"[{status}] {self.name}: {self.value:.3e} vs {self.threshold:.1e}{extra}"


def random_tensors(rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` random 2x2 tensors with magnitudes spread over 1e-6..1e1."""
    A = rng.standard_normal((n, 2, 2))
    return A * 10.0 ** rng.uniform(-6, 1, n)[:, None, None]


def huber_lemma_violations(n_pairs: int = 10_000, seed: int = 0,
                           gammas=(10.0, 1e3), taus=(0.0, 2.5), eta: float = 1.0) -> dict:
    """Largest violation of each Huber inequality, scaled by the right-hand side.

    Keys: ``norm_lipschitz`` for ``|theta|_g - |vartheta|_g <= g |theta - vartheta|``,
    ``stress_lipschitz`` for constant ``2 eta + 2 g``, ``monotonicity`` for
    ``(tau(theta) - tau(vartheta)) : (theta - vartheta) >= 2 eta |theta - vartheta|^2``.
    A value ``<= 0`` means the inequality holds; positive values are violations
    relative to ``max(1, rhs)``.
    """
    rng = np.random.default_rng(seed)
    worst = {"norm_lipschitz": -np.inf, "stress_lipschitz": -np.inf, "monotonicity": -np.inf}
    for gamma in gammas:
        for tau in taus:
            p = PhysParams(eta=eta, tau_s=tau, gamma=gamma)
            A, B = random_tensors(rng, n_pairs), random_tensors(rng, n_pairs)
            # pairs straddling the kink and very close pairs
            B[: n_pairs // 4] = A[: n_pairs // 4] + 1e-3 * random_tensors(rng, n_pairs // 4)
            d = tensor_norm(A - B)
            lhs = np.abs(huber_norm(A, p) - huber_norm(B, p))
            rhs = gamma * d
            worst["norm_lipschitz"] = max(worst["norm_lipschitz"],
                                          float(np.max((lhs - rhs) / np.maximum(1, rhs))))
            TA, TB = regularized_stress(A, p), regularized_stress(B, p)
            lhs = tensor_norm(TA - TB)
            rhs = (2 * eta + 2 * gamma) * d
            worst["stress_lipschitz"] = max(worst["stress_lipschitz"],
                                            float(np.max((lhs - rhs) / np.maximum(1, rhs))))
            inner = np.einsum("nij,nij->n", TA - TB, A - B)
            rhs = 2 * eta * d ** 2
            worst["monotonicity"] = max(worst["monotonicity"],
                                        float(np.max((rhs - inner) / np.maximum(1, rhs))))
    return worst


def check_huber_lemmas(n_pairs: int = 10_000, seed: int = 0, slack: float = 1e-12):
    v = huber_lemma_violations(n_pairs, seed)
    return [CheckResult(f"huber {k}", val <= slack, max(val, 0.0), slack) for k, val in v.items()]


def divergence_free_field(disc: Discretization, rng: np.random.Generator) -> np.ndarray:
    """Random BDM1 field with zero boundary normal dofs in the kernel of ``b``."""
    B = divergence_matrix(disc).toarray()
    free = np.setdiff1d(np.arange(disc.nu), disc.boundary_udofs)
    N = sla.null_space(B[:, free])
    u = np.zeros(disc.nu)
    u[free] = N @ rng.standard_normal(N.shape[1])
    return u


def upwind_identity_errors(n: int = 4, seed: int = 0) -> dict:
    """Relative gaps ``|c(u; v, v) - |v|^2_upw| / max(1, |v|^2_upw)`` for c1h and c2h."""
    rng = np.random.default_rng(seed)
    disc = Discretization(generate_structured_mesh(n, n))
    problem = Problem(disc, PhysParams())
    w = divergence_free_field(disc, rng)
    rho = 1.0 + rng.random(disc.nc)
    psi = rng.standard_normal(disc.nc)
    c1 = float(psi @ assemble_c1h(disc, w, psi))
    s1 = upwind_seminorm_rho(disc, w, psi)
    v = rng.standard_normal(disc.nu)
    v[disc.boundary_udofs] = 0.0
    c2 = float(v @ assemble_c2h(problem, rho, v, 0.0, w=w))
    s2 = upwind_seminorm_u(problem, rho, w, v)
    return {"c1h": abs(c1 - s1) / max(1.0, abs(s1)), "c2h": abs(c2 - s2) / max(1.0, abs(s2)),
            "seminorm_rho": s1, "seminorm_u": s2}


def check_upwind_identities(n: int = 4, seed: int = 0, tol: float = 1e-12):
    e = upwind_identity_errors(n, seed)
    return [CheckResult(f"upwind identity {k}", e[k] <= tol, e[k], tol) for k in ("c1h", "c2h")]


def _smooth_problem(disc: Discretization, tau_s: float, project: bool) -> Problem:
    prm = PhysParams(eta=0.7, tau_s=tau_s, gamma=10.0, gravity=(0.3, -1.0))
    g = lambda x, t: np.column_stack([np.sin(x[:, 1]) + 0.3, 0.2 * x[:, 0] ** 2])  # noqa: E731
    f = lambda x, t: np.column_stack([x[:, 0] * x[:, 1], np.cos(x[:, 0])])  # noqa: E731
    return Problem(disc, prm, a0=10.0, boundary_velocity=g, body_force=f,
                   free_slip=("left",), project_multiplier=project)


def jacobian_fd_error(seed: int = 0, eps: float = 1e-6, n: int = 2, scheme: str = "BDF2",
                      tau_s: float = 0.5, project: bool = False) -> float:
    """Relative error of the SSN Jacobian against a central difference.

    The iterate is a random smooth state: positive density, random velocity and
    pressure, and a multiplier inside the ball ``|z| <= tau_s`` when
    ``project`` is set (the projected Jacobian is exact there). Iterates whose
    cells lie within 1e-3 of the active-set threshold are redrawn.
    """
    rng = np.random.default_rng(seed)
    disc = Discretization(generate_structured_mesh(n, n))
    problem = _smooth_problem(disc, tau_s, project)
    prm = problem.params

    def state():
        z = rng.standard_normal((disc.nc, 2, 2))
        if project:
            z *= (tau_s * rng.uniform(0.1, 0.9, disc.nc) / tensor_norm(z))[:, None, None]
        return FieldState(1.0 + rng.random(disc.nc), rng.standard_normal(disc.nu),
                          rng.standard_normal(disc.nc), z.ravel())

    for _ in range(100):
        cur = state()
        t = prm.gamma * tensor_norm(disc.strain_rate(cur.u))
        if tau_s == 0 or np.min(np.abs(t - tau_s)) > 1e-3 * tau_s:
            break
    hist = [state(), state()]
    x = pack(cur)
    r, J = assemble_residual(problem, x, hist, 0.1, scheme, 0.2, jacobian=True)
    dvec = rng.standard_normal(x.size)
    fd = (assemble_residual(problem, x + eps * dvec, hist, 0.1, scheme, 0.2)
          - assemble_residual(problem, x - eps * dvec, hist, 0.1, scheme, 0.2)) / (2 * eps)
    Jd = J @ dvec
    return float(np.linalg.norm(fd - Jd) / np.linalg.norm(Jd))


def check_jacobian(tol: float = 1e-5, seed: int = 0):
    out = []
    for project in (False, True):
        for scheme in ("BE", "BDF2"):
            err = jacobian_fd_error(seed, scheme=scheme, project=project)
            label = "projected" if project else "exact"
            out.append(CheckResult(f"jacobian fd {scheme} {label}", err <= tol, err, tol))
    return out


def density_energy_sequence(nx: int = 8, ny: int = 32, steps: int = 4) -> list[float]:
    """Density energy after each step of a coarse Rayleigh-Taylor run."""
    setup = build_case(default_case("rayleigh_taylor", nx=nx, ny=ny))
    clock = SimulationClock(0.1, 0.1 * steps)
    hist = [setup.initial]
    energies = []
    while not clock.finished:
        prev = hist[0]
        state, report, hist = advance(setup.problem, hist, clock, SolverConfig())
        if not report.converged:
            raise RuntimeError(f"SSN did not converge at step {clock.step_index + 1}")
        clock.tick()
        energies.append(density_energy(setup.problem.disc, state.rho, prev.rho))
    return energies


def max_relative_increase(values) -> float:
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        return 0.0
    return float(np.max((v[1:] - v[:-1]) / np.abs(v[:-1])))


def check_energy(tol: float = 1e-8):
    inc = max_relative_increase(density_energy_sequence())
    return [CheckResult("density energy nonincreasing", inc <= tol, max(inc, 0.0), tol)]


def run_all() -> list[CheckResult]:
    return check_huber_lemmas() + check_upwind_identities() + check_jacobian() + check_energy()
