"""Verification quantities: error norms, rates, divergence, active sets, energies."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .forms import Discretization, FieldState, Problem, upwind_seminorm_rho, upwind_seminorm_u
from .huber import PhysParams, classify_active, regularized_stress, tensor_norm

CSV_COLUMNS = ("time", "rho_l2", "sigma_u_l2", "u_1h", "div_inf", "active_fraction_shear",
               "active_fraction_vonmises", "density_energy", "momentum_energy",
               "upwind_rho", "upwind_u")


@dataclass
class DiagnosticsRecord:
    time: float
    rho_l2: float
    sigma_u_l2: float
    u_1h: float
    div_inf: float
    active_fraction_shear: float
    active_fraction_vonmises: float
    density_energy: float = float("nan")
    momentum_energy: float = float("nan")
    upwind_rho: float = float("nan")
    upwind_u: float = float("nan")


def div_inf_norm(disc: Discretization, u: np.ndarray) -> float:
    """Largest cellwise ``|div u_h|`` (constant on each cell for BDM1)."""
    return float(np.max(np.abs(disc.divergence(u)))) if disc.nc else 0.0


def l2_norm_p0(disc: Discretization, q: np.ndarray) -> float:
    return float(np.sqrt(disc.areas @ np.asarray(q) ** 2))


def velocity_l2(disc: Discretization, u: np.ndarray, weight: np.ndarray | None = None) -> float:
    uq = np.einsum("kqbi,kb->kqi", disc.cell_vals, u[disc.cell_dofs])
    w = disc.cell_w if weight is None else disc.cell_w * weight[:, None]
    return float(np.sqrt(np.einsum("kq,kqi,kqi->", w, uq, uq)))


def broken_h1_norm(disc: Discretization, u: np.ndarray,
                   exact: Callable | None = None, exact_grad: Callable | None = None) -> float:
    """``||v||_{1,Th}`` of ``v = u_h - exact`` (or of ``u_h`` alone).

    The squared norm is the L2 norm plus ``sum_K ||D v||^2_K`` plus
    ``sum_e h_e^{-1} ||[v]||^2_e`` over all facets; on boundary facets the jump
    is the trace. ``exact(x)`` returns (n, 2) values, ``exact_grad(x)`` the
    (n, 2, 2) gradient.
    """
    uK = u[disc.cell_dofs]
    uq = np.einsum("kqbi,kb->kqi", disc.cell_vals, uK)
    Dh = disc.strain_rate(u)
    err = uq.copy()
    Derr = np.broadcast_to(Dh[:, None], uq.shape[:2] + (2, 2)).copy()
    if exact is not None:
        pts = disc.cell_pts.reshape(-1, 2)
        err -= np.asarray(exact(pts)).reshape(uq.shape)
        if exact_grad is not None:
            G = np.asarray(exact_grad(pts)).reshape(uq.shape[:2] + (2, 2))
            Derr -= 0.5 * (G + np.swapaxes(G, -1, -2))
    l2 = np.einsum("kq,kqi,kqi->", disc.cell_w, err, err)
    dd = np.einsum("kq,kqij,kqij->", disc.cell_w, Derr, Derr)

    jv = disc.fvals * disc.fsign[:, None, :, None]
    jump = np.einsum("fqbi,fb->fqi", jv, u[disc.fdofs])
    if exact is not None:
        bnd = ~disc.is_interior
        gb = np.asarray(exact(disc.facet_pts[bnd].reshape(-1, 2))).reshape(jump[bnd].shape)
        jump[bnd] -= gb
    jj = np.sum(disc.facet_w / disc.mesh.facet_lengths[:, None]
                * np.einsum("fqi,fqi->fq", jump, jump))
    return float(np.sqrt(l2 + dd + jj))


def error_norms(disc: Discretization, states, exact_u: Callable, exact_p: Callable,
                exact_grad: Callable | None = None):
    """``(e_u, e_p)`` accumulated over a sequence of states (a single state is allowed).

    ``exact_u(x, t)``, ``exact_p(x, t)`` and ``exact_grad(x, t)`` evaluate the
    reference solution. The velocity error uses the broken H1 norm, the
    pressure error the L2 norm against cell quadrature of ``exact_p``.
    """
    if isinstance(states, FieldState):
        states = [states]
    eu2 = ep2 = 0.0
    for s in states:
        t = s.time
        grad = None if exact_grad is None else (lambda x: exact_grad(x, t))
        eu2 += broken_h1_norm(disc, s.u, lambda x: exact_u(x, t), grad) ** 2
        pq = np.asarray(exact_p(disc.cell_pts.reshape(-1, 2), t)).reshape(disc.cell_w.shape)
        ep2 += float(np.einsum("kq,kq->", disc.cell_w, (s.p[:, None] - pq) ** 2))
    return math.sqrt(eu2), math.sqrt(ep2)


def convergence_rate(e: float, e_tilde: float, h: float, h_tilde: float) -> float:
    """``log(e / e_tilde) / log(h / h_tilde)``."""
    if min(e, e_tilde, h, h_tilde) <= 0:
        raise ValueError("errors and mesh sizes must be positive")
    if h == h_tilde:
        raise ValueError("mesh sizes must differ")
    return math.log(e / e_tilde) / math.log(h / h_tilde)


def deviatoric(T: np.ndarray) -> np.ndarray:
    tr = T[..., 0, 0] + T[..., 1, 1]
    return T - 0.5 * tr[..., None, None] * np.eye(2)


def active_fraction(disc: Discretization, state: FieldState, params: PhysParams,
                    criterion: str = "shear_rate") -> float:
    """Fraction of cells classified yielded.

    ``shear_rate``: ``gamma |Du| >= tau_s``. ``von_mises``: Frobenius norm of the
    deviator of the regularized stress ``>= tau_s``.
    """
    Du = disc.strain_rate(state.u)
    if criterion == "shear_rate":
        return float(np.mean(classify_active(Du, params)))
    if criterion == "von_mises":
        dev = deviatoric(regularized_stress(Du, params))
        return float(np.mean(tensor_norm(dev) >= params.tau_s))
    raise ValueError(f"unknown criterion {criterion!r}")


def inactive_band_width(disc: Discretization, state: FieldState, params: PhysParams) -> float:
    """Height of the unyielded band: inactive area divided by the domain width.

    Meant for horizontal plug flow, where the inactive set is a strip.
    """
    x0, x1 = disc.mesh.domain[:2]
    inactive = classify_active(disc.strain_rate(state.u), params) == 0
    return float(disc.areas[inactive].sum() / (x1 - x0))


def density_energy(disc: Discretization, rho_new: np.ndarray, rho_old: np.ndarray) -> float:
    """``||rho^{n+1}||^2 + ||2 rho^{n+1} - rho^n||^2``."""
    return l2_norm_p0(disc, rho_new) ** 2 + l2_norm_p0(disc, 2 * rho_new - rho_old) ** 2


def momentum_energy(disc: Discretization, new: FieldState, old: FieldState) -> float:
    """``||sigma u^{n+1}||^2 + ||2 sigma u^{n+1} - sigma u^n||^2`` with ``sigma = sqrt(rho)``."""
    sn, so = np.sqrt(np.maximum(new.rho, 0)), np.sqrt(np.maximum(old.rho, 0))
    a = velocity_l2(disc, new.u, new.rho) ** 2
    uq_n = np.einsum("kqbi,kb->kqi", disc.cell_vals, new.u[disc.cell_dofs]) * sn[:, None, None]
    uq_o = np.einsum("kqbi,kb->kqi", disc.cell_vals, old.u[disc.cell_dofs]) * so[:, None, None]
    d = 2 * uq_n - uq_o
    return a + float(np.einsum("kq,kqi,kqi->", disc.cell_w, d, d))


def record(problem: Problem, state: FieldState, previous: FieldState | None = None) -> DiagnosticsRecord:
    d, prm = problem.disc, problem.params
    rec = DiagnosticsRecord(
        time=state.time,
        rho_l2=l2_norm_p0(d, state.rho),
        sigma_u_l2=velocity_l2(d, state.u, np.maximum(state.rho, 0)),
        u_1h=broken_h1_norm(d, state.u),
        div_inf=div_inf_norm(d, state.u),
        active_fraction_shear=active_fraction(d, state, prm, "shear_rate"),
        active_fraction_vonmises=active_fraction(d, state, prm, "von_mises"),
        upwind_rho=upwind_seminorm_rho(d, state.u, state.rho),
        upwind_u=upwind_seminorm_u(problem, state.rho, state.u, state.u),
    )
    if previous is not None:
        rec.density_energy = density_energy(d, state.rho, previous.rho)
        rec.momentum_energy = momentum_energy(d, state, previous)
    return rec


def energy_monitors(problem: Problem, history) -> list[DiagnosticsRecord]:
    """One record per consecutive pair of states in ``history`` (oldest first)."""
    history = list(history)
    if len(history) < 2:
        raise ValueError("energy monitors need at least two states")
    return [record(problem, new, old) for old, new in zip(history[:-1], history[1:])]


def write_diagnostics_csv(records, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for rec in records:
            row = asdict(rec)
            w.writerow([f"{row[c]:.17g}" for c in CSV_COLUMNS])
    return path
