"""Residual and semismooth-Newton Jacobian assembly.

Unknowns are stacked as ``x = (rho | u | p | z | lam)`` with P0 density,
BDM1 velocity, P0 pressure, a P0 tensor multiplier (four components per cell,
row-major) and a scalar Lagrange multiplier enforcing zero-mean pressure.
Residual rows follow the same layout.

Facet conventions: ``[v] = v+ - v-`` and ``{v} = (v+ + v-)/2`` with ``n_e``
pointing from ``K+`` to ``K-``. On a boundary facet the jump and the average
are the trace; for Dirichlet data the jump of the unknown is ``u - g``.
Every facet-level quantity is evaluated in a padded 12-dof form (six plus-side
and six minus-side basis functions) whose minus half is zero on the boundary.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .fespace import (FESpace, bdm1_cell_basis, build_space, facet_points,
                      make_quadrature)
from .huber import PhysParams, huber_norm, regularized_stress, tensor_norm, viscosity_mu
from .mesh import BOUNDARY_TAGS, Mesh

SCHEMES = {"BE": (1.0, -1.0, 0.0), "BDF2": (1.5, -2.0, 0.5), "steady": (0.0, 0.0, 0.0)}
BLOCKS = ("rho", "u", "p", "z", "lam")
JUMP_TOL = 1e-12


class DensityPositivityError(RuntimeError):
    """A density coefficient fell below the positivity guard."""


@dataclass(frozen=True, eq=False)
class FieldState:
    """Coefficient vectors at one time level; arrays are read-only copies."""

    rho: np.ndarray
    u: np.ndarray
    p: np.ndarray
    z: np.ndarray
    time: float = 0.0
    lam: float = 0.0

    def __post_init__(self):
        for name in ("rho", "u", "p", "z"):
            a = np.array(getattr(self, name), dtype=float)
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @classmethod
    def zeros(cls, disc: "Discretization", time: float = 0.0) -> "FieldState":
        return cls(np.zeros(disc.nc), np.zeros(disc.nu), np.zeros(disc.nc),
                   np.zeros(4 * disc.nc), time)

    def replace(self, **kw) -> "FieldState":
        data = dict(rho=self.rho, u=self.u, p=self.p, z=self.z, time=self.time, lam=self.lam)
        data.update(kw)
        return FieldState(**data)


@dataclass
class SparseSystem:
    """Jacobian ``matrix`` and right-hand side ``rhs = -residual`` with block layout."""

    matrix: sp.csc_matrix
    rhs: np.ndarray
    offsets: dict

    def block_of(self, index: int) -> str:
        name = BLOCKS[0]
        for b in BLOCKS:
            if index >= self.offsets[b]:
                name = b
        return name


class Discretization:
    """Spaces plus quadrature tables shared by every assembly call on one mesh."""

    def __init__(self, mesh: Mesh, quad_degree: int = 4):
        self.mesh = mesh
        self.quad = make_quadrature(quad_degree)
        self.V: FESpace = build_space(mesh, "velocity_bdm1")
        self.Q: FESpace = build_space(mesh, "scalar_p0")
        self.W: FESpace = build_space(mesh, "tensor_p0")
        nc, nf = mesh.num_cells, mesh.num_facets
        self.nc, self.nf, self.nu = nc, nf, self.V.num_dofs
        self.offsets = {"rho": 0, "u": nc, "p": nc + self.nu, "z": 2 * nc + self.nu,
                        "lam": 6 * nc + self.nu}
        self.size = 6 * nc + self.nu + 1
        self.areas = mesh.cell_areas
        self.cell_dofs = self.V.cell_dofs

        cells = np.arange(nc)
        vals, grads, divs = bdm1_cell_basis(self.V, cells, self.quad.cell_points_ref)
        self.cell_vals = vals                                   # (nc, nq, 6, 2)
        self.cell_grads = grads                                 # (nc, 6, 2, 2)
        self.cell_D = 0.5 * (grads + grads.transpose(0, 1, 3, 2))
        self.cell_div = divs                                    # (nc, 6)
        self.cell_w = self.V.dets[:, None] * self.quad.cell_weights[None, :]
        self.cell_pts = np.einsum("qa,kai->kqi", self.quad.cell_points,
                                  mesh.vertices[mesh.cells])
        self.cell_mass = np.einsum("kq,kqai,kqbi->kab", self.cell_w, vals, vals)
        self.cell_int = np.einsum("kq,kqai->kai", self.cell_w, vals)

        pts, t, fw = facet_points(mesh, self.quad)
        self.facet_pts, self.facet_t, self.facet_w = pts, t, fw
        kp = mesh.facet_cells[:, 0]
        interior = mesh.facet_cells[:, 1] >= 0
        km = np.where(interior, mesh.facet_cells[:, 1], kp)
        self.kp, self.km, self.is_interior = kp, km, interior
        side_vals, side_D = [], []
        for k in (kp, km):
            xh = self.V.to_reference_many(k, pts)
            v, g, _ = bdm1_cell_basis(self.V, k, xh)
            side_vals.append(v)
            side_D.append(0.5 * (g + g.transpose(0, 1, 3, 2)))
        mask = interior[:, None, None, None].astype(float)
        self.fvals = np.concatenate([side_vals[0], side_vals[1] * mask], axis=2)
        self.fD = np.concatenate([side_D[0], side_D[1] * mask], axis=1)
        self.fdofs = np.concatenate([self.cell_dofs[kp], self.cell_dofs[km]], axis=1)
        im = interior.astype(float)[:, None]
        self.fsign = np.concatenate([np.ones((nf, 6)), -im * np.ones((nf, 6))], axis=1)
        wp = np.where(interior, 0.5, 1.0)[:, None]
        self.favg = np.concatenate([wp * np.ones((nf, 6)), 0.5 * im * np.ones((nf, 6))], axis=1)
        self.boundary_udofs = self.V.facet_dofs[mesh.boundary_facets].ravel()

    def facet_normal_velocity(self, u: np.ndarray, facets: np.ndarray) -> np.ndarray:
        """``u.n_e`` at facet quadrature points (exact: Legendre expansion of the trace)."""
        return u[2 * facets, None] + u[2 * facets + 1, None] * self.facet_t[None, :]

    def cell_values(self, u: np.ndarray):
        """Velocity at cell quadrature points, cell gradients, strain rates and divergences."""
        uK = u[self.cell_dofs]
        uq = np.einsum("kqbi,kb->kqi", self.cell_vals, uK)
        G = np.einsum("kbij,kb->kij", self.cell_grads, uK)
        return uq, G, 0.5 * (G + G.transpose(0, 2, 1)), np.einsum("kb,kb->k", self.cell_div, uK)

    def strain_rate(self, u: np.ndarray) -> np.ndarray:
        return np.einsum("kbij,kb->kij", self.cell_D, u[self.cell_dofs])

    def divergence(self, u: np.ndarray) -> np.ndarray:
        return np.einsum("kb,kb->k", self.cell_div, u[self.cell_dofs])


@dataclass(frozen=True, eq=False)
class Problem:
    """Everything fixed during a run: discretization, parameters and data.

    ``boundary_velocity`` and ``body_force`` are callables ``f(x, t)`` taking
    points of shape (n, 2) and returning (n, 2). Gravity ``rho * params.gravity``
    is always added to the body force. Boundary sides listed in ``free_slip``
    carry only the strong ``u.n = 0`` condition.
    """

    disc: Discretization
    params: PhysParams
    a0: float = 10.0
    boundary_velocity: Callable | None = None
    body_force: Callable | None = None
    free_slip: tuple[str, ...] = ()
    convection: bool = True
    freeze_density: bool = False
    symmetrize_mean: bool = False
    project_multiplier: bool = True
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.a0 > 0:
            raise ValueError(f"a0 must be > 0, got {self.a0}")
        bad = set(self.free_slip) - set(BOUNDARY_TAGS[1:])
        if bad:
            raise ValueError(f"unknown boundary sides {sorted(bad)}")

    @property
    def nu_visc(self) -> float:
        return 2.0 * self.params.eta

    @property
    def penalty(self) -> float:
        p = self.params
        return self.a0 * (2.0 * p.eta + (p.gamma if p.tau_s > 0 else 0.0))

    @property
    def dirichlet_facets(self) -> np.ndarray:
        if "dir" not in self._cache:
            mesh = self.disc.mesh
            codes = [BOUNDARY_TAGS.index(s) for s in self.free_slip]
            b = mesh.boundary_facets
            self._cache["dir"] = b[~np.isin(mesh.facet_tags[b], codes)]
        return self._cache["dir"]

    @property
    def viscous_facets(self) -> np.ndarray:
        if "visc" not in self._cache:
            self._cache["visc"] = np.sort(np.concatenate(
                [self.disc.mesh.interior_facets, self.dirichlet_facets]))
        return self._cache["visc"]

    def g_at(self, x: np.ndarray, t: float) -> np.ndarray:
        if self.boundary_velocity is None:
            return np.zeros(x.shape[:-1] + (2,))
        out = np.asarray(self.boundary_velocity(x.reshape(-1, 2), t), dtype=float)
        return out.reshape(x.shape[:-1] + (2,))

    def boundary_moments(self, t: float) -> np.ndarray:
        """BDM1 dofs of the boundary data on every boundary facet (strong normal trace)."""
        d = self.disc
        b = d.mesh.boundary_facets
        g = self.g_at(d.facet_pts[b], t)
        flux = np.einsum("fqi,fi->fq", g, d.mesh.facet_normals[b])
        w, h = d.facet_w[b], d.mesh.facet_lengths[b]
        out = np.empty(2 * len(b))
        out[0::2] = (w * flux).sum(axis=1) / h
        out[1::2] = 3.0 * (w * flux * d.facet_t).sum(axis=1) / h
        return out


class _Triplets:
    def __init__(self):
        self.rows, self.cols, self.vals = [], [], []

    def add(self, rows, cols, vals):
        rows, cols, vals = np.asarray(rows), np.asarray(cols), np.asarray(vals)
        r, c = np.broadcast_arrays(rows[..., :, None], cols[..., None, :])
        v = np.broadcast_to(vals, r.shape)
        self.rows.append(r.ravel())
        self.cols.append(c.ravel())
        self.vals.append(np.asarray(v, dtype=float).ravel())

    def tocsc(self, n: int, drop_rows: np.ndarray | None = None) -> sp.csc_matrix:
        rows = np.concatenate(self.rows) if self.rows else np.empty(0, dtype=np.int64)
        cols = np.concatenate(self.cols) if self.cols else np.empty(0, dtype=np.int64)
        vals = np.concatenate(self.vals) if self.vals else np.empty(0)
        if drop_rows is not None and len(drop_rows):
            keep = ~np.isin(rows, drop_rows)
            rows = np.concatenate([rows[keep], drop_rows])
            cols = np.concatenate([cols[keep], drop_rows])
            vals = np.concatenate([vals[keep], np.ones(len(drop_rows))])
        return sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsc()


def _scatter(idx, vals, n):
    return np.bincount(np.ravel(idx), weights=np.ravel(vals), minlength=n)


# --- density transport ------------------------------------------------------

def assemble_c1h(disc: Discretization, u: np.ndarray, rho: np.ndarray, coo=None) -> np.ndarray:
    """Upwind transport ``c1h(u; rho, zeta)`` for every P0 test function.

    The volume term vanishes for P0 density; interior facets carry
    ``-(u.n)[rho]{zeta} + |u.n|/2 [rho][zeta]``.
    """
    f = disc.mesh.interior_facets
    kp, km = disc.kp[f], disc.km[f]
    w = disc.facet_w[f]
    un = disc.facet_normal_velocity(u, f)
    I0, I1 = (w * un).sum(1), (w * np.abs(un)).sum(1)
    jr = rho[kp] - rho[km]
    cp, cm = -0.5 * I0 + 0.5 * I1, -0.5 * I0 - 0.5 * I1
    r = _scatter(np.concatenate([kp, km]), np.concatenate([cp * jr, cm * jr]), disc.nc)
    if coo is not None:
        o = disc.offsets
        rows = np.stack([kp, km], 1)
        coo.add(rows, np.stack([kp, km], 1), np.stack([np.stack([cp, -cp], 1),
                                                        np.stack([cm, -cm], 1)], 1))
        t = disc.facet_t
        s = np.sign(un)
        dI0 = np.stack([w.sum(1), (w * t).sum(1)], 1)
        dI1 = np.stack([(w * s).sum(1), (w * s * t).sum(1)], 1)
        blk = np.stack([(-0.5 * dI0 + 0.5 * dI1) * jr[:, None],
                        (-0.5 * dI0 - 0.5 * dI1) * jr[:, None]], 1)
        coo.add(rows, o["u"] + np.stack([2 * f, 2 * f + 1], 1), blk)
    return r


def upwind_seminorm_rho(disc: Discretization, u: np.ndarray, psi: np.ndarray) -> float:
    """``|psi|^2_upw = 1/2 sum_e int |u.n| [psi]^2`` over interior facets."""
    f = disc.mesh.interior_facets
    un = disc.facet_normal_velocity(u, f)
    jp = psi[disc.kp[f]] - psi[disc.km[f]]
    return float(0.5 * np.sum((disc.facet_w[f] * np.abs(un)).sum(1) * jp ** 2))


# --- viscous forms -----------------------------------------------------------

def _viscous_facets(problem: Problem, u, S, Du, t, coo=None):
    """SIP facet terms with consistency stress ``S`` (per cell) on interior and
    Dirichlet facets. Jacobian entries assume ``S = nu Du + z``."""
    d, prm = problem.disc, problem.params
    E = problem.viscous_facets
    if len(E) == 0:
        return np.zeros(d.nu)
    interior = d.is_interior[E]
    kp, km = d.kp[E], d.km[E]
    n = d.mesh.facet_normals[E]
    h = d.mesh.facet_lengths[E]
    w = d.facet_w[E]
    fd = d.fdofs[E]
    s, wa = d.fsign[E], d.favg[E]
    jv = d.fvals[E] * s[:, None, :, None]
    ujump = np.einsum("eqbi,eb->eqi", jv, u[fd])
    bnd = ~interior
    if np.any(bnd):
        ujump[bnd] -= problem.g_at(d.facet_pts[E[bnd]], t)
    Jint = np.einsum("eq,eqai->eai", w, jv)
    U = np.einsum("eq,eqi->ei", w, ujump)
    wp, wm = wa[:, 0], wa[:, 6]
    Sn = np.einsum("eij,ej->ei", wp[:, None, None] * S[kp] + wm[:, None, None] * S[km], n)
    aDn = np.einsum("eaij,ej->eai", d.fD[E], n) * wa[:, :, None]

    imask = interior[:, None, None].astype(float)
    jDu = Du[kp] - imask * Du[km]
    jD = d.fD[E] * s[:, :, None, None]
    dmu = None
    if prm.tau_s == 0.0:
        mu = np.full(len(E), 2.0 * prm.eta)
    elif not problem.symmetrize_mean:
        mu = viscosity_mu(huber_norm(jDu, prm), prm)
        nrm = tensor_norm(jDu, prm)
        act = (prm.gamma * nrm >= prm.tau_s) & (nrm > JUMP_TOL)
        if coo is not None:
            safe = np.where(act, nrm, 1.0)
            dmu = np.where(act[:, None], -prm.tau_s * prm.kappa ** 2
                           * np.einsum("eij,ebij->eb", jDu, jD) / safe[:, None] ** 3, 0.0)
    else:
        tp, tm = huber_norm(Du[kp], prm), huber_norm(Du[km], prm)
        tbar = wp * tp + wm * tm
        mu = viscosity_mu(tbar, prm)
        if coo is not None:
            side_D = np.concatenate([np.repeat(Du[kp][:, None], 6, 1),
                                     np.repeat(Du[km][:, None], 6, 1)], 1)
            nrm = tensor_norm(side_D, prm)
            act = (prm.gamma * nrm >= prm.tau_s) & (nrm > 0)
            safe = np.where(act, nrm, 1.0)
            dt_ = np.where(act, wa * prm.gamma * prm.kappa ** 2
                           * np.einsum("ebij,ebij->eb", side_D, d.fD[E]) / safe, 0.0)
            dmu = -prm.tau_s * prm.gamma / tbar[:, None] ** 2 * dt_

    pen = problem.penalty / h
    JM = np.einsum("eq,eqai,eqbi->eab", w, jv, jv)
    r_loc = (-np.einsum("ei,eai->ea", Sn, Jint)
             - mu[:, None] * np.einsum("eai,ei->ea", aDn, U)
             + pen[:, None] * np.einsum("eq,eqi,eqai->ea", w, ujump, jv))
    r = _scatter(fd, r_loc, d.nu)
    if coo is not None:
        o = d.offsets
        nu = problem.nu_visc
        K = (-nu * np.einsum("ebi,eai->eab", aDn, Jint)
             - mu[:, None, None] * np.einsum("eai,ebi->eab", aDn, Jint)
             + pen[:, None, None] * JM)
        if dmu is not None:
            K -= np.einsum("ea,eb->eab", np.einsum("eai,ei->ea", aDn, U), dmu)
        coo.add(o["u"] + fd, o["u"] + fd, K)
        # d/dz: -(w_side E_c n) . Jint_a for component c = (i, j)
        for side, k, ws in ((0, kp, wp), (1, km, wm)):
            if side == 1 and not np.any(interior):
                continue
            Zb = -ws[:, None, None, None] * Jint[:, :, :, None] * n[:, None, None, :]
            coo.add(o["u"] + fd, o["z"] + 4 * k[:, None] + np.arange(4), Zb.reshape(len(E), 12, 4))
    return r


def assemble_a2h(problem: Problem, u: np.ndarray, t: float = 0.0) -> np.ndarray:
    """Viscous SIP form ``a2h(u, v)`` with the regularized stress, for all test functions."""
    d = problem.disc
    Du = d.strain_rate(u)
    S = regularized_stress(Du, problem.params)
    r = _scatter(d.cell_dofs, d.areas[:, None] * np.einsum("kij,kbij->kb", S, d.cell_D), d.nu)
    return r + _viscous_facets(problem, u, S, Du, t)


def assemble_a2h_tilde(problem: Problem, z: np.ndarray, u: np.ndarray, t: float = 0.0,
                       coo=None) -> np.ndarray:
    """Multiplier form: ``(nu Du + z) : Dv`` in cells plus SIP facet terms."""
    d = problem.disc
    Du = d.strain_rate(u)
    S = problem.nu_visc * Du + z.reshape(-1, 2, 2)
    r = _scatter(d.cell_dofs, d.areas[:, None] * np.einsum("kij,kbij->kb", S, d.cell_D), d.nu)
    if coo is not None:
        o = d.offsets
        A = problem.nu_visc * d.areas[:, None, None] * np.einsum("kaij,kbij->kab", d.cell_D, d.cell_D)
        coo.add(o["u"] + d.cell_dofs, o["u"] + d.cell_dofs, A)
        coo.add(o["u"] + d.cell_dofs, o["z"] + 4 * np.arange(d.nc)[:, None] + np.arange(4),
                d.areas[:, None, None] * d.cell_D.reshape(d.nc, 6, 4))
    return r + _viscous_facets(problem, u, S, Du, t, coo)


def assemble_nitsche_bc(problem: Problem, u: np.ndarray, t: float = 0.0) -> np.ndarray:
    """Dirichlet boundary contributions of the SIP form (``[u] = u - g`` on the boundary)."""
    sub = Problem(problem.disc, problem.params, problem.a0, problem.boundary_velocity,
                  problem.body_force, problem.free_slip, problem.convection,
                  problem.freeze_density, problem.symmetrize_mean)
    sub._cache["visc"] = problem.dirichlet_facets
    d = problem.disc
    Du = d.strain_rate(u)
    return _viscous_facets(sub, u, regularized_stress(Du, problem.params), Du, t)


# --- momentum convection -----------------------------------------------------

def assemble_c2h(problem: Problem, rho: np.ndarray, u: np.ndarray, t: float = 0.0,
                 coo=None, w: np.ndarray | None = None) -> np.ndarray:
    """Skew-symmetric upwind convection ``c2h(rho w; u, v)``.

    The transporting field ``w`` defaults to ``u`` (the nonlinear case used by
    the solver); the Jacobian is only available in that case. Interior facets
    use the flux ``F = {rho} w.n`` and carry the facet part of ``div(rho w)``.
    Dirichlet facets use the inflow term ``(|F| - F)/2 (u - g).v``.
    """
    d = problem.disc
    nonlinear = w is None
    w = u if nonlinear else w
    uK = u[d.cell_dofs]
    uq = np.einsum("kqbi,kb->kqi", d.cell_vals, uK)
    G = np.einsum("kbij,kb->kij", d.cell_grads, uK)
    wq = np.einsum("kqbi,kb->kqi", d.cell_vals, w[d.cell_dofs])
    dw = d.divergence(w)
    Cq = np.einsum("kij,kqj->kqi", G, wq) + 0.5 * dw[:, None, None] * uq
    loc = np.einsum("kq,kqi,kqai->ka", d.cell_w, Cq, d.cell_vals)
    r = _scatter(d.cell_dofs, rho[:, None] * loc, d.nu)
    o = d.offsets
    if coo is not None:
        assert nonlinear
        cw, cv = d.cell_w, d.cell_vals
        A = (np.einsum("kq,kbij,kqj,kqai->kab", cw, d.cell_grads, uq, cv)
             + np.einsum("kq,kij,kqbj,kqai->kab", cw, G, cv, cv)
             + 0.5 * np.einsum("kq,kb,kqi,kqai->kab", cw, d.cell_div, uq, cv)
             + 0.5 * dw[:, None, None] * d.cell_mass)
        coo.add(o["u"] + d.cell_dofs, o["u"] + d.cell_dofs, rho[:, None, None] * A)
        coo.add(o["u"] + d.cell_dofs, np.arange(d.nc)[:, None], loc[:, :, None])

    # interior facets
    f = d.mesh.interior_facets
    if len(f):
        kp, km = d.kp[f], d.km[f]
        fw, fd, s, wa = d.facet_w[f], d.fdofs[f], d.fsign[f], d.favg[f]
        V = d.fvals[f]
        wn = d.facet_normal_velocity(w, f)
        rbar, jr = 0.5 * (rho[kp] + rho[km]), rho[kp] - rho[km]
        F = rbar[:, None] * wn
        sides = np.einsum("eqbi,eb->eqbi", V, u[fd])
        up, um = sides[:, :, :6].sum(2), sides[:, :, 6:].sum(2)
        uj = up - um
        aV, jV = V * wa[:, None, :, None], V * s[:, None, :, None]
        uside = np.concatenate([np.repeat(up[:, :, None], 6, 2), np.repeat(um[:, :, None], 6, 2)], 2)
        ujA, ujJ = np.einsum("eqi,eqai->eqa", uj, aV), np.einsum("eqi,eqai->eqa", uj, jV)
        usA = np.einsum("eqai,eqai->eqa", uside, aV)
        integrand = -F[:, :, None] * ujA + 0.5 * np.abs(F)[:, :, None] * ujJ \
            - 0.5 * (wn * jr[:, None])[:, :, None] * usA
        r += _scatter(fd, np.einsum("eq,eqa->ea", fw, integrand), d.nu)
        if coo is not None:
            same = np.zeros((12, 12))
            same[:6, :6] = same[6:, 6:] = 1.0
            K = (np.einsum("eq,eqbi,eqai->eab", -fw * F, jV, aV)
                 + np.einsum("eq,eqbi,eqai->eab", 0.5 * fw * np.abs(F), jV, jV)
                 - same * np.einsum("eq,eqbi,eqai->eab", 0.5 * fw * wn * jr[:, None], V, aV))
            coo.add(o["u"] + fd, o["u"] + fd, K)
            sF = np.sign(F)
            base = (-rbar[:, None, None] * ujA + 0.5 * (sF * rbar[:, None])[:, :, None] * ujJ
                    - 0.5 * jr[:, None, None] * usA)
            tk = np.stack([np.ones_like(d.facet_t), d.facet_t], 1)
            coo.add(o["u"] + fd, o["u"] + np.stack([2 * f, 2 * f + 1], 1),
                    np.einsum("eq,qk,eqa->eak", fw, tk, base))
            common = -0.5 * wn[:, :, None] * ujA + 0.25 * (sF * wn)[:, :, None] * ujJ
            dp = np.einsum("eq,eqa->ea", fw, common - 0.5 * wn[:, :, None] * usA)
            dm = np.einsum("eq,eqa->ea", fw, common + 0.5 * wn[:, :, None] * usA)
            coo.add(o["u"] + fd, np.stack([kp, km], 1), np.stack([dp, dm], 2))

    # Dirichlet boundary inflow
    b = problem.dirichlet_facets
    if len(b):
        kp = d.kp[b]
        fw, fd = d.facet_w[b], d.fdofs[b][:, :6]
        V = d.fvals[b][:, :, :6]
        wn = d.facet_normal_velocity(w, b)
        F = rho[kp][:, None] * wn
        diff = np.einsum("eqbi,eb->eqi", V, u[fd]) - problem.g_at(d.facet_pts[b], t)
        coef = 0.5 * (np.abs(F) - F)
        dv = np.einsum("eqi,eqai->eqa", diff, V)
        r += _scatter(fd, np.einsum("eq,eqa->ea", fw * coef, dv), d.nu)
        if coo is not None:
            coo.add(o["u"] + fd, o["u"] + fd, np.einsum("eq,eqbi,eqai->eab", fw * coef, V, V))
            dcoef = 0.5 * (np.sign(F) - 1.0)
            tk = np.stack([np.ones_like(d.facet_t), d.facet_t], 1)
            coo.add(o["u"] + fd, o["u"] + np.stack([2 * b, 2 * b + 1], 1),
                    np.einsum("eq,qk,eqa->eak", fw * dcoef * rho[kp][:, None], tk, dv))
            coo.add(o["u"] + fd, kp[:, None],
                    np.einsum("eq,eqa->ea", fw * dcoef * wn, dv)[:, :, None])
    return r


def upwind_seminorm_u(problem: Problem, rho: np.ndarray, w: np.ndarray, v: np.ndarray) -> float:
    """``|v|^2_{rho w, upw} = 1/2 sum_e int |F| |[v]|^2`` over interior and Dirichlet facets."""
    d = problem.disc
    total = 0.0
    f = d.mesh.interior_facets
    F = 0.5 * (rho[d.kp[f]] + rho[d.km[f]])[:, None] * d.facet_normal_velocity(w, f)
    jv = np.einsum("eqbi,eb->eqi", d.fvals[f] * d.fsign[f][:, None, :, None], v[d.fdofs[f]])
    total += 0.5 * np.sum(d.facet_w[f] * np.abs(F) * np.einsum("eqi,eqi->eq", jv, jv))
    b = problem.dirichlet_facets
    F = rho[d.kp[b]][:, None] * d.facet_normal_velocity(w, b)
    vb = np.einsum("eqbi,eb->eqi", d.fvals[b][:, :, :6], v[d.fdofs[b][:, :6]])
    total += 0.5 * np.sum(d.facet_w[b] * np.abs(F) * np.einsum("eqi,eqi->eq", vb, vb))
    return float(total)


# --- coupling and multiplier -------------------------------------------------

def divergence_matrix(disc: Discretization) -> sp.csr_matrix:
    """``B[K, j] = -|K| div(phi_j)|_K`` so that ``b(v, q) = q . B v``."""
    rows = np.repeat(np.arange(disc.nc), 6)
    vals = -(disc.areas[:, None] * disc.cell_div).ravel()
    return sp.coo_matrix((vals, (rows, disc.cell_dofs.ravel())),
                         shape=(disc.nc, disc.nu)).tocsr()


def assemble_b(disc: Discretization, v: np.ndarray, q: np.ndarray) -> float:
    """``b(v, q) = -sum_K int_K q div v`` (exact for BDM1 x P0)."""
    return float(q @ (divergence_matrix(disc) @ v))


def assemble_z_residual(problem: Problem, u: np.ndarray, z: np.ndarray, coo=None) -> np.ndarray:
    """``|K| (gamma tau_s Du - |Du|_gamma z)`` per cell, four components each.

    With ``tau_s = 0`` the row reduces to ``|K| z`` so that ``z = 0``. When
    ``problem.project_multiplier`` is set, the Jacobian uses the projection
    ``tau_s z / max(tau_s, |z|)`` in place of ``z``; both agree wherever
    ``|z| <= tau_s``, in particular at every solution.
    """
    d, prm = problem.disc, problem.params
    zc = z.reshape(-1, 4)
    A = d.areas[:, None]
    rows = d.offsets["z"] + 4 * np.arange(d.nc)[:, None] + np.arange(4)
    if prm.tau_s == 0.0:
        if coo is not None:
            coo.add(rows, rows, np.eye(4)[None] * A[:, :, None])
        return (A * zc).ravel()
    Du = d.strain_rate(u)
    t = huber_norm(Du, prm)
    r = A * (prm.gamma * prm.tau_s * Du.reshape(-1, 4) - t[:, None] * zc)
    if coo is not None:
        nrm = tensor_norm(Du, prm)
        act = (prm.gamma * nrm >= prm.tau_s) & (nrm > 0)
        safe = np.where(act, nrm, 1.0)
        dt_ = np.where(act[:, None], prm.gamma * prm.kappa ** 2
                       * np.einsum("kij,kbij->kb", Du, d.cell_D) / safe[:, None], 0.0)
        zj = zc
        if problem.project_multiplier:
            zn = tensor_norm(zc.reshape(-1, 2, 2), prm)
            zj = zc * (prm.tau_s / np.maximum(prm.tau_s, zn))[:, None]
        Ju = prm.gamma * prm.tau_s * d.cell_D.reshape(d.nc, 6, 4).transpose(0, 2, 1) \
            - zj[:, :, None] * dt_[:, None, :]
        coo.add(rows, d.offsets["u"] + d.cell_dofs, A[:, :, None] * Ju)
        coo.add(rows, rows, -np.eye(4)[None] * (A * t[:, None])[:, :, None])
    return r.ravel()


# --- full system -------------------------------------------------------------

def pack(state: FieldState) -> np.ndarray:
    return np.concatenate([state.rho, state.u, state.p, state.z, [state.lam]])


def unpack(disc: Discretization, x: np.ndarray, time: float = 0.0) -> FieldState:
    o = disc.offsets
    return FieldState(x[:o["u"]], x[o["u"]:o["p"]], x[o["p"]:o["z"]], x[o["z"]:o["lam"]],
                      time, float(x[o["lam"]]))


def _check_density(rho, guard):
    if np.any(rho <= guard):
        k = int(np.argmin(rho))
        raise DensityPositivityError(
            f"density {rho[k]:.6g} in cell {k} is below the positivity guard {guard:g}")


def assemble_residual(problem: Problem, x: np.ndarray, history, dt: float, scheme: str,
                      t: float, jacobian: bool = False):
    """Stacked residual at iterate ``x``; with ``jacobian=True`` also the SSN Jacobian.

    ``history`` lists previous states, most recent first (one entry for BE or
    steady runs, two for BDF2). Returns ``r`` or ``(r, J)``.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    d, prm = problem.disc, problem.params
    o = d.offsets
    c0, c1, c2 = SCHEMES[scheme]
    if scheme == "BDF2" and len(history) < 2:
        raise ValueError("BDF2 needs two previous states")
    cur = unpack(d, x, t)
    rho, u, p, z = cur.rho, cur.u, cur.p, cur.z
    old = list(history) + [history[-1]] * 2
    coo = _Triplets() if jacobian else None
    nc = d.nc
    cells = np.arange(nc)

    # density rows
    if problem.freeze_density or scheme == "steady":
        r_rho = rho - old[0].rho
        if coo is not None:
            coo.add(cells[:, None], cells[:, None], np.ones((nc, 1, 1)))
    else:
        _check_density(rho, prm.rho_min_guard)
        r_rho = d.areas / dt * (c0 * rho + c1 * old[0].rho + c2 * old[1].rho)
        if coo is not None:
            coo.add(cells[:, None], cells[:, None], (c0 / dt * d.areas)[:, None, None])
        r_rho += assemble_c1h(d, u, rho, coo)

    # momentum rows
    r_u = np.zeros(d.nu)
    cd = d.cell_dofs
    if c0 != 0.0:
        _check_density(rho, prm.rho_min_guard)
        sig = np.sqrt(rho)
        sn, snm = np.sqrt(np.maximum(old[0].rho, 0)), np.sqrt(np.maximum(old[1].rho, 0))
        Mu = np.einsum("kab,kb->ka", d.cell_mass, u[cd])
        Mo = (c1 * sn[:, None] * np.einsum("kab,kb->ka", d.cell_mass, old[0].u[cd])
              + c2 * snm[:, None] * np.einsum("kab,kb->ka", d.cell_mass, old[1].u[cd]))
        r_u += _scatter(cd, sig[:, None] * (c0 * sig[:, None] * Mu + Mo) / dt, d.nu)
        if coo is not None:
            coo.add(o["u"] + cd, o["u"] + cd, (c0 * rho / dt)[:, None, None] * d.cell_mass)
            coo.add(o["u"] + cd, cells[:, None],
                    ((c0 * Mu + Mo / (2 * sig[:, None])) / dt)[:, :, None])
    r_u += assemble_a2h_tilde(problem, z, u, t, coo)
    if problem.convection:
        r_u += assemble_c2h(problem, rho, u, t, coo)
    gvec = np.asarray(prm.gravity)
    gI = np.einsum("kai,i->ka", d.cell_int, gvec)
    force = -rho[:, None] * gI
    if problem.body_force is not None:
        fq = np.asarray(problem.body_force(d.cell_pts.reshape(-1, 2), t)).reshape(nc, -1, 2)
        force -= np.einsum("kq,kqi,kqai->ka", d.cell_w, fq, d.cell_vals)
    r_u += _scatter(cd, force, d.nu)
    if coo is not None and np.any(gvec != 0):
        coo.add(o["u"] + cd, cells[:, None], -gI[:, :, None])
    B = divergence_matrix(d)
    r_u += B.T @ p
    if coo is not None:
        Bl = -(d.areas[:, None] * d.cell_div)
        coo.add(o["u"] + cd, o["p"] + cells[:, None], Bl[:, :, None])
        coo.add(o["p"] + cells[:, None], o["u"] + cd, Bl[:, None, :])
        coo.add(o["p"] + cells[:, None], np.array([[o["lam"]]]), d.areas[:, None, None])
        coo.add(np.array([[o["lam"]]]), o["p"] + cells[None, :], d.areas[None, None, :])

    bd = d.boundary_udofs
    r_u[bd] = u[bd] - problem.boundary_moments(t)

    r_p = B @ u + d.areas * cur.lam
    r_z = assemble_z_residual(problem, u, z, coo)
    r_l = np.array([d.areas @ p])
    r = np.concatenate([r_rho, r_u, r_p, r_z, r_l])
    if coo is None:
        return r
    return r, coo.tocsc(d.size, drop_rows=o["u"] + bd)


def assemble_ssn_jacobian(problem: Problem, x: np.ndarray, history, dt: float, scheme: str,
                          t: float) -> SparseSystem:
    r, J = assemble_residual(problem, x, history, dt, scheme, t, jacobian=True)
    return SparseSystem(J, -r, dict(problem.disc.offsets))
