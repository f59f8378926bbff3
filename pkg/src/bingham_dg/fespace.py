"""Discrete spaces on triangles: BDM1 velocity, P0 scalars and P0 tensors.

BDM1 degrees of freedom are the Legendre coefficients of the normal trace on
each facet: for a field ``v`` and facet ``e`` with unit normal ``n_e`` and
edge parameter ``t`` in ``[-1, 1]`` (running from the lower to the higher
global vertex index),

    dof_0(v) = (1/h_e) * int_e v.n_e ds
    dof_1(v) = (3/h_e) * int_e v.n_e t ds

so that ``v.n_e = dof_0 + dof_1 * t`` whenever the normal trace is linear.
Physical basis functions are contravariant Piola images of a reference basis
dual to the flux moments on the reference triangle (0,0), (1,0), (0,1).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .mesh import Mesh

KINDS = ("velocity_bdm1", "scalar_p0", "tensor_p0")

# reference edge k is opposite local vertex k; endpoints ordered low -> high
REF_VERTICES = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
REF_EDGES = ((1, 2), (0, 2), (0, 1))


@dataclass(frozen=True)
class Quadrature:
    """Reference rules: triangle points in barycentric form, facet points on [0, 1]."""

    cell_points: np.ndarray
    cell_weights: np.ndarray
    facet_points: np.ndarray
    facet_weights: np.ndarray
    degree: int

    @property
    def cell_points_ref(self) -> np.ndarray:
        return self.cell_points @ REF_VERTICES


def make_quadrature(degree: int = 4) -> Quadrature:
    if degree <= 1:
        bary = np.array([[1 / 3, 1 / 3, 1 / 3]])
        w = np.array([1.0])
    elif degree == 2:
        bary = np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]])
        w = np.full(3, 1 / 3)
    elif degree <= 4:
        a, b = 0.44594849091596488632, 0.09157621350977074346
        bary = np.array([[1 - 2 * a, a, a], [a, 1 - 2 * a, a], [a, a, 1 - 2 * a],
                         [1 - 2 * b, b, b], [b, 1 - 2 * b, b], [b, b, 1 - 2 * b]])
        w = np.array([0.22338158967801146570] * 3 + [0.10995174365532186764] * 3)
    else:
        raise ValueError(f"cell quadrature of degree {degree} not available (max 4)")
    npts = max(1, int(np.ceil((degree + 1) / 2)))
    s, sw = np.polynomial.legendre.leggauss(npts)
    return Quadrature(cell_points=bary, cell_weights=0.5 * w,
                      facet_points=0.5 * (s + 1.0), facet_weights=0.5 * sw, degree=degree)


def _ref_normals():
    normals, lengths = [], []
    for a, b in REF_EDGES:
        t = REF_VERTICES[b] - REF_VERTICES[a]
        L = np.hypot(*t)
        n = np.array([t[1], -t[0]]) / L
        opposite = REF_VERTICES[3 - a - b]
        if n @ (REF_VERTICES[a] - opposite) < 0:
            n = -n
        normals.append(n)
        lengths.append(L)
    return np.array(normals), np.array(lengths)


REF_NORMALS, REF_LENGTHS = _ref_normals()


def _monomials(xh: np.ndarray) -> np.ndarray:
    """P1 vector monomials at reference points; shape (npts, 6, 2)."""
    x, y = xh[..., 0], xh[..., 1]
    one, zero = np.ones_like(x), np.zeros_like(x)
    comps = [(one, zero), (x, zero), (y, zero), (zero, one), (zero, x), (zero, y)]
    return np.stack([np.stack(c, axis=-1) for c in comps], axis=-2)


def _reference_bdm1():
    s, w = np.polynomial.legendre.leggauss(3)
    dofs = np.zeros((6, 6))
    for k, (a, b) in enumerate(REF_EDGES):
        pts = REF_VERTICES[a] + 0.5 * (s[:, None] + 1) * (REF_VERTICES[b] - REF_VERTICES[a])
        flux = _monomials(pts) @ REF_NORMALS[k]
        ds = 0.5 * REF_LENGTHS[k] * w
        dofs[2 * k] = ds @ flux
        dofs[2 * k + 1] = 3.0 * (ds * s) @ flux
    # columns of the inverse give monomial coefficients of the dual basis
    return np.linalg.inv(dofs)


_REF_COEFFS = _reference_bdm1()


def reference_bdm1(xh: np.ndarray):
    """Reference BDM1 basis at points ``xh`` (..., 2).

    Returns values (..., 6, 2), gradients (6, 2, 2) and divergences (6,).
    """
    xh = np.atleast_2d(xh)
    values = np.einsum("...mi,mb->...bi", _monomials(xh), _REF_COEFFS)
    c = _REF_COEFFS
    grads = np.zeros((6, 2, 2))
    grads[:, 0, 0], grads[:, 0, 1] = c[1], c[2]
    grads[:, 1, 0], grads[:, 1, 1] = c[4], c[5]
    return values, grads, grads[:, 0, 0] + grads[:, 1, 1]


@dataclass(frozen=True, eq=False)
class FESpace:
    """Degree-of-freedom layout of one discrete space on a mesh."""

    kind: str
    mesh: Mesh
    num_dofs: int
    cell_dofs: np.ndarray
    facet_dofs: np.ndarray | None = None
    # BDM1 only: local-to-global factor h_e * sign_n * sign_t**k per (cell, local dof)
    cell_factors: np.ndarray | None = None

    @cached_property
    def jacobians(self) -> np.ndarray:
        p = self.mesh.vertices[self.mesh.cells]
        return np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=-1)

    @cached_property
    def dets(self) -> np.ndarray:
        J = self.jacobians
        return J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]

    def to_reference(self, cell: int, x: np.ndarray) -> np.ndarray:
        x0 = self.mesh.vertices[self.mesh.cells[cell, 0]]
        return np.linalg.solve(self.jacobians[cell], (np.atleast_2d(x) - x0).T).T

    def to_reference_many(self, cells: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Map physical points (ncell, npts, 2) of ``cells`` to reference coordinates."""
        x0 = self.mesh.vertices[self.mesh.cells[cells, 0]]
        Jinv = np.linalg.inv(self.jacobians[cells])
        return np.einsum("kij,kpj->kpi", Jinv, x - x0[:, None, :])

    def boundary_dofs(self) -> np.ndarray:
        if self.kind != "velocity_bdm1":
            return np.empty(0, dtype=np.int64)
        return self.facet_dofs[self.mesh.boundary_facets].ravel()


def build_space(mesh: Mesh, kind: str) -> FESpace:
    if kind not in KINDS:
        raise ValueError(f"unknown space kind {kind!r}; expected one of {KINDS}")
    nc = mesh.num_cells
    if kind == "scalar_p0":
        return FESpace(kind, mesh, nc, np.arange(nc)[:, None])
    if kind == "tensor_p0":
        return FESpace(kind, mesh, 4 * nc, np.arange(4 * nc).reshape(nc, 4))

    facet_dofs = np.arange(2 * mesh.num_facets).reshape(-1, 2)
    cf = mesh.cell_facets
    cell_dofs = np.empty((nc, 6), dtype=np.int64)
    cell_dofs[:, 0::2] = facet_dofs[cf, 0]
    cell_dofs[:, 1::2] = facet_dofs[cf, 1]

    sign_n = np.where(mesh.facet_cells[cf, 0] == np.arange(nc)[:, None], 1.0, -1.0)
    lo = np.array([e[0] for e in REF_EDGES])
    hi = np.array([e[1] for e in REF_EDGES])
    sign_t = np.where(mesh.cells[:, lo] < mesh.cells[:, hi], 1.0, -1.0)
    h = mesh.facet_lengths[cf]
    factors = np.empty((nc, 6))
    factors[:, 0::2] = h * sign_n
    factors[:, 1::2] = h * sign_n * sign_t
    return FESpace(kind, mesh, 2 * mesh.num_facets, cell_dofs, facet_dofs, factors)


def _check_reference_point(xh: np.ndarray, tol: float = 1e-12):
    xh = np.atleast_2d(xh)
    if np.any(xh < -tol) or np.any(xh.sum(axis=1) > 1 + tol):
        raise ValueError(f"point(s) {xh.tolist()} lie outside the reference triangle")


def bdm1_cell_basis(space: FESpace, cells: np.ndarray, xh: np.ndarray):
    """Physical BDM1 basis on ``cells`` at reference points ``xh``.

    ``xh`` is either shared, shape (npts, 2), or per cell, (ncell, npts, 2).
    Returns values (ncell, npts, 6, 2), gradients (ncell, 6, 2, 2) and
    divergences (ncell, 6). Values follow v = J v_hat / det J; gradients
    grad v = J grad_hat v_hat J^{-1} / det J.
    """
    cells = np.asarray(cells)
    vals_h, grads_h, div_h = reference_bdm1(xh)
    J = space.jacobians[cells]
    det = space.dets[cells]
    Jinv = np.linalg.inv(J)
    fac = space.cell_factors[cells] / det[:, None]
    if vals_h.ndim == 3:
        values = np.einsum("kij,pbj,kb->kpbi", J, vals_h, fac)
    else:
        values = np.einsum("kij,kpbj,kb->kpbi", J, vals_h, fac)
    grads = np.einsum("kij,bjl,klm,kb->kbim", J, grads_h, Jinv, fac)
    divs = div_h[None, :] * fac
    return values, grads, divs


def eval_basis(space: FESpace, cell: int, ref_point):
    """Basis values and gradients at one reference point of one cell.

    Returns a list with one ``(value, gradient)`` pair per local dof, in
    physical coordinates.
    """
    xh = np.asarray(ref_point, dtype=float).reshape(1, 2)
    _check_reference_point(xh)
    if space.kind == "scalar_p0":
        return [(1.0, np.zeros(2))]
    if space.kind == "tensor_p0":
        out = []
        for c in range(4):
            e = np.zeros((2, 2))
            e.flat[c] = 1.0
            out.append((e, np.zeros((2, 2, 2))))
        return out
    values, grads, _ = bdm1_cell_basis(space, np.array([cell]), xh)
    return [(values[0, 0, b].copy(), grads[0, b].copy()) for b in range(6)]


def evaluate_velocity(space: FESpace, coeffs: np.ndarray, cells: np.ndarray, xh: np.ndarray):
    """Velocity values (ncell, npts, 2) and gradients (ncell, 2, 2) at reference points."""
    values, grads, _ = bdm1_cell_basis(space, cells, xh)
    c = coeffs[space.cell_dofs[cells]]
    return np.einsum("kb,kpbi->kpi", c, values), np.einsum("kb,kbij->kij", c, grads)


def facet_points(mesh: Mesh, quad: Quadrature):
    """Physical facet quadrature points (nf, nq, 2), edge parameter t (nq,), weights (nf, nq)."""
    a = mesh.vertices[mesh.facet_vertices[:, 0]]
    b = mesh.vertices[mesh.facet_vertices[:, 1]]
    s = quad.facet_points
    pts = a[:, None, :] + s[None, :, None] * (b - a)[:, None, :]
    return pts, 2.0 * s - 1.0, mesh.facet_lengths[:, None] * quad.facet_weights[None, :]


def interpolate(space: FESpace, f, quad: Quadrature | None = None) -> np.ndarray:
    """Interpolate a pointwise function ``f(x) -> values`` (x has shape (n, 2)).

    P0 spaces take quadrature cell averages; BDM1 takes the facet moments of
    the normal trace.
    """
    quad = quad or make_quadrature(4)
    mesh = space.mesh
    if space.kind == "velocity_bdm1":
        pts, t, w = facet_points(mesh, quad)
        nf, nq = w.shape
        vals = np.asarray(f(pts.reshape(-1, 2)), dtype=float).reshape(nf, nq, 2)
        flux = np.einsum("fqi,fi->fq", vals, mesh.facet_normals)
        out = np.empty(space.num_dofs)
        h = mesh.facet_lengths
        out[space.facet_dofs[:, 0]] = (w * flux).sum(axis=1) / h
        out[space.facet_dofs[:, 1]] = 3.0 * (w * flux * t).sum(axis=1) / h
        return out
    pts = np.einsum("qa,kai->kqi", quad.cell_points, mesh.vertices[mesh.cells])
    nc, nq = pts.shape[:2]
    wts = 2.0 * quad.cell_weights  # barycentric weights summing to 1
    if space.kind == "scalar_p0":
        vals = np.asarray(f(pts.reshape(-1, 2)), dtype=float).reshape(nc, nq)
        return vals @ wts
    vals = np.asarray(f(pts.reshape(-1, 2)), dtype=float).reshape(nc, nq, 4)
    return np.einsum("kqc,q->kc", vals, wts).ravel()
