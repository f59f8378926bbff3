"""Semismooth Newton driver with a sparse direct linear solver."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .forms import (BLOCKS, FieldState, Problem, SparseSystem, assemble_residual, pack,
                    unpack)
from .huber import classify_active

PIVOT_TOL = 1e-14
LINEAR_TOL = 1e-10


class LinearSolveError(RuntimeError):
    """Singular or inaccurate factorization; ``block`` names the offending unknowns."""

    def __init__(self, message: str, block: str | None = None, index: int | None = None):
        super().__init__(message)
        self.block = block
        self.index = index


class SSNError(RuntimeError):
    """Unrecoverable failure inside a Newton iteration; carries the iterate."""

    def __init__(self, message: str, iterate: np.ndarray | None = None,
                 report: "SSNReport | None" = None):
        super().__init__(message)
        self.iterate = iterate
        self.report = report


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-5
    max_iter: int = 50
    damping: float = 1.0
    condense: bool = True
    clamp_density: bool = False

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError(f"ssn tolerance must be > 0, got {self.tol}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")
        if not 0 < self.damping <= 1:
            raise ValueError(f"damping must lie in (0, 1], got {self.damping}")


@dataclass
class SSNReport:
    iterations: int = 0
    residual_history: list = field(default_factory=list)
    converged: bool = False
    active_fraction_history: list = field(default_factory=list)
    linear_residuals: list = field(default_factory=list)

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "abs_res", "rel_res", "active_fraction"])
            for k, ((a, r), f) in enumerate(zip(self.residual_history,
                                                self.active_fraction_history)):
                w.writerow([k, f"{a:.17g}", f"{r:.17g}", f"{f:.17g}"])
        return path


def _block_name(offsets: dict, index: int) -> str:
    name = BLOCKS[0]
    for b in BLOCKS:
        if b in offsets and index >= offsets[b]:
            name = b
    return name


def _factorize(A: sp.csc_matrix, offsets: dict, index_map=None):
    def fail(msg, col):
        idx = int(col if index_map is None else index_map[col])
        blk = _block_name(offsets, idx)
        raise LinearSolveError(f"{msg}: offending block '{blk}' (unknown {idx})", blk, idx)

    if not np.all(np.isfinite(A.data)):
        bad = np.flatnonzero(~np.isfinite(A.data))[0]
        fail("non-finite matrix entry", np.searchsorted(A.indptr, bad, side="right") - 1)
    try:
        lu = spla.splu(A, permc_spec="COLAMD")
    except RuntimeError as exc:
        # SuperLU reports "Factor is exactly singular" without an index
        diag = np.abs(A.diagonal())
        fail(f"factorization failed ({exc})", int(np.argmin(diag)))
    d = np.abs(lu.U.diagonal())
    scale = max(d.max(), 1.0e-300)
    if d.min() <= PIVOT_TOL * scale:
        fail("matrix is numerically singular", _null_direction(lu, A.shape[0], offsets, index_map))
    return lu


def _null_direction(lu, n: int, offsets: dict, index_map=None) -> int:
    """Unknown carrying the largest share of the near-null vector.

    A solve with near-singular factors is dominated by the null direction, so
    the block holding most of its mass is the block to blame.
    """
    with np.errstate(all="ignore"):
        x = lu.solve(np.cos(np.arange(n, dtype=float)))
    x = np.where(np.isfinite(x), np.abs(x), np.inf)
    glob = np.arange(n) if index_map is None else np.asarray(index_map)
    blocks = np.array([_block_name(offsets, int(i)) for i in glob])
    share = {b: float(np.sum(np.minimum(x[blocks == b], 1e300) ** 2)) for b in set(blocks)}
    worst = max(sorted(share), key=share.get)
    return int(np.flatnonzero(blocks == worst)[np.argmax(x[blocks == worst])])


def _refine(solve, A, b, refine: int = 5):
    """Direct solve plus iterative refinement against the full matrix ``A``.

    Stops once the componentwise backward error ``max |r| / (|A||x| + |b|)``
    reaches machine precision or no longer halves. A normwise stop would leave
    rows with small entries, such as the continuity rows, at the accuracy of
    the largest ones.
    """
    x = solve(b)
    if not np.any(b):
        return x
    absA, absb = abs(A), np.abs(b)
    prev = np.inf
    for _ in range(refine):
        r = b - A @ x
        denom = absA @ np.abs(x) + absb
        berr = float(np.max(np.abs(r)[denom > 0] / denom[denom > 0]))
        if berr <= np.finfo(float).eps or berr > 0.5 * prev:
            break
        prev = berr
        x = x + solve(r)
    return x


def solve_linear(system: SparseSystem, condense: bool = False, return_residual: bool = False):
    """Solve ``J delta = rhs`` by sparse LU with iterative refinement.

    With ``condense=True`` the multiplier block, whose diagonal block is
    diagonal, is eliminated first and recovered afterwards. Raises
    :class:`LinearSolveError` on singular systems or when the relative linear
    residual after refinement exceeds both ``1e-10`` and the rounding floor
    ``10 eps ||J||_1 ||delta|| / ||b||``.
    """
    J = sp.csc_matrix(system.matrix)
    b = np.asarray(system.rhs, dtype=float)
    o = system.offsets
    n = J.shape[0]
    solve = None
    if condense and "z" in o:
        z0, z1 = o["z"], o.get("lam", n)
        zs = np.arange(z0, z1)
        Jzz = J[z0:z1, z0:z1]
        dz = Jzz.diagonal()
        if (abs(Jzz - sp.diags(dz)).max() == 0) and np.all(dz != 0):
            keep = np.setdiff1d(np.arange(n), zs)
            Jk = J[keep]
            Bz, Cz = Jk[:, zs], J[zs][:, keep]
            Dinv = sp.diags(1.0 / dz)
            S = (Jk[:, keep] - Bz @ Dinv @ Cz).tocsc()
            S.eliminate_zeros()
            lu = _factorize(S, o, index_map=keep)

            def solve(rhs):
                out = np.empty(n)
                out[keep] = lu.solve(rhs[keep] - Bz @ (Dinv @ rhs[zs]))
                out[zs] = Dinv @ (rhs[zs] - Cz @ out[keep])
                return out
    if solve is None:
        solve = _factorize(J, o).solve
    delta = _refine(solve, J, b)
    res = _check(J, delta, b, o)
    return (delta, res) if return_residual else delta


def _check(J, delta, b, offsets):
    nb = np.linalg.norm(b)
    res = 0.0 if nb == 0 else np.linalg.norm(J @ delta - b) / nb
    if not np.all(np.isfinite(delta)):
        i = int(np.flatnonzero(~np.isfinite(delta))[0])
        blk = _block_name(offsets, i)
        raise LinearSolveError(f"non-finite update in block '{blk}'", blk, i)
    floor = 10 * np.finfo(float).eps * spla.norm(J, 1) * np.linalg.norm(delta) / max(nb, 1e-300)
    if res > max(LINEAR_TOL, floor):
        raise LinearSolveError(f"linear solve residual {res:.3e} exceeds {LINEAR_TOL:g}")
    return res


def active_fraction_of(problem: Problem, u: np.ndarray) -> float:
    return float(np.mean(classify_active(problem.disc.strain_rate(u), problem.params)))


def _clamp(problem: Problem, x: np.ndarray):
    """Raise density coefficients below the guard to the guard, in place."""
    o, guard = problem.disc.offsets, problem.params.rho_min_guard
    rho = x[o["rho"]:o["u"]]
    low = rho <= guard
    if np.any(low):
        warnings.warn(f"clamping {int(low.sum())} density coefficients (min {rho.min():.6g}) "
                      f"to {guard:g}", RuntimeWarning, stacklevel=3)
        rho[low] = guard * (1 + 1e-12)


def ssn_solve(problem: Problem, initial: FieldState, history, dt: float, scheme: str,
              t: float, cfg: SolverConfig | None = None):
    """Semismooth Newton iteration for one time level.

    Converged when the l2 residual is below ``cfg.tol`` in absolute terms or,
    after at least one step, relative to the initial residual.
    Returns ``(state, report)``; a non-converged report is returned, not raised.
    A density at or below the guard raises ``DensityPositivityError`` unless
    ``cfg.clamp_density`` is set, in which case it is clamped with a warning.
    """
    cfg = cfg or SolverConfig()
    d = problem.disc
    x = pack(initial)
    if cfg.clamp_density:
        _clamp(problem, x)
    report = SSNReport()
    r = assemble_residual(problem, x, history, dt, scheme, t)
    r0 = np.linalg.norm(r)
    for k in range(cfg.max_iter + 1):
        nr = np.linalg.norm(r)
        if not np.isfinite(nr):
            raise SSNError(f"non-finite residual at SSN iteration {k}", x, report)
        rel = nr / r0 if r0 > 0 else 0.0
        report.residual_history.append((float(nr), float(rel)))
        report.active_fraction_history.append(active_fraction_of(problem, unpack(d, x).u))
        if nr < cfg.tol or (k > 0 and rel < cfg.tol):
            report.converged = True
            break
        if k == cfg.max_iter:
            break
        r, J = assemble_residual(problem, x, history, dt, scheme, t, jacobian=True)
        try:
            delta, lres = solve_linear(SparseSystem(J, -r, d.offsets), condense=cfg.condense,
                                       return_residual=True)
        except LinearSolveError as exc:
            raise SSNError(f"SSN iteration {k}: {exc}", x, report) from exc
        report.linear_residuals.append(lres)
        x = x + cfg.damping * delta
        if cfg.clamp_density:
            _clamp(problem, x)
        report.iterations = k + 1
        r = assemble_residual(problem, x, history, dt, scheme, t)
    return unpack(d, x, t), report


def superlinearity_metric(report: SSNReport) -> list[float]:
    """Ratios ``|r_{k+1}| / |r_k|``; empty for fewer than three residuals."""
    res = [a for a, _ in report.residual_history]
    if len(res) < 3:
        return []
    return [res[i + 1] / res[i] for i in range(len(res) - 1)]
