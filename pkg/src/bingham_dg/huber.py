"""Huber (bi-viscosity) regularization of the Bingham stress.

All functions accept a single 2x2 tensor or a stack of shape ``(..., 2, 2)``.
The tensor magnitude is ``|A| = kappa * |A|_F`` where ``kappa = 1`` for the
Frobenius norm (default) and ``kappa = 1/sqrt(2)`` for the "shear" norm,
under which a simple shear ``du/dy = s`` has ``|Du| = |s|/2``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NORMS = {"frobenius": 1.0, "shear": 1.0 / np.sqrt(2.0)}


@dataclass(frozen=True)
class PhysParams:
    """Material and model constants.

    Parameters
    ----------
    eta : dynamic viscosity, > 0.
    tau_s : yield stress, >= 0.
    gamma : regularization parameter, > 0.
    gravity : body acceleration vector.
    rho_min_guard : density positivity floor.
    norm : tensor norm used inside the regularization, "frobenius" or "shear".
    """

    eta: float = 1.0
    tau_s: float = 0.0
    gamma: float = 1.0e3
    gravity: tuple[float, float] = (0.0, 0.0)
    rho_min_guard: float = 1.0e-8
    norm: str = "frobenius"

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError(f"eta must be > 0, got {self.eta}")
        if not self.tau_s >= 0:
            raise ValueError(f"tau_s must be >= 0, got {self.tau_s}")
        if not self.gamma > 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if not self.rho_min_guard > 0:
            raise ValueError(f"rho_min_guard must be > 0, got {self.rho_min_guard}")
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {tuple(NORMS)}, got {self.norm!r}")
        object.__setattr__(self, "gravity", tuple(float(g) for g in self.gravity))

    @property
    def kappa(self) -> float:
        return NORMS[self.norm]


def tensor_norm(A, p: PhysParams | None = None) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    kappa = 1.0 if p is None else p.kappa
    return kappa * np.sqrt(np.einsum("...ij,...ij->...", A, A))


def huber_norm(A, p: PhysParams) -> np.ndarray:
    """``max(tau_s, gamma * |A|)``."""
    return np.maximum(p.tau_s, p.gamma * tensor_norm(A, p))


def viscosity_mu(t, p: PhysParams) -> np.ndarray:
    """``2 eta + tau_s gamma / t`` for ``t`` produced by :func:`huber_norm`."""
    t = np.asarray(t, dtype=float)
    if p.tau_s == 0.0:
        return np.full_like(t, 2.0 * p.eta)
    if np.any(t < p.tau_s * (1 - 1e-14)):
        raise ValueError("viscosity_mu requires t >= tau_s")
    return 2.0 * p.eta + p.tau_s * p.gamma / t


def regularized_stress(Du, p: PhysParams) -> np.ndarray:
    """``mu(|Du|_gamma) Du``; Newtonian ``2 eta Du`` when ``tau_s = 0``."""
    Du = np.asarray(Du, dtype=float)
    if p.tau_s == 0.0:
        return 2.0 * p.eta * Du
    mu = viscosity_mu(huber_norm(Du, p), p)
    return mu[..., None, None] * Du


def bingham_stress(Du, p: PhysParams) -> np.ndarray:
    """Unregularized stress ``2 eta Du + tau_s Du/|Du|`` (only meaningful for Du != 0)."""
    Du = np.asarray(Du, dtype=float)
    n = tensor_norm(Du, p)
    return 2.0 * p.eta * Du + p.tau_s * Du / n[..., None, None]


def classify_active(Du, p: PhysParams) -> np.ndarray:
    """1 where ``gamma |Du| >= tau_s`` (yielded), else 0."""
    return (p.gamma * tensor_norm(Du, p) >= p.tau_s).astype(np.int64)
