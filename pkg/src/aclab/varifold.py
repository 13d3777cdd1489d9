"""Diffuse varifold of an Allen-Cahn field and the diagnostics built on it.

All vectors and tensors are frame components (orthonormal frame of the metric),
so pointwise norms are Euclidean sums of squares.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import domain, spectrum
from .allen_cahn import (QUARTIC, IdentityCheck, Potential, gradient_geometry, identity_tolerance,
                         require_critical, second_variation)
from .domain import Ball, TorusGrid
from .errors import NotStableInBall, UnsupportedMetric


@dataclass(frozen=True)
class DiffuseVarifold:
    """Node-sampled data of ``V^eps``.

    ``weight`` is ``eps |grad u|^2 / (2 sigma)``; ``nu``, ``A`` and ``A_sq`` vanish
    off the validity mask ``valid = {|grad u| > grad_floor}``.
    """

    grid: TorusGrid
    u: np.ndarray
    eps: float
    sigma: float
    weight: np.ndarray
    grad: np.ndarray
    grad_norm: np.ndarray
    nu: np.ndarray
    valid: np.ndarray
    hessian: np.ndarray
    hess_nu: np.ndarray
    A: np.ndarray
    A_sq: np.ndarray

    @property
    def projector(self) -> np.ndarray:
        """Tangential projector ``S = I - nu nu`` (identity off the validity mask)."""
        d = self.grid.dim
        eye = np.eye(d).reshape((d, d) + (1,) * d)
        return eye - np.einsum("i...,j...->ij...", self.nu, self.nu)


def build_diffuse_varifold(grid: TorusGrid, u, eps: float, grad_floor: float = 1e-8,
                           potential: Potential = QUARTIC) -> DiffuseVarifold:
    """Weight, normal and diffuse second fundamental form of the level sets of ``u``.

    ``A = -P (grad nu) P`` with ``grad nu = (D^2 u - nu (x) D^2u nu) / |grad u|``, ``P``
    the projection onto the level set's tangent space.
    """
    if not (eps > 0):
        raise ValueError(f"epsilon must be positive, got {eps}")
    u = domain._check(grid, u)
    sigma = potential.sigma
    g, gn, nu, H, Hnu, valid = gradient_geometry(grid, u, grad_floor)
    d = grid.dim
    eye = np.eye(d).reshape((d, d) + (1,) * d)
    P = eye - np.einsum("i...,j...->ij...", nu, nu)
    PHP = np.einsum("ik...,kl...,lj...->ij...", P, H, P)
    inv = np.where(valid, 1.0 / np.where(valid, gn, 1.0), 0.0)
    A = -PHP * inv
    A_sq = np.einsum("ij...,ij...->...", A, A)
    weight = eps * gn**2 / (2.0 * sigma)
    return DiffuseVarifold(grid, u, eps, sigma, weight, g, gn, nu, valid, H, Hnu, A, A_sq)


def mass(V: DiffuseVarifold, mask=None) -> float:
    return domain.integrate(V.grid, V.weight, mask)


def measure_function_pairing(V: DiffuseVarifold, f, phi=None) -> float:
    """``int f phi dV^eps``; ``f`` is taken as zero off the validity mask."""
    f = np.where(V.valid, np.broadcast_to(np.asarray(f, dtype=float), V.grid.shape), 0.0)
    phi = 1.0 if phi is None else np.asarray(phi, dtype=float)
    return domain.integrate(V.grid, f * phi * V.weight)


def lemma_pointwise_violations(V: DiffuseVarifold) -> tuple[int, float]:
    """Count of valid nodes where ``|A|^2 |grad u|^2 > |D^2u|^2 - |D^2u nu|^2 + tol``.

    ``tol = 1e-8 (1 + |D^2 u|^2)``; also returns the largest excess.
    """
    hess_sq = np.einsum("ij...,ij...->...", V.hessian, V.hessian)
    lhs = V.A_sq * V.grad_norm**2
    rhs = hess_sq - domain.norm_sq(V.hess_nu)
    excess = np.where(V.valid, lhs - rhs - 1e-8 * (1.0 + hess_sq), -np.inf)
    return int(np.sum(excess > 0)), float(np.max(excess)) if V.valid.any() else 0.0


def mass_bound_check(V: DiffuseVarifold, energy_total: float) -> tuple[float, float, bool]:
    """``mass(full) <= E / (2 sigma) + 1e-9``."""
    m = mass(V)
    bound = energy_total / (2.0 * V.sigma)
    return m, bound, m <= bound + 1e-9


# --------------------------------------------------------------------------
# first variation and equipartition


def discrepancy(V: DiffuseVarifold, potential: Potential = QUARTIC) -> np.ndarray:
    """``xi = eps |grad u|^2 / 2 - W(u) / eps``."""
    return 0.5 * V.eps * V.grad_norm**2 - potential.W(V.u) / V.eps


def _vector_derivative(grid: TorusGrid, X: np.ndarray) -> np.ndarray:
    """``D[a, b] = d_b X^a`` in coordinates."""
    return np.stack([domain.coordinate_gradient(grid, X[a]) for a in range(grid.dim)])


def first_variation_defect(grid: TorusGrid, u, eps: float, X, potential: Potential = QUARTIC,
                           V: DiffuseVarifold | None = None, critical_tol: float | None = None
                           ) -> IdentityCheck:
    """``int div_S X dV^eps`` against ``(1/2 sigma) int xi div X``.

    ``X`` holds coordinate components ``X^a``.  In a conformal metric both
    divergences pick up the ``df`` terms of the Levi-Civita connection.
    """
    require_critical(grid, u, eps, critical_tol, potential)
    V = V if V is not None else build_diffuse_varifold(grid, u, eps, potential=potential)
    X = np.asarray(X, dtype=float)
    D = _vector_derivative(grid, X)
    d = grid.dim
    trace = np.einsum("aa...->...", D)
    nDn = np.einsum("a...,ab...,b...->...", V.nu, D, V.nu)
    if grid.metric.is_flat:
        div = trace
        div_s = trace - nDn
    else:
        df_x = np.einsum("a...,a...->...", grid.grad_conformal_exponent, X)
        div = trace + d * df_x
        div_s = trace - nDn + (d - 1) * df_x
    lhs = domain.integrate(grid, div_s * V.weight)
    rhs = domain.integrate(grid, discrepancy(V, potential) * div) / (2.0 * V.sigma)
    return IdentityCheck(lhs, rhs)


@dataclass(frozen=True)
class Equipartition:
    dirichlet: float
    potential: float
    modica: float

    @property
    def defect(self) -> float:
        a, b, c = self.dirichlet, self.potential, self.modica
        return max(abs(a - b), abs(a - c), abs(b - c))


def equipartition_defect(grid: TorusGrid, u, eps: float, phi=None,
                         potential: Potential = QUARTIC) -> Equipartition:
    """Pairings of ``eps|grad u|^2/2``, ``W(u)/eps`` and ``|grad (Psi o u)|`` with ``phi``.

    The Dirichlet density is the edge-based one used by the energy; the third
    pairing uses the chain rule ``|grad Psi(u)| = sqrt(W(u)/2) |grad u|`` on the
    same density.
    """
    u = domain._check(grid, u)
    phi = np.ones(grid.shape) if phi is None else np.asarray(phi, dtype=float)
    dens = domain.dirichlet_density(grid, u)
    a = domain.integrate(grid, 0.5 * eps * dens * phi)
    b = domain.integrate(grid, potential.W(u) / eps * phi)
    c = domain.integrate(grid, np.sqrt(np.maximum(potential.W(u), 0.0) / 2.0) * np.sqrt(dens) * phi)
    return Equipartition(a, b, c)


# --------------------------------------------------------------------------
# stability inequality and ball bounds


def stability_inequality_check(grid: TorusGrid, u, eps: float, phi, mask=None,
                               potential: Potential = QUARTIC, tol: float | None = None,
                               critical_tol: float | None = None):
    """``(eps / 2 sigma) d^2 E(|grad u| phi)`` against ``int |grad phi|^2 - (|A|^2 + Ric(nu,nu)) phi^2 dV``.

    Returns ``(lhs, rhs, holds)`` with ``holds = lhs <= rhs + tol_id``.
    """
    require_critical(grid, u, eps, critical_tol, potential)
    phi = domain._check(grid, phi)
    V = build_diffuse_varifold(grid, u, eps, potential=potential)
    lhs = second_variation(grid, u, eps, V.grad_norm * phi, mask, potential) / (2.0 * V.sigma)
    dphi = domain.gradient(grid, phi)
    ric = np.einsum("ab...,a...,b...->...", grid.ricci_frame, V.nu, V.nu)
    integrand = domain.norm_sq(dphi) - (V.A_sq + ric) * phi**2
    rhs = domain.integrate(grid, integrand * V.weight)
    tol = identity_tolerance(lhs, rhs, grid, eps) if tol is None else tol
    return lhs, rhs, bool(lhs <= rhs + tol)


@dataclass(frozen=True)
class BallBound:
    center: tuple
    radius: float
    curvature_l2: float
    mass_r: float

    @property
    def ratio(self) -> float:
        return self.curvature_l2 * self.radius**2 / self.mass_r if self.mass_r > 0 else 0.0


def ball_curvature_bound(grid: TorusGrid, u, eps: float, center, r: float,
                         potential: Potential = QUARTIC, V: DiffuseVarifold | None = None,
                         solver: str = "auto") -> BallBound:
    """``int_{B(r/2)} |A|^2 dV`` and ``||V||(B(r))`` for a ball in which ``u`` is stable."""
    if r > 0.5 * min(grid.lengths):
        raise ValueError(f"radius {r} exceeds half the shortest period")
    ball = Ball(tuple(center), r).mask(grid)
    idx = spectrum.morse_index(grid, u, eps, ball, potential, solver)
    if idx != 0:
        raise NotStableInBall(f"Morse index {idx} in ball B({tuple(center)}, {r})")
    V = V if V is not None else build_diffuse_varifold(grid, u, eps, potential=potential)
    half = Ball(tuple(center), 0.5 * r).mask(grid)
    return BallBound(tuple(float(c) for c in center), float(r),
                     measure_function_pairing(V, V.A_sq, half.mask), mass(V, ball))


# --------------------------------------------------------------------------
# generalised curvature (flat chart)


@dataclass(frozen=True)
class GrassmannTestFunction:
    """``phi(x, S) = alpha(x) beta(S)`` with ``beta`` a quadratic polynomial in ``S``.

    ``beta(S) = c0 + sum_kr c1[k, r] S_kr + sum_{kr, st} c2[k, r, s, t] S_kr S_st``.
    """

    alpha: np.ndarray
    c0: float = 1.0
    c1: np.ndarray | None = None
    c2: np.ndarray | None = None
    mask: np.ndarray | None = None

    def beta(self, S: np.ndarray) -> np.ndarray:
        out = np.full(S.shape[2:], float(self.c0))
        if self.c1 is not None:
            out = out + np.einsum("kr,kr...->...", self.c1, S)
        if self.c2 is not None:
            out = out + np.einsum("krst,kr...,st...->...", self.c2, S, S)
        return out

    def dbeta(self, S: np.ndarray) -> np.ndarray:
        """``d beta / d S_kr`` per node."""
        d = S.shape[0]
        out = np.zeros(S.shape)
        if self.c1 is not None:
            out += np.asarray(self.c1).reshape((d, d) + (1,) * (S.ndim - 2))
        if self.c2 is not None:
            c2 = np.asarray(self.c2)
            out += np.einsum("krst,st...->kr...", c2, S) + np.einsum("stkr,st...->kr...", c2, S)
        return out


def curvature_tensor_B(V: DiffuseVarifold) -> np.ndarray:
    """``B_ijk = S_il d_l S_jk`` with ``d_l S`` by central differences (flat chart)."""
    if not V.grid.metric.is_flat:
        raise UnsupportedMetric("generalised curvature is only assembled in the flat chart")
    S = V.projector
    d = V.grid.dim
    dS = np.stack([np.stack([domain.coordinate_gradient(V.grid, S[j, k]) for k in range(d)])
                   for j in range(d)])  # dS[j, k, l] = d_l S_jk
    return np.einsum("il...,jkl...->ijk...", S, dS)


def B_bound_violations(V: DiffuseVarifold, factor: float = 8.0) -> tuple[int, float]:
    """Nodes where ``|B|^2 > factor |A|^2`` beyond ``1e-8 (1 + |A|^2)``.

    Only nodes whose whole difference stencil lies in the validity mask count.
    """
    B = curvature_tensor_B(V)
    B_sq = np.einsum("ijk...,ijk...->...", B, B)
    inner = V.valid.copy()
    for a in range(V.grid.dim):
        inner &= np.roll(V.valid, 1, a) & np.roll(V.valid, -1, a)
    excess = np.where(inner, B_sq - factor * V.A_sq - 1e-8 * (1.0 + V.A_sq), -np.inf)
    return int(np.sum(excess > 0)), float(np.max(excess)) if inner.any() else 0.0


def generalized_curvature_residual(grid: TorusGrid, u, eps: float, phi: GrassmannTestFunction,
                                   potential: Potential = QUARTIC, critical_tol: float | None = None):
    """Per-direction sides of the generalised-curvature identity.

    For each ``j``: lhs ``int S_rj d_r phi + B_rjr phi + B_jkr d*_kr phi dV`` and rhs
    ``(1/2 sigma) int xi div X`` with ``X = phi(x, S) S e_j``.  Returns
    ``(lhs, rhs, defect)`` with array sides and ``defect = max_j |lhs_j - rhs_j|``.
    """
    if not grid.metric.is_flat:
        raise UnsupportedMetric("generalised curvature residual requires the flat chart")
    require_critical(grid, u, eps, critical_tol, potential)
    V = build_diffuse_varifold(grid, u, eps, potential=potential)
    S = V.projector
    B = curvature_tensor_B(V)
    alpha = domain._check(grid, phi.alpha)
    beta = phi.beta(S)
    dbeta = phi.dbeta(S)
    dalpha = domain.coordinate_gradient(grid, alpha)
    xi = discrepancy(V, potential)
    d = grid.dim
    lhs = np.zeros(d)
    rhs = np.zeros(d)
    for j in range(d):
        term = (np.einsum("r...,r...->...", S[:, j], dalpha) * beta
                + np.einsum("rr...->...", B[:, j, :]) * alpha * beta
                + alpha * np.einsum("kr...,kr...->...", B[j], dbeta))
        lhs[j] = domain.integrate(grid, term * V.weight)
        X = alpha * beta * S[:, j]
        div = sum(domain.coordinate_gradient(grid, X[a])[a] for a in range(d))
        rhs[j] = domain.integrate(grid, xi * div) / (2.0 * V.sigma)
    return lhs, rhs, float(np.max(np.abs(lhs - rhs)))


def standard_grassmann_tests(alpha: np.ndarray, dim: int) -> list[GrassmannTestFunction]:
    """Three fixed test functions: constant, linear and quadratic in ``S``."""
    c1 = np.zeros((dim, dim))
    c1[0, 0] = 1.0
    c1[0, 1] = c1[1, 0] = 0.5
    c2 = np.zeros((dim, dim, dim, dim))
    c2[0, 0, 0, 0] = 1.0
    c2[1, 1, 0, 1] = 0.5
    return [GrassmannTestFunction(alpha), GrassmannTestFunction(alpha, 0.5, c1=c1),
            GrassmannTestFunction(alpha, 0.0, c1=0.3 * c1, c2=c2)]


def smooth_bump(grid: TorusGrid, center, radius: float) -> np.ndarray:
    """``C^1`` bump ``(1 - (r/R)^2)^3`` on a periodic ball, zero outside."""
    r = grid.distance_to(center) / radius
    return np.where(r < 1.0, (1.0 - r * r) ** 3, 0.0)


def band_profile(grid: TorusGrid, axis: int, center: float, half_width: float) -> np.ndarray:
    """``C^1`` bump in one coordinate (periodic), constant in the others."""
    L = grid.lengths[axis]
    d = grid.coords[axis] - center
    d = d - L * np.round(d / L)
    r = d / half_width
    return np.where(np.abs(r) < 1.0, (1.0 - r * r) ** 3, 0.0)


VARIFOLD_COLUMNS = ("run_id", "epsilon", "mass_total", "equipartition_defect",
                    "first_variation_residual", "curvature_l2", "ball_ratio_max")
