"""Double-well potential, the Allen-Cahn energy and its first and second variations."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import integrate as quad

from . import domain
from .domain import TorusGrid
from .errors import NotCritical, SupportError

SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class Potential:
    """Evaluator triple for a double well with minima at +-1.

    ``sigma_closed`` and ``psi_closed`` are optional closed forms; without them
    the constants fall back to adaptive quadrature.
    """

    name: str
    W: Callable[[np.ndarray], np.ndarray]
    dW: Callable[[np.ndarray], np.ndarray]
    d2W: Callable[[np.ndarray], np.ndarray]
    sigma_closed: float | None = None
    psi_closed: Callable[[np.ndarray], np.ndarray] | None = None

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        return self.W(u), self.dW(u), self.d2W(u)

    def sigma_quadrature(self) -> float:
        val, _ = quad.quad(lambda s: math.sqrt(max(float(self.W(s)), 0.0) / 2.0), -1.0, 1.0,
                           epsabs=1e-14, epsrel=1e-14)
        return val

    @property
    def sigma(self) -> float:
        if self.sigma_closed is not None:
            return self.sigma_closed
        return self.sigma_quadrature()

    def psi(self, t):
        """Primitive ``Psi(t) = int_0^t sqrt(W(s)/2) ds``."""
        if self.psi_closed is not None:
            return self.psi_closed(np.asarray(t, dtype=float))
        f = np.vectorize(lambda x: quad.quad(lambda s: math.sqrt(max(float(self.W(s)), 0.0) / 2.0),
                                             0.0, x)[0])
        return f(np.asarray(t, dtype=float))


def _quartic_psi(t):
    # sqrt(W/2) = |1 - s^2| / (2 sqrt 2); odd in t
    a = np.abs(t)
    inner = (np.minimum(a, 1.0) - np.minimum(a, 1.0) ** 3 / 3.0)
    outer = np.where(a > 1.0, (a**3 / 3.0 - a) + 2.0 / 3.0, 0.0)
    return np.sign(t) * (inner + outer) / (2.0 * SQRT2)


QUARTIC = Potential(
    name="quartic",
    W=lambda u: 0.25 * (1.0 - u * u) ** 2,
    dW=lambda u: u * u * u - u,
    d2W=lambda u: 3.0 * u * u - 1.0,
    sigma_closed=SQRT2 / 3.0,
    psi_closed=_quartic_psi,
)

POTENTIALS = {"quartic": QUARTIC}


def get_potential(name: str = "quartic") -> Potential:
    try:
        return POTENTIALS[name]
    except KeyError:
        raise ValueError(f"unknown potential {name!r}; known: {sorted(POTENTIALS)}") from None


def potential_eval(u, potential: Potential = QUARTIC):
    return potential(u)


def _check_eps(eps):
    if not (eps > 0):
        raise ValueError(f"epsilon must be positive, got {eps}")


@dataclass(frozen=True)
class EnergyBreakdown:
    dirichlet_part: float
    potential_part: float
    region: str = "full"

    @property
    def total(self) -> float:
        return self.dirichlet_part + self.potential_part

    def to_dict(self):
        return {"dirichlet_part": self.dirichlet_part, "potential_part": self.potential_part,
                "total": self.total, "region": self.region}


def energy(grid: TorusGrid, u, eps: float, mask=None, potential: Potential = QUARTIC,
           label: str | None = None) -> EnergyBreakdown:
    """``E_eps = int eps |grad u|^2 / 2 + W(u) / eps`` split into its two parts.

    The Dirichlet density is the edge-based one, so on the full torus it equals
    the quadratic form whose Euler-Lagrange operator is the discrete Laplacian.
    """
    _check_eps(eps)
    u = domain._check(grid, u)
    dens = domain.dirichlet_density(grid, u)
    dir_part = integrate_masked(grid, 0.5 * eps * dens, mask)
    pot_part = integrate_masked(grid, potential.W(u) / eps, mask)
    if label is None:
        label = getattr(mask, "label", "full" if mask is None else "mask")
    return EnergyBreakdown(dir_part, pot_part, label)


def integrate_masked(grid, values, mask):
    return domain.integrate(grid, values, mask)


def residual(grid: TorusGrid, u, eps: float, potential: Potential = QUARTIC) -> np.ndarray:
    """Nodewise ``Lap u - eps^-2 W'(u)``."""
    _check_eps(eps)
    u = domain._check(grid, u)
    return domain.laplacian(grid, u) - potential.dW(u) / eps**2


def residual_linf(grid, u, eps, potential: Potential = QUARTIC) -> float:
    return float(np.max(np.abs(residual(grid, u, eps, potential))))


def _support_check(grid, phi, mask, tol=0.0):
    m = domain.as_mask(grid, mask)
    outside = np.abs(np.asarray(phi)[~m])
    if outside.size and outside.max() > tol:
        raise SupportError(f"test function is nonzero outside its mask (max {outside.max():.3e})")
    return m


def second_variation(grid: TorusGrid, u, eps: float, phi, mask=None,
                     potential: Potential = QUARTIC) -> float:
    """``d^2 E_eps(u)(phi, phi) = int eps |grad phi|^2 + W''(u) phi^2 / eps``."""
    _check_eps(eps)
    u = domain._check(grid, u)
    phi = domain._check(grid, phi)
    _support_check(grid, phi, mask)
    dir_part = float(np.sum(phi * domain.stiffness_apply(grid, phi)))
    pot = domain.integrate(grid, potential.d2W(u) * phi * phi)
    return eps * dir_part + pot / eps


def second_variation_bilinear(grid, u, eps, phi, psi, potential: Potential = QUARTIC) -> float:
    dir_part = float(np.sum(phi * domain.stiffness_apply(grid, psi)))
    return eps * dir_part + domain.integrate(grid, potential.d2W(u) * phi * psi) / eps


def critical_tolerance(eps: float) -> float:
    """Default residual threshold below which a field counts as critical."""
    return 1e-6 * (1.0 + eps**-2)


def require_critical(grid, u, eps, tol=None, potential: Potential = QUARTIC) -> float:
    tol = critical_tolerance(eps) if tol is None else tol
    r = residual_linf(grid, u, eps, potential)
    if r > tol:
        raise NotCritical(f"residual {r:.3e} exceeds criticality tolerance {tol:.3e}")
    return r


def gradient_geometry(grid: TorusGrid, u, floor_rel: float = 1e-8):
    """Gradient, its norm, unit normal, Hessian and ``grad |grad u| = H nu``.

    ``nu`` and ``H nu`` vanish where ``|grad u|`` falls below the relative floor.
    """
    g = domain.gradient(grid, u)
    gn = np.sqrt(domain.norm_sq(g))
    floor = floor_rel * gn.max() if gn.max() > 0 else 0.0
    valid = gn > floor if gn.max() > 0 else np.zeros(grid.shape, dtype=bool)
    nu = np.where(valid, g / np.where(valid, gn, 1.0), 0.0)
    H = domain.hessian(grid, u)
    Hnu = np.einsum("ab...,b...->a...", H, nu)
    return g, gn, nu, H, Hnu, valid


@dataclass(frozen=True)
class IdentityCheck:
    lhs: float
    rhs: float

    @property
    def defect(self) -> float:
        return abs(self.lhs - self.rhs)

    def __iter__(self):
        return iter((self.lhs, self.rhs, self.defect))


def identity_tolerance(lhs: float, rhs: float, grid: TorusGrid, eps: float) -> float:
    """Discretisation allowance ``tol_id(h)`` for the integral identities.

    ``1e-3 (|lhs| + |rhs| + 1)`` at the reference resolution of 16 nodes per
    interface width, growing like ``(h / eps)^2`` on coarser grids.
    """
    scale = max(1.0, (16.0 * max(grid.spacing) / eps) ** 2)
    return 1e-3 * (abs(lhs) + abs(rhs) + 1.0) * scale


def weighted_second_variation_identity(grid: TorusGrid, u, eps: float, phi, mask=None,
                                       potential: Potential = QUARTIC,
                                       critical_tol: float | None = None) -> IdentityCheck:
    """Both sides of the weighted second-variation identity for a critical point.

    lhs is the discrete quadratic form of ``eps^-1 E_eps`` at ``|grad u| phi``;
    rhs is ``int |grad u|^2 |grad phi|^2 - (|D^2 u|^2 - |grad |grad u||^2 + Ric(grad u, grad u)) phi^2``.
    """
    _check_eps(eps)
    u = domain._check(grid, u)
    phi = domain._check(grid, phi)
    _support_check(grid, phi, mask)
    require_critical(grid, u, eps, critical_tol, potential)
    g, gn, nu, H, Hnu, _ = gradient_geometry(grid, u)
    psi = gn * phi
    lhs = second_variation(grid, u, eps, psi, None, potential) / eps
    dphi = domain.gradient(grid, phi)
    ric = np.einsum("ab...,a...,b...->...", grid.ricci_frame, g, g)
    hess_sq = np.einsum("ab...,ab...->...", H, H)
    integrand = gn**2 * domain.norm_sq(dphi) - (hess_sq - domain.norm_sq(Hnu) + ric) * phi**2
    rhs = domain.integrate(grid, integrand)
    return IdentityCheck(lhs, rhs)
