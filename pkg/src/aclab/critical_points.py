"""Critical points of the Allen-Cahn energy: descent, Newton, mountain pass, continuation."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import ndimage

from . import domain, spectrum
from .allen_cahn import QUARTIC, EnergyBreakdown, Potential, energy, residual
from .domain import TorusGrid
from .errors import (DegeneratePath, Divergence, GridError, IndexViolation, NonConvergence,
                     ScheduleError, SingularJacobian)
from .lanczos import shift_invert_lanczos

log = logging.getLogger(__name__)

TOL_OVERSHOOT = 1e-8


@dataclass
class CriticalPoint:
    grid: TorusGrid
    u: np.ndarray
    epsilon: float
    residual_linf: float
    energy: EnergyBreakdown
    sup_norm: float
    morse_index: int | None = None
    method: str = ""
    near_zero: list = field(default_factory=list)
    history: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    def sidecar(self, seed: int | None = None) -> dict:
        return {"epsilon": self.epsilon, "residual": self.residual_linf,
                "energy": self.energy.total, "index": self.morse_index, "seed": seed,
                "method": self.method, "sup_norm": self.sup_norm, "grid": self.grid.to_dict()}


def _make_point(grid, u, eps, method, potential, history=None, flags=None) -> CriticalPoint:
    r = float(np.max(np.abs(residual(grid, u, eps, potential))))
    return CriticalPoint(grid, u, eps, r, energy(grid, u, eps, potential=potential),
                         float(np.max(np.abs(u))), None, method, [], history or {}, flags or [])


def certify(point: CriticalPoint, potential: Potential = QUARTIC, solver: str = "auto") -> CriticalPoint:
    """Attach the Morse index (and near-zero eigenvalues) computed by the spectrum module."""
    det = spectrum.morse_index_detail(point.grid, point.u, point.epsilon, None, potential, solver)
    point.morse_index = det.index
    point.near_zero = det.near_zero
    point.history["lowest_eigenvalues"] = [float(v) for v in det.eigenvalues[:8]]
    return point


def save_point(point: CriticalPoint, path, seed: int | None = None) -> None:
    path = Path(path)
    domain.write_field(path, point.u)
    path.with_suffix(".json").write_text(json.dumps(point.sidecar(seed), indent=2, sort_keys=True))


def load_point(path, potential: Potential = QUARTIC) -> CriticalPoint:
    """Read a field dump and its sidecar; residual and energy are recomputed, the index is taken as stored."""
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    grid = domain.grid_from_dict(meta["grid"])
    u = domain.read_field(path)
    if u.shape != grid.shape:
        raise GridError(f"{path}: field shape {u.shape} does not match sidecar grid {grid.shape}")
    p = _make_point(grid, u, float(meta["epsilon"]), meta.get("method", ""), potential)
    p.morse_index = meta.get("index")
    return p


# --------------------------------------------------------------------------
# semi-implicit gradient flow


class _ImplicitSolver:
    """Solves ``(a I - Lap) x = b`` on the grid; FFT for flat metrics, sparse LU otherwise."""

    def __init__(self, grid: TorusGrid, a: float):
        self.grid = grid
        self.a = a
        if grid.metric.is_flat:
            self.denom = a + grid.laplacian_symbol
            self.lu = None
        else:
            w = grid.volume_weights.ravel()
            self.lu = spla.splu(sp.csc_matrix(sp.diags(a * w) + grid.stiffness))
            self.w = w

    def __call__(self, b):
        if self.lu is None:
            return np.real(np.fft.ifftn(np.fft.fftn(b) / self.denom))
        return self.lu.solve(self.w * b.ravel()).reshape(self.grid.shape)


def gradient_flow(grid: TorusGrid, u0, eps: float, tol_res: float = 1e-6, max_steps: int = 20000,
                  dt: float | None = None, potential: Potential = QUARTIC,
                  record_energy: bool = True) -> CriticalPoint:
    """Stabilised semi-implicit descent for ``u_t = Lap u - eps^-2 W'(u)``.

    Each step solves ``(1/dt + S - Lap) u+ = (1/dt + S) u - eps^-2 W'(u)`` with
    ``S`` half the Lipschitz constant of ``eps^-2 W'`` on the current range, which
    keeps the discrete energy non-increasing.
    """
    if not (eps > 0):
        raise ValueError(f"epsilon must be positive, got {eps}")
    u = domain._check(grid, u0).copy()
    dt = dt if dt is not None else 0.5 * eps**2
    top = max(1.0, float(np.max(np.abs(u))))
    S = 0.5 * max(abs(potential.d2W(np.array(top))), abs(potential.d2W(np.array(0.0))), 2.0) / eps**2
    solve = _ImplicitSolver(grid, 1.0 / dt + S)
    energies = []
    res_hist = []
    for step in range(max_steps + 1):
        r = residual(grid, u, eps, potential)
        rn = float(np.max(np.abs(r)))
        res_hist.append(rn)
        if record_energy:
            energies.append(energy(grid, u, eps, potential=potential).total)
        if rn <= tol_res:
            p = _make_point(grid, u, eps, "gradient_flow", potential,
                            {"energy": energies, "residual": res_hist, "steps": step})
            return p
        if step == max_steps:
            break
        rhs = (1.0 / dt + S) * u - potential.dW(u) / eps**2
        u = solve(rhs)
        sup = float(np.max(np.abs(u)))
        if not np.isfinite(sup) or sup > 2.0:
            raise Divergence(f"sup-norm {sup:.3e} exceeds 2 at step {step + 1}")
    raise NonConvergence(f"gradient flow: residual {res_hist[-1]:.3e} > {tol_res:.3e} after "
                         f"{max_steps} steps", steps=max_steps, residual=res_hist[-1])


# --------------------------------------------------------------------------
# Newton


def _periodic_labels(mask: np.ndarray) -> tuple[np.ndarray, int]:
    lab, n = ndimage.label(mask)
    if n == 0:
        return lab, 0
    parent = list(range(n + 1))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a in range(mask.ndim):
        first = np.take(lab, 0, axis=a)
        last = np.take(lab, -1, axis=a)
        both = (first > 0) & (last > 0)
        for i, j in zip(first[both], last[both]):
            ri, rj = find(int(i)), find(int(j))
            if ri != rj:
                parent[max(ri, rj)] = min(ri, rj)
    roots = np.array([find(i) for i in range(n + 1)])
    uniq = {r: k for k, r in enumerate(sorted(set(roots[1:])), start=1)}
    remap = np.array([0] + [uniq[r] for r in roots[1:]])
    return remap[lab], len(uniq)


def interface_components(u: np.ndarray, level: float = 0.999) -> tuple[np.ndarray, int]:
    """Connected (periodic) components of the band ``{|u| < level}``."""
    return _periodic_labels(np.abs(u) < level)


def local_translation_modes(grid: TorusGrid, u: np.ndarray) -> np.ndarray:
    """Orthonormal basis of ``d_a u`` restricted to each interface component."""
    lab, n = interface_components(u)
    du = domain.coordinate_gradient(grid, u)
    cols = []
    for c in range(1, n + 1):
        chi = lab == c
        for a in range(grid.dim):
            v = (du[a] * chi).ravel()
            if np.linalg.norm(v) > 0:
                cols.append(v)
    if not cols:
        return np.zeros((grid.size, 0))
    Q, R = np.linalg.qr(np.array(cols).T)
    keep = np.abs(np.diag(R)) > 1e-10 * np.abs(np.diag(R)).max()
    return Q[:, keep]


def null_modes(grid: TorusGrid, u: np.ndarray, eps: float, potential: Potential = QUARTIC,
               tol_sing: float = 1e-8, k: int = 6):
    """Eigenpairs of the linearisation with ``|lambda| <= tol_sing (1 + eps^-2)``.

    Returns ``(values, nodal_vectors, explained)`` where ``explained[i]`` is the
    fraction of mode ``i`` lying in the span of local interface translations.
    """
    op = spectrum.assemble(grid, u, eps, None, potential)
    scale = 1.0 + eps**-2
    k = min(k, op.size - 1)
    shift = -1e-4 * scale
    res = shift_invert_lanczos(op.matrix, k, shift, which="nearest", tol=1e-9)
    sel = np.abs(res.eigenvalues) <= tol_sing * scale
    vals = res.eigenvalues[sel]
    vecs = res.eigenvectors[:, sel]
    # nodal functions; flat metric keeps them orthonormal up to a constant
    w = grid.volume_weights.ravel()
    nodal = vecs / np.sqrt(w)[:, None]
    T = local_translation_modes(grid, u)
    explained = []
    for i in range(nodal.shape[1]):
        v = nodal[:, i] / np.linalg.norm(nodal[:, i])
        explained.append(float(np.linalg.norm(T.T @ v)) if T.shape[1] else 0.0)
    return vals, nodal, np.array(explained)


def _jacobian(grid, u, eps, potential):
    # J = Lap - eps^-2 W''(u) in nodal form: -M^{-1} K - diag(q)
    w = grid.volume_weights.ravel()
    return sp.csc_matrix(-sp.diags(1.0 / w) @ grid.stiffness - sp.diags(potential.d2W(u).ravel() / eps**2))


def newton_refine(grid: TorusGrid, u, eps: float, tol_res: float = 1e-10, max_iter: int = 25,
                  entry_tol: float | None = None, potential: Potential = QUARTIC,
                  tol_sing: float = 1e-8, explained_min: float = 0.9) -> CriticalPoint:
    """Newton iteration on ``Lap u - eps^-2 W'(u) = 0``.

    Near-null directions of the linearisation that are interface translations are
    projected out of both the residual and the step.  Any other numerically
    singular direction raises :class:`SingularJacobian`.
    """
    u = domain._check(grid, u).copy()
    entry_tol = entry_tol if entry_tol is not None else 1e-1 * (1.0 + eps**-2)
    r = residual(grid, u, eps, potential)
    rn = float(np.max(np.abs(r)))
    if rn > entry_tol:
        raise NonConvergence(f"newton_refine: initial residual {rn:.3e} above entry threshold "
                             f"{entry_tol:.3e}", steps=0, residual=rn)
    vals, nodal, explained = null_modes(grid, u, eps, potential, tol_sing)
    bad = explained < explained_min
    if np.any(bad):
        raise SingularJacobian(
            f"linearisation singular: eigenvalue(s) {vals[bad]} not explained by interface translations")
    hist = [rn]
    if rn <= tol_res:
        return _make_point(grid, u, eps, "newton", potential, {"residual": hist, "null_modes": list(vals)})
    w = grid.volume_weights.ravel()
    sw = np.sqrt(w)
    # orthonormal basis (volume-weighted) of the retained null directions
    Pw = np.linalg.qr(sw[:, None] * nodal)[0] if nodal.shape[1] else None

    def proj(v):
        if Pw is None:
            return v
        y = sw * v
        y = y - Pw @ (Pw.T @ y)
        return y / sw

    for it in range(max_iter):
        J = _jacobian(grid, u, eps, potential)
        rhs = -proj(r.ravel())
        with warnings.catch_warnings():
            warnings.simplefilter("error", spla.MatrixRankWarning)
            try:
                du = spla.splu(J, permc_spec="MMD_AT_PLUS_A").solve(rhs)
            except (RuntimeError, spla.MatrixRankWarning) as exc:
                raise SingularJacobian(f"Jacobian factorisation failed: {exc}") from exc
        du = proj(du)
        step = 1.0
        while True:
            un = u + step * du.reshape(grid.shape)
            rn_new = residual(grid, un, eps, potential)
            nn = float(np.max(np.abs(rn_new)))
            if nn < hist[-1] or step < 1e-3:
                break
            step *= 0.5
        u, r = un, rn_new
        hist.append(nn)
        if nn <= tol_res:
            return _make_point(grid, u, eps, "newton", potential,
                               {"residual": hist, "null_modes": list(vals)})
        if not np.isfinite(nn):
            raise Divergence("Newton iterate became non-finite")
    raise NonConvergence(f"newton_refine: residual {hist[-1]:.3e} > {tol_res:.3e} after {max_iter} "
                         f"iterations", steps=max_iter, residual=hist[-1])


def solve(grid, u0, eps, tol_res=1e-9, flow_tol=None, max_steps=20000, potential: Potential = QUARTIC,
          certify_index=True) -> CriticalPoint:
    """Gradient flow to a moderate residual followed by Newton polishing."""
    flow_tol = flow_tol if flow_tol is not None else 1e-3 * (1.0 + eps**-2)
    p = gradient_flow(grid, u0, eps, flow_tol, max_steps, potential=potential)
    q = newton_refine(grid, p.u, eps, tol_res, potential=potential)
    q.method = "gradient_flow+newton"
    q.history["flow"] = p.history
    if certify_index:
        certify(q, potential)
    return q


def interface_pair(grid: TorusGrid, eps: float, positions=(0.25, 0.75), axis: int = 0) -> np.ndarray:
    """Two heteroclinic layers ``{x_axis = positions * L}`` (``+1`` between them).

    The periodic images on either side are summed so the field is smooth
    across the seam of the torus.
    """
    L = grid.lengths[axis]
    x = grid.coords[axis]
    a, b = (float(q) * L for q in positions)
    if not 0 <= a < b <= L:
        raise ValueError(f"positions must satisfy 0 <= a < b <= 1, got {positions}")
    c = math.sqrt(2.0) * eps
    return -1.0 + sum(np.tanh((x - a + m * L) / c) - np.tanh((x - b + m * L) / c) for m in (-1, 0, 1))


# --------------------------------------------------------------------------
# mountain pass


def _inner(grid, a, b):
    return float(np.sum(grid.volume_weights * a * b))


def _reparametrize(grid, images):
    """Redistribute images to equal L2 arclength by piecewise-linear interpolation."""
    d = np.array([0.0] + [math.sqrt(_inner(grid, images[j + 1] - images[j], images[j + 1] - images[j]))
                          for j in range(len(images) - 1)])
    s = np.cumsum(d)
    if s[-1] == 0:
        return images
    s /= s[-1]
    target = np.linspace(0.0, 1.0, len(images))
    out = [images[0]]
    for t in target[1:-1]:
        j = min(int(np.searchsorted(s, t, side="right")) - 1, len(images) - 2)
        w = (t - s[j]) / (s[j + 1] - s[j]) if s[j + 1] > s[j] else 0.0
        out.append((1 - w) * images[j] + w * images[j + 1])
    out.append(images[-1])
    return out


def initial_path(grid: TorusGrid, eps: float, n_images: int, kind: str = "linear",
                 seed: int = 0, noise: float = 0.1) -> list[np.ndarray]:
    """Starting path between the wells.

    ``linear`` joins the constants with a seeded smooth perturbation that vanishes
    at the endpoints; ``slab`` grows a band of the ``+1`` phase across the first axis.
    """
    t = np.linspace(0.0, 1.0, n_images)
    if kind == "linear":
        rng = np.random.default_rng(seed)
        x = grid.coords
        pert = np.zeros(grid.shape)
        for _ in range(6):
            k = rng.integers(-2, 3, size=grid.dim)
            ph = rng.uniform(0, 2 * np.pi)
            pert += rng.standard_normal() * np.cos(
                sum(2 * np.pi * k[a] * x[a] / grid.lengths[a] for a in range(grid.dim)) + ph)
        pert *= noise / max(np.max(np.abs(pert)), 1e-300)
        return [(-1.0 + 2.0 * s) * np.ones(grid.shape) + 4.0 * s * (1 - s) * pert for s in t]
    if kind == "slab":
        L = grid.lengths[0]
        d = grid.coords[0] - 0.5 * L
        dist = np.abs(d - L * np.round(d / L))
        out = []
        for s in t:
            r = -0.1 * L + s * 0.7 * L
            out.append(np.tanh((r - dist) / (math.sqrt(2.0) * eps)))
        out[0] = -np.ones(grid.shape)
        out[-1] = np.ones(grid.shape)
        return out
    raise ValueError(f"unknown initial path {kind!r}")


def mountain_pass(grid: TorusGrid, eps: float, endpoints=(-1.0, 1.0), path_points: int = 16,
                  tol_res: float = 1e-9, max_iter: int = 4000, seed: int = 0,
                  e_min: float = 1e-3, path: str = "linear", dt: float | None = None,
                  climb_after: int = 200, potential: Potential = QUARTIC,
                  max_index: int = 1) -> CriticalPoint:
    """Discrete-path mountain pass between the two constant wells.

    Interior images take stabilised semi-implicit descent steps and are
    redistributed by arclength; once the string settles the highest image
    (lowest index on ties) climbs along the path tangent.  The climbing image
    is polished by :func:`newton_refine` and its Morse index certified.
    """
    a, b = (float(v) for v in endpoints)
    if a == b:
        raise DegeneratePath(f"endpoints coincide ({a})")
    if path_points < 16:
        raise ValueError(f"path_points must be >= 16, got {path_points}")
    flags = []
    diam = 0.5 * math.sqrt(sum(L * L for L in grid.lengths))
    if eps >= diam:
        msg = f"interface width eps={eps} exceeds torus diameter {diam:.3g}"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        flags.append("eps_exceeds_diameter")
    images = initial_path(grid, eps, path_points, path, seed)
    images[0] = np.full(grid.shape, a)
    images[-1] = np.full(grid.shape, b)
    dt = dt if dt is not None else 2.0 * eps**2
    S = 1.0 / eps**2
    solve = _ImplicitSolver(grid, 1.0 / dt + S)
    entry = 1e-1 * (1.0 + eps**-2)
    climber = None
    energies = []
    for it in range(max_iter):
        new = [images[0]]
        for j in range(1, len(images) - 1):
            u = images[j]
            rhs = (1.0 / dt + S) * u - potential.dW(u) / eps**2
            if j == climber:
                tau = images[j + 1] - images[j - 1]
                tau /= math.sqrt(_inner(grid, tau, tau))
                r = residual(grid, u, eps, potential)
                rhs -= 2.0 * _inner(grid, r, tau) * tau
            new.append(solve(rhs))
        new.append(images[-1])
        if climber is None:
            images = _reparametrize(grid, new)
        else:
            # keep the climber fixed, redistribute each side
            left = _reparametrize(grid, new[: climber + 1])
            right = _reparametrize(grid, new[climber:])
            images = left + right[1:]
        energies = [energy(grid, u, eps, potential=potential).total for u in images]
        if climber is None and it >= climb_after:
            interior = energies[1:-1]
            climber = 1 + int(np.argmax(interior))  # argmax picks the lowest index on ties
        if climber is not None:
            rc = float(np.max(np.abs(residual(grid, images[climber], eps, potential))))
            if rc <= entry * 1e-2:
                break
        if any(not np.isfinite(e) for e in energies):
            raise Divergence("mountain pass path became non-finite")
    else:
        raise NonConvergence(f"mountain pass did not settle in {max_iter} iterations", steps=max_iter)
    top = images[climber]
    p = newton_refine(grid, top, eps, tol_res, potential=potential)
    p.method = "mountain_pass"
    p.flags = flags
    p.history["path_energy"] = energies
    p.history["path_iterations"] = it + 1
    certify(p, potential)
    if p.energy.total < e_min:
        raise NonConvergence(f"mountain pass collapsed to energy {p.energy.total:.3e} < {e_min}")
    if p.morse_index > max_index:
        raise IndexViolation(f"certified Morse index {p.morse_index} exceeds {max_index}", point=p)
    return p


# --------------------------------------------------------------------------
# eps-continuation


@dataclass(frozen=True)
class EpsSchedule:
    """Strictly decreasing eps values with a grid resolution for each step."""

    epsilons: tuple
    resolutions: tuple
    lengths: tuple
    m_min: float = 8.0

    def __post_init__(self):
        eps = [float(e) for e in self.epsilons]
        if len(eps) == 0:
            raise ScheduleError("empty eps schedule")
        if len(self.resolutions) != len(eps):
            raise ScheduleError("one resolution per eps value is required")
        if any(e <= 0 for e in eps):
            raise ScheduleError("eps values must be positive")
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise ScheduleError(f"eps schedule must be strictly decreasing: {eps}")
        for e, res in zip(eps, self.resolutions):
            for L, n in zip(self.lengths, res):
                if e * n / L < self.m_min:
                    raise ScheduleError(
                        f"eps={e} with N={n}, L={L} gives {e * n / L:.2f} nodes per width < {self.m_min}")

    def __len__(self):
        return len(self.epsilons)

    def __iter__(self):
        return iter(zip(self.epsilons, self.resolutions))

    @classmethod
    def with_policy(cls, epsilons, lengths, nodes_per_eps: float = 12.8, multiple: int = 8,
                    max_nodes: int | None = None, m_min: float = 8.0) -> "EpsSchedule":
        """Resolution ``N_a = ceil(nodes_per_eps L_a / eps)`` rounded up to ``multiple``, capped."""
        res = []
        for e in epsilons:
            r = []
            for L in lengths:
                n = int(math.ceil(nodes_per_eps * L / e / multiple - 1e-9)) * multiple
                if max_nodes is not None:
                    n = min(n, max_nodes)
                r.append(n)
            res.append(tuple(r))
        return cls(tuple(float(e) for e in epsilons), tuple(res), tuple(float(L) for L in lengths), m_min)

    def to_dict(self):
        return {"epsilons": list(self.epsilons), "resolutions": [list(r) for r in self.resolutions],
                "lengths": list(self.lengths), "m_min": self.m_min}


def interpolate(grid: TorusGrid, u: np.ndarray, target: TorusGrid) -> np.ndarray:
    """Periodic cubic-spline transfer of ``u`` onto ``target``."""
    if target.shape == grid.shape:
        return np.array(u, dtype=float)
    coords = np.stack([target.coords[a] / grid.spacing[a] for a in range(grid.dim)])
    return ndimage.map_coordinates(u, coords, order=3, mode="grid-wrap")


def continue_in_eps(seed: CriticalPoint, schedule: EpsSchedule, tol_res: float = 1e-9,
                    potential: Potential = QUARTIC, max_index: int | None = None,
                    max_steps: int = 20000) -> list[CriticalPoint]:
    """Follow ``seed`` along ``schedule``; each step interpolates then re-converges."""
    if seed.residual_linf > max(tol_res, 1e-6 * (1 + seed.epsilon**-2)):
        raise ValueError(f"seed is not converged (residual {seed.residual_linf:.3e})")
    out = []
    prev = seed
    e0 = None
    for step, (eps, res) in enumerate(schedule):
        grid = prev.grid.with_resolution(res)
        u0 = interpolate(prev.grid, prev.u, grid)
        try:
            if step == 0 and eps == seed.epsilon and grid.shape == seed.grid.shape:
                p = seed
                if p.residual_linf > tol_res:
                    p = newton_refine(grid, p.u, eps, tol_res, potential=potential)
                    p.method = seed.method
                if p.morse_index is None:
                    certify(p, potential)
            else:
                p = solve(grid, u0, eps, tol_res, max_steps=max_steps, potential=potential)
                p.method = f"continuation({seed.method})"
        except Exception as exc:
            exc.args = (f"continuation step {step} (eps={eps}): {exc}",) + exc.args[1:]
            raise
        if p.sup_norm > 1.0 + TOL_OVERSHOOT:
            p.flags.append("sup_norm_exceeds_1")
        e0 = p.energy.total if e0 is None else max(e0, p.energy.total)
        p.history["energy_bound"] = e0
        if out and p.morse_index is not None and out[-1].morse_index is not None:
            if p.morse_index > out[-1].morse_index:
                p.flags.append("index_increased")
        if max_index is not None and p.morse_index is not None and p.morse_index > max_index:
            raise IndexViolation(f"step {step}: index {p.morse_index} exceeds {max_index}", point=p)
        out.append(p)
        prev = p
    return out
