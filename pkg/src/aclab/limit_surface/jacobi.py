"""Scalar Jacobi operator of the limit interface and its spectra."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .. import domain
from ..allen_cahn import QUARTIC, Potential, second_variation
from ..domain import TorusGrid, as_mask
from ..errors import (DegenerateLevelSet, EmptyRegion, InsufficientSchedule, MultiplicityAmbiguous,
                      TubeOverlap, ZeroNorm)
from ..lanczos import count_below, smallest_eigenpairs
from ..spectrum import SpectrumResult
from ..varifold import mass
from .mesh import SurfaceMesh, _min_image, min_face_angle

DENSE_LIMIT = 2500
MIN_ANGLE_DEG = 15.0
PLATEAU = 0.8  # cutoff plateau of the bulk transfer, as a fraction of the tube


@dataclass
class JacobiOperator:
    """``-L_V = -Delta_V - (|A|^2 + Ric(nu, nu))`` on masked surface nodes.

    ``stiffness`` and ``mass`` are the unweighted (multiplicity one) forms over
    all surface nodes; Dirichlet conditions hold off ``mask``.
    """

    surface: SurfaceMesh
    mask: np.ndarray
    potential: np.ndarray
    stiffness: sp.csr_matrix
    mass: np.ndarray
    component: np.ndarray
    label: str = "full"

    @property
    def index(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    def weights(self, multiplicities=None) -> np.ndarray:
        if multiplicities is None:
            return np.ones(len(self.mass))
        theta = np.asarray(multiplicities, dtype=float)
        if np.any(theta <= 0):
            raise ValueError("multiplicities must be positive")
        return theta[self.component]

    def matrix(self, multiplicities=None, weighted: bool = False) -> sp.csr_matrix:
        """Symmetrised ``M^{-1/2} (K - M q) M^{-1/2}`` on the mask, optionally Theta-weighted."""
        idx = self.index
        th = self.weights(multiplicities) if weighted else np.ones(len(self.mass))
        K = sp.diags(th) @ self.stiffness
        m = th * self.mass
        K = K[idx][:, idx]
        m = m[idx]
        s = 1.0 / np.sqrt(m)
        A = sp.diags(s) @ K @ sp.diags(s) - sp.diags(self.potential[idx])
        return ((A + A.T) * 0.5).tocsr()

    def quadratic_form(self, phi, multiplicities=None) -> tuple[float, float]:
        """``(B_V(phi, phi), ||phi||^2_{L^2(V)})`` with multiplicity weights."""
        phi = np.asarray(phi, dtype=float)
        th = self.weights(multiplicities)
        phi = np.where(self.mask, phi, 0.0)
        Kphi = self.stiffness @ phi
        num = float(np.sum(th * phi * Kphi) - np.sum(th * self.mass * self.potential * phi**2))
        den = float(np.sum(th * self.mass * phi**2))
        return num, den


def _curve_forms(comp):
    n = comp.n_nodes
    h = comp.spacing
    i = np.arange(n)
    j = (i + 1) % n
    rows = np.concatenate([i, j, i, j])
    cols = np.concatenate([i, j, j, i])
    vals = np.concatenate([np.full(n, 1.0 / h)] * 2 + [np.full(n, -1.0 / h)] * 2)
    K = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return K, np.full(n, h)


def _surface_forms(comp, lengths, metric):
    L = np.asarray(lengths)
    v = comp.vertices
    f = comp.faces
    n = len(v)
    rows, cols, vals = [], [], []
    area = np.zeros(len(f))
    for k in range(3):
        a, b, c = f[:, k], f[:, (k + 1) % 3], f[:, (k + 2) % 3]
        e1 = _min_image(v[b] - v[a], L)
        e2 = _min_image(v[c] - v[a], L)
        cr = np.linalg.norm(np.cross(e1, e2), axis=1)
        cot = np.sum(e1 * e2, axis=1) / cr
        # the angle at ``a`` weights the opposite edge (b, c)
        w = 0.5 * cot
        rows += [b, c, b, c]
        cols += [c, b, b, c]
        vals += [-w, -w, w, w]
        if k == 0:
            area = 0.5 * cr
    K = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    if not metric.is_flat:
        L_ = np.asarray(lengths)
        e1 = _min_image(v[f[:, 1]] - v[f[:, 0]], L_)
        e2 = _min_image(v[f[:, 2]] - v[f[:, 0]], L_)
        cent = np.mod(v[f[:, 0]] + (e1 + e2) / 3.0, L_)
        area = area * np.exp(2 * metric.f(cent.T, lengths))
    mass = np.bincount(f.ravel(), weights=np.repeat(area / 3.0, 3), minlength=n)
    return K, mass


def jacobi_operator(surface: SurfaceMesh, mask=None, include_ricci: bool = True,
                    quality_gate: bool = True, label: str | None = None) -> JacobiOperator:
    """Discrete ``L_V`` on the nodes of ``surface`` selected by ``mask``.

    ``mask`` may be ``None`` (all nodes), a :class:`aclab.domain.Region` or a
    boolean array over the concatenated surface nodes.
    """
    if not surface.components:
        raise EmptyRegion("surface has no components")
    m = surface.region_mask(mask)
    if not m.any():
        raise EmptyRegion("surface mask is empty")
    Ks, masses, pots, comp_ids = [], [], [], []
    for ci, comp in enumerate(surface.components):
        if comp.kind == "curve":
            K, M = _curve_forms(comp)
        else:
            if quality_gate:
                ang = min_face_angle(comp, surface.lengths)
                if ang < MIN_ANGLE_DEG:
                    raise DegenerateLevelSet(f"component {ci}: minimum triangle angle {ang:.1f} deg "
                                             f"below the {MIN_ANGLE_DEG} deg quality gate")
            K, M = _surface_forms(comp, surface.lengths, surface.metric)
        q = comp.curvature_sq.copy()
        if include_ricci and not surface.metric.is_flat:
            pts = np.mod(comp.vertices, np.asarray(surface.lengths)).T
            ric = surface.metric.ricci_frame(pts, surface.lengths)
            q = q + np.einsum("ab...,...a,...b->...", ric, comp.normals, comp.normals)
        Ks.append(K)
        masses.append(M)
        pots.append(q)
        comp_ids.append(np.full(comp.n_nodes, ci))
    if label is None:
        label = getattr(mask, "label", "full" if mask is None else "mask")
    return JacobiOperator(surface, m, np.concatenate(pots), sp.block_diag(Ks, format="csr"),
                          np.concatenate(masses), np.concatenate(comp_ids), label)


def jacobi_spectrum(op: JacobiOperator, p: int, multiplicities=None, weighted: bool = False,
                    solver: str = "auto", vectors: bool = False) -> SpectrumResult:
    """``p`` smallest ``lambda`` with ``L_V phi + lambda phi = 0`` (Dirichlet off the mask).

    ``weighted`` scales both the Dirichlet form and the ``L^2`` product by the
    multiplicity of each component.
    """
    A = op.matrix(multiplicities, weighted)
    n = A.shape[0]
    if p < 1 or p > n:
        raise ValueError(f"need 1 <= p <= {n}, got {p}")
    if solver == "auto":
        solver = "dense" if n <= DENSE_LIMIT else "lanczos"
    if solver == "dense":
        vals, vecs = np.linalg.eigh(A.toarray())
        vals, vecs = vals[:p], vecs[:, :p]
    else:
        res = smallest_eigenpairs(A, p)
        vals, vecs = res.eigenvalues, res.eigenvectors
    resid = np.array([np.linalg.norm(A @ vecs[:, i] - vals[i] * vecs[:, i]) for i in range(p)])
    return SpectrumResult(np.asarray(vals), solver, resid, vecs if vectors else None, op.label,
                          {"weighted": weighted})


def jacobi_index(op: JacobiOperator, tol_zero: float = 1e-8, multiplicities=None) -> int:
    """Number of eigenvalues below ``-tol_zero`` (by inertia, dense fallback)."""
    A = op.matrix(multiplicities, multiplicities is not None)
    c = count_below(A, -tol_zero)
    if c is None:
        c = int(np.sum(np.linalg.eigvalsh(A.toarray()) < -tol_zero))
    return c


# --------------------------------------------------------------------------
# test-function transfer


def cutoff(t, plateau: float = 0.5):
    """C^1 cutoff: 1 on ``[0, plateau)``, 0 on ``[1, inf)``, cubic smoothstep between."""
    if not 0.0 <= plateau < 1.0:
        raise ValueError(f"plateau must lie in [0, 1), got {plateau}")
    t = np.asarray(t, dtype=float)
    s = np.clip((t - plateau) / (1.0 - plateau), 0.0, 1.0)
    return 1.0 - s * s * (3.0 - 2.0 * s)


class SurfaceProjector:
    """Nearest-point projection onto the (piecewise-linear) surface.

    Curves project onto their segments, surfaces onto the triangles around the
    nearest vertex.  Values of node functions are interpolated linearly.
    """

    def __init__(self, surface: SurfaceMesh):
        if not surface.components:
            raise EmptyRegion("surface has no components")
        self.surface = surface
        self.L = np.asarray(surface.lengths, dtype=float)
        self.points = surface.node_points()
        self.comp = surface.component_ids()
        self.offsets = np.cumsum([0] + [c.n_nodes for c in surface.components])
        self.tree = cKDTree(self.points % self.L, boxsize=self.L)
        self._incident = []
        for c in surface.components:
            if c.kind == "surface":
                inc = [[] for _ in range(c.n_nodes)]
                for fi, tri in enumerate(c.faces):
                    for v in tri:
                        inc[v].append(fi)
                self._incident.append(inc)
            else:
                self._incident.append(None)

    def project(self, x: np.ndarray):
        """For points ``x`` of shape ``(m, dim)``: distance, component id, node indices and weights."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        _, nearest = self.tree.query(np.mod(x, self.L) % self.L)
        m = len(x)
        dist = np.empty(m)
        comp = self.comp[nearest]
        nodes = np.zeros((m, 3), dtype=int)
        weights = np.zeros((m, 3))
        for ci, c in enumerate(self.surface.components):
            sel = np.flatnonzero(comp == ci)
            if sel.size == 0:
                continue
            off = self.offsets[ci]
            local = nearest[sel] - off
            if c.kind == "curve":
                d, n3, w3 = self._project_curve(c, x[sel], local)
            else:
                d, n3, w3 = self._project_surface(c, ci, x[sel], local)
            dist[sel] = d
            nodes[sel] = n3 + off
            weights[sel] = w3
        return dist, comp, nodes, weights

    def _project_curve(self, c, x, i):
        n = c.n_nodes
        best_d = np.full(len(x), np.inf)
        nodes = np.zeros((len(x), 3), dtype=int)
        w = np.zeros((len(x), 3))
        for a, b in ((i - 1) % n, i), (i, (i + 1) % n):
            pa = c.vertices[a]
            seg = _min_image(c.vertices[b] - pa, self.L)
            rel = _min_image(x - pa, self.L)
            t = np.clip(np.sum(rel * seg, axis=1) / np.sum(seg * seg, axis=1), 0.0, 1.0)
            d = np.linalg.norm(rel - t[:, None] * seg, axis=1)
            better = d < best_d
            best_d = np.where(better, d, best_d)
            nodes[better, 0] = a[better]
            nodes[better, 1] = b[better]
            w[better, 0] = 1.0 - t[better]
            w[better, 1] = t[better]
        return best_d, nodes, w

    def _project_surface(self, c, ci, x, i):
        inc = self._incident[ci]
        m = len(x)
        best_d = np.linalg.norm(_min_image(x - c.vertices[i], self.L), axis=1)
        nodes = np.zeros((m, 3), dtype=int)
        nodes[:, 0] = i
        w = np.zeros((m, 3))
        w[:, 0] = 1.0
        for k in range(m):
            for fi in inc[i[k]]:
                tri = c.faces[fi]
                p0 = c.vertices[tri[0]]
                e1 = _min_image(c.vertices[tri[1]] - p0, self.L)
                e2 = _min_image(c.vertices[tri[2]] - p0, self.L)
                r = _min_image(x[k] - p0, self.L)
                G = np.array([[e1 @ e1, e1 @ e2], [e1 @ e2, e2 @ e2]])
                ab = np.linalg.solve(G, [r @ e1, r @ e2])
                if ab[0] < 0 or ab[1] < 0 or ab.sum() > 1:
                    continue
                d = np.linalg.norm(r - ab[0] * e1 - ab[1] * e2)
                if d < best_d[k]:
                    best_d[k] = d
                    nodes[k] = tri
                    w[k] = (1.0 - ab.sum(), ab[0], ab[1])
        return best_d, nodes, w

    def evaluate(self, phi_nodes, x, tau: float | None = None, plateau: float = 0.5):
        """``phi(pi(x)) * cutoff(d(x) / tau, plateau)`` at points ``x``; no cutoff when ``tau`` is None."""
        phi_nodes = np.asarray(phi_nodes, dtype=float)
        d, _, nodes, w = self.project(x)
        val = np.sum(phi_nodes[nodes] * w, axis=1)
        if tau is not None:
            val = val * cutoff(d / tau, plateau)
        return val


def transfer_test_function(surface: SurfaceMesh, phi_surface, grid: TorusGrid, tau: float,
                           mask=None, plateau: float = PLATEAU) -> np.ndarray:
    """Extend surface node values to the bulk, constant along normals in the ``plateau tau`` tube.

    The extension is ``phi(pi(x)) eta(d_V(x) / tau)`` with ``pi`` the nearest-point
    projection; it vanishes off ``mask`` when one is given.  A wide plateau keeps
    the cutoff gradient where ``|grad u|`` is exponentially small.
    """
    phi_surface = np.asarray(phi_surface, dtype=float)
    if phi_surface.shape != (surface.n_nodes,):
        raise ValueError(f"need {surface.n_nodes} surface values, got shape {phi_surface.shape}")
    if not tau > 0:
        raise ValueError(f"tube width must be positive, got {tau}")
    sep = surface.min_separation()
    if tau > 0.5 * sep:
        raise TubeOverlap(f"tube width {tau} exceeds half the component separation {sep:.4g}")
    proj = SurfaceProjector(surface)
    pts = grid.coords.reshape(grid.dim, -1).T
    out = proj.evaluate(phi_surface, pts, tau, plateau).reshape(grid.shape)
    if mask is not None:
        out = out * as_mask(grid, mask)
    return out


@dataclass
class RayleighTransfer:
    J_V: float
    epsilons: list
    J_i: list
    tail_max: float
    slack: float

    @property
    def holds(self) -> bool:
        return bool(self.J_V >= self.tail_max - self.slack)

    def to_dict(self) -> dict:
        return {"J_V": self.J_V, "epsilons": list(self.epsilons), "J_i": list(self.J_i),
                "tail_max": self.tail_max, "slack": self.slack,
                "status": "PASS" if self.holds else "FAIL"}


def rayleigh_quotient_bulk(grid: TorusGrid, u, eps: float, psi, potential: Potential = QUARTIC) -> float:
    """``J_i(psi) = eps^{-1} d^2 E(psi, psi) / ||psi||^2``, the eigenvalue-convention quotient."""
    den = domain.integrate(grid, psi * psi)
    if den <= 0:
        raise ZeroNorm("bulk test function vanishes")
    return second_variation(grid, u, eps, psi, None, potential) / eps / den


def rayleigh_transfer_check(points, surface: SurfaceMesh, phi_surface, region=None, tau: float = 0.2,
                            slack: float = 0.05, tail: int = 3, multiplicities=None,
                            potential: Potential = QUARTIC) -> RayleighTransfer:
    """Compare ``J_V(phi)`` with ``J_i(|grad u_i| phi_i)`` along a schedule.

    ``points`` are converged :class:`~aclab.critical_points.CriticalPoint` objects
    (or ``(grid, u, eps)`` triples).  The check holds when ``J_V`` is no smaller
    than the largest of the last ``tail`` quotients minus ``slack (1 + |J_V|)``.
    """
    op = jacobi_operator(surface, region)
    num, den = op.quadratic_form(phi_surface, multiplicities)
    if den <= 0:
        raise ZeroNorm("test function vanishes on the masked surface")
    J_V = num / den
    phi_m = np.where(op.mask, np.asarray(phi_surface, dtype=float), 0.0)
    eps_list, J = [], []
    for pt in points:
        grid, u, eps = (pt.grid, pt.u, pt.epsilon) if hasattr(pt, "grid") else pt
        m = None if region is None else as_mask(grid, region)
        phi = transfer_test_function(surface, phi_m, grid, tau, m)
        gn = np.sqrt(domain.norm_sq(domain.gradient(grid, u)))
        J.append(rayleigh_quotient_bulk(grid, u, eps, gn * phi, potential))
        eps_list.append(float(eps))
    if not J:
        raise InsufficientSchedule("no schedule points")
    tail_max = float(max(J[-tail:]))
    return RayleighTransfer(float(J_V), eps_list, [float(j) for j in J], tail_max,
                            slack * (1.0 + abs(J_V)))


# --------------------------------------------------------------------------
# verdicts


@dataclass
class SpectralVerdict:
    rows: list
    index_V: int
    k: int
    tol_zero: float

    @property
    def spectral_pass(self) -> bool:
        return all(r["status"] == "PASS" for r in self.rows)

    @property
    def index_pass(self) -> bool:
        return self.index_V <= self.k

    def to_dict(self) -> dict:
        return {"spectral_lower_bound": self.rows,
                "index_bound": {"status": "PASS" if self.index_pass else "FAIL",
                                "index_V": self.index_V, "k": self.k, "tol_zero": self.tol_zero},
                "sing_V": "empty (desk scale)"}


def spectral_verdict(lambda_V: dict, table: dict, k: int, slack: float = 0.05, tail: int = 3,
                     tol_zero: float = 1e-8, index_V: int | None = None) -> SpectralVerdict:
    """Lower-bound verdict per region and ``p`` plus the index bound.

    ``lambda_V[region]`` lists ``lambda_p(W)``; ``table[region]`` holds one list of
    ``lambda_p^i(W)`` per schedule point (ordered by decreasing eps).  The
    limsup is the max over the last ``tail`` points; the tolerance is
    ``slack (1 + |lambda_p(W)|)``.
    """
    if tail < 1:
        raise ValueError("tail must be positive")
    rows = []
    for region, lam in lambda_V.items():
        seq = table.get(region, [])
        if len(seq) < max(3, tail):
            raise InsufficientSchedule(f"region {region!r} has {len(seq)} schedule points, need "
                                       f"{max(3, tail)}")
        last = seq[-tail:]
        for p, lv in enumerate(lam, start=1):
            vals = [float(s[p - 1]) for s in last if len(s) >= p]
            if not vals:
                continue
            lim = max(vals)
            tol = slack * (1.0 + abs(lv))
            rows.append({"region": region, "p": p, "lambda_V": float(lv), "limsup_i": lim,
                         "tolerance": tol, "status": "PASS" if lv >= lim - tol else "FAIL"})
    if index_V is None:
        index_V = max((int(np.sum(np.asarray(lam) < -tol_zero)) for lam in lambda_V.values()), default=0)
    return SpectralVerdict(rows, int(index_V), int(k), tol_zero)


# --------------------------------------------------------------------------
# shrinking balls


@dataclass
class ShrinkingBallTable:
    radii: list
    values: np.ndarray
    base: np.ndarray
    monotone: bool
    flags: list

    @property
    def gaps(self) -> np.ndarray:
        return self.values[-1] - self.base

    def to_dict(self) -> dict:
        return {"radii": list(self.radii), "values": self.values.tolist(), "base": self.base.tolist(),
                "gaps": self.gaps.tolist(), "monotone": self.monotone, "flags": list(self.flags)}


def shrinking_ball_spectrum(surface: SurfaceMesh, region, y, radii, p: int,
                            multiplicities=None, rel_tol: float = 0.1) -> ShrinkingBallTable:
    """``lambda_q(W minus closed B(y, R_m))`` for ``q <= p`` along decreasing radii.

    For curves the punctured spectra do not approach ``lambda_q(W)`` (points have
    positive capacity in one dimension); the table is then flagged rather than
    checked.  For surfaces a gap above ``rel_tol (1 + |lambda_q|)`` is flagged.
    """
    radii = [float(r) for r in radii]
    if not radii or any(r <= 0 for r in radii) or any(b >= a for a, b in zip(radii, radii[1:])):
        raise ValueError("radii must be positive and strictly decreasing")
    base_mask = surface.region_mask(region)
    base_op = jacobi_operator(surface, base_mask)
    base = jacobi_spectrum(base_op, min(p, int(base_mask.sum())), multiplicities, True).eigenvalues
    pts = surface.node_points()
    L = np.asarray(surface.lengths, dtype=float)
    dist = np.linalg.norm(_min_image(pts - np.asarray(y, dtype=float), L), axis=1)
    values = np.full((len(radii), len(base)), np.nan)
    for m, r in enumerate(radii):
        mk = base_mask & (dist > r)
        q = min(len(base), int(mk.sum()))
        if q == 0:
            continue
        op = jacobi_operator(surface, mk)
        values[m, :q] = jacobi_spectrum(op, q, multiplicities, True).eigenvalues
    diffs = np.diff(values, axis=0)
    monotone = bool(np.all(np.nan_to_num(diffs, nan=0.0) <= 1e-9 * (1.0 + np.nan_to_num(np.abs(values[:-1])))))
    flags = []
    if surface.dim - 1 < 2:
        flags.append("outside capacity hypothesis (intrinsic dimension 1)")
    elif np.any(values[-1] - base > rel_tol * (1.0 + np.abs(base))):
        flags.append("gap above tolerance at smallest radius")
    if not monotone:
        flags.append("not monotone")
    return ShrinkingBallTable(radii, values, np.asarray(base), monotone, flags)


# --------------------------------------------------------------------------
# multiplicity


@dataclass
class MultiplicityEstimate:
    theta: list
    ratios: np.ndarray
    tube: float
    surface: SurfaceMesh


def estimate_multiplicity(varifolds, surface: SurfaceMesh, tube: float | None = None,
                          window: float = 0.2) -> MultiplicityEstimate:
    """``Theta_C = round(||V||(tube around C) / |C|)`` from the last varifold of the sequence.

    Grid nodes are assigned to the nearest component; the tube defaults to
    ``0.45`` of the component separation (capped at a quarter of the shortest
    period).  Ratios of all varifolds are reported.
    """
    varifolds = list(varifolds)
    if not varifolds:
        raise ValueError("need at least one varifold")
    if not surface.components:
        raise EmptyRegion("surface has no components")
    L = np.asarray(surface.lengths, dtype=float)
    if tube is None:
        tube = min(0.45 * surface.min_separation(), 0.25 * float(L.min()))
    tree = cKDTree(surface.node_points() % L, boxsize=L)
    comp_ids = surface.component_ids()
    measures = np.array([c.measure for c in surface.components])
    ratios = np.zeros((len(varifolds), len(surface.components)))
    for i, V in enumerate(varifolds):
        g = V.grid
        d, idx = tree.query(np.mod(g.coords.reshape(g.dim, -1).T, L) % L)
        near = comp_ids[idx].reshape(g.shape)
        inside = (d < tube).reshape(g.shape)
        for ci in range(len(measures)):
            ratios[i, ci] = mass(V, inside & (near == ci)) / measures[ci]
    theta = []
    for ci, r in enumerate(ratios[-1]):
        n = int(round(r))
        if n < 1 or abs(r - n) > window:
            raise MultiplicityAmbiguous(f"component {ci}: mass ratio {r:.3f} is not within {window} "
                                        f"of a positive integer", ratio=float(r))
        theta.append(n)
    comps = [replace(c, multiplicity=t) for c, t in zip(surface.components, theta)]
    return MultiplicityEstimate(theta, ratios, float(tube), replace(surface, components=comps))
