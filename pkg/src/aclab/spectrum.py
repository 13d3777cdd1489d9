"""Linearised Allen-Cahn operators on regions, their low spectrum and Morse indices.

Sign convention: ``lambda`` is an eigenvalue of ``L = Lap - eps^-2 W''(u)`` when
``L phi + lambda phi = 0``, i.e. ``lambda`` is an eigenvalue of ``-L`` and the
Morse index counts negative ``lambda``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import domain
from .allen_cahn import QUARTIC, Potential
from .domain import Ball, TorusGrid
from .errors import CoverageFailure, EmptyRegion, MonotonicityViolation
from .lanczos import count_below, smallest_eigenpairs

log = logging.getLogger(__name__)

DENSE_LIMIT = 4096


@dataclass
class SchrodingerOperator:
    """``-L`` restricted to masked nodes with zero (Dirichlet) values outside.

    ``matrix`` is the symmetrised form ``M^{-1/2} (K + M q) M^{-1/2}`` on the
    masked nodes, ``q = eps^-2 W''(u)``; eigenvectors ``y`` map back to nodal
    functions via ``phi = M^{-1/2} y``.
    """

    grid: TorusGrid
    mask: np.ndarray
    potential_term: np.ndarray
    matrix: sp.csr_matrix
    eps: float
    label: str = "full"

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    @property
    def index(self) -> np.ndarray:
        return np.flatnonzero(self.mask.ravel())

    def apply(self, phi: np.ndarray) -> np.ndarray:
        """Nodal ``-L phi`` for ``phi`` vanishing off the mask (returns zeros there)."""
        w = self.grid.volume_weights.ravel()[self.index]
        y = np.sqrt(w) * np.asarray(phi).ravel()[self.index]
        out = np.zeros(self.grid.size)
        out[self.index] = (self.matrix @ y) / np.sqrt(w)
        return out.reshape(self.grid.shape)

    def to_nodal(self, y: np.ndarray) -> np.ndarray:
        w = self.grid.volume_weights.ravel()[self.index]
        out = np.zeros(self.grid.size)
        out[self.index] = y / np.sqrt(w)
        return out.reshape(self.grid.shape)

    def max_asymmetry(self) -> float:
        d = abs(self.matrix - self.matrix.T)
        return float(d.max()) if d.nnz else 0.0


def assemble(grid: TorusGrid, u, eps: float, mask=None, potential: Potential = QUARTIC,
             label: str | None = None) -> SchrodingerOperator:
    if not (eps > 0):
        raise ValueError(f"epsilon must be positive, got {eps}")
    u = domain._check(grid, u)
    m = domain.as_mask(grid, mask)
    if not m.any():
        raise EmptyRegion("region mask is empty")
    q = potential.d2W(u) / eps**2
    idx = np.flatnonzero(m.ravel())
    K = grid.stiffness[idx][:, idx]
    w = grid.volume_weights.ravel()[idx]
    s = 1.0 / np.sqrt(w)
    A = sp.diags(s) @ K @ sp.diags(s) + sp.diags(q.ravel()[idx])
    A = ((A + A.T) * 0.5).tocsr()
    if label is None:
        label = getattr(mask, "label", "full" if mask is None else "mask")
    return SchrodingerOperator(grid, m, q, A, eps, label)


@dataclass
class SpectrumResult:
    eigenvalues: np.ndarray
    solver: str
    residuals: np.ndarray
    eigenvectors: np.ndarray | None = None
    label: str = "full"
    meta: dict = field(default_factory=dict)

    @property
    def p(self) -> int:
        return len(self.eigenvalues)

    def __getitem__(self, q):
        """1-based access matching lambda_1 <= lambda_2 <= ..."""
        return float(self.eigenvalues[q - 1])


def eigen_smallest(op: SchrodingerOperator, p: int, solver: str = "auto", *, tol: float = 1e-10,
                   vectors: bool = False, seed: int = 0) -> SpectrumResult:
    """``p`` smallest eigenvalues of ``-L`` on the masked region."""
    n = op.size
    if p < 1 or p > n:
        raise ValueError(f"need 1 <= p <= {n}, got {p}")
    if solver == "auto":
        solver = "dense" if n <= 400 else "lanczos"
    if solver == "dense":
        if n > DENSE_LIMIT:
            raise ValueError(f"dense oracle limited to {DENSE_LIMIT} unknowns, got {n}")
        vals, vecs = np.linalg.eigh(op.matrix.toarray())
        vals, vecs = vals[:p], vecs[:, :p]
    elif solver == "lanczos":
        res = smallest_eigenpairs(op.matrix, p, tol=tol, seed=seed)
        vals, vecs = res.eigenvalues, res.eigenvectors
    else:
        raise ValueError(f"unknown solver {solver!r}")
    resid = np.array([np.linalg.norm(op.matrix @ vecs[:, i] - vals[i] * vecs[:, i])
                      for i in range(len(vals))])
    return SpectrumResult(np.asarray(vals), solver, resid, vecs if vectors else None, op.label)


def zero_tolerance(eps: float) -> float:
    return 1e-7 * (1.0 + eps**-2)


@dataclass
class IndexResult:
    index: int
    near_zero: list
    eigenvalues: np.ndarray
    tol_zero: float

    def __int__(self):
        return self.index


def morse_index_detail(grid, u, eps, mask=None, potential: Potential = QUARTIC,
                       solver: str = "auto", p_report: int = 4) -> IndexResult:
    """Index and near-zero eigenvalues of ``-L`` on the mask.

    Counts come from the inertia of ``A -+ tol_zero I`` whenever the symmetric
    factorisation reveals it; otherwise eigenvalues are computed until one
    exceeds ``tol_zero``.  ``eigenvalues`` lists at least ``p_report`` of the
    smallest eigenvalues and always covers the negative and near-zero ones.
    """
    op = assemble(grid, u, eps, mask, potential)
    tz = zero_tolerance(eps)
    n = op.size
    neg = count_below(op.matrix, -tz)
    upto = count_below(op.matrix, tz) if neg is not None else None
    if neg is not None and upto is not None:
        p = min(n, max(p_report, upto + 1))
        vals = eigen_smallest(op, p, solver).eigenvalues
    else:
        p = min(p_report, n)
        while True:
            vals = eigen_smallest(op, p, solver).eigenvalues
            if vals[-1] >= tz or p == n:
                break
            p = min(n, 2 * p)
        neg = int(np.sum(vals < -tz))
    near = [float(v) for v in vals if abs(v) <= tz]
    return IndexResult(neg, near, vals, tz)


def morse_index(grid, u, eps, mask=None, potential: Potential = QUARTIC, solver: str = "auto") -> int:
    """Count of eigenvalues below ``-tol_zero``, ``tol_zero = 1e-7 (1 + eps^-2)``."""
    return morse_index_detail(grid, u, eps, mask, potential, solver).index


@dataclass
class MonotonicityReport:
    inner: np.ndarray
    outer: np.ndarray
    strict: list


def spectrum_monotonicity_check(grid, u, eps, inner_mask, outer_mask, p: int,
                                potential: Potential = QUARTIC, solver: str = "auto",
                                tol: float = 1e-9) -> MonotonicityReport:
    """Domain monotonicity ``lambda_q(W1) >= lambda_q(W2)`` for ``W1 in W2``."""
    m1 = domain.as_mask(grid, inner_mask)
    m2 = domain.as_mask(grid, outer_mask)
    if np.any(m1 & ~m2):
        raise ValueError("inner region is not contained in the outer region")
    s1 = eigen_smallest(assemble(grid, u, eps, m1, potential), p, solver).eigenvalues
    s2 = eigen_smallest(assemble(grid, u, eps, m2, potential), p, solver).eigenvalues
    for q in range(p):
        if s1[q] < s2[q] - tol:
            raise MonotonicityViolation(
                f"lambda_{q + 1}(W1) = {s1[q]:.12g} < lambda_{q + 1}(W2) = {s2[q]:.12g}", q=q + 1)
    strict = [q + 1 for q in range(p) if s1[q] > s2[q] + tol]
    return MonotonicityReport(s1, s2, strict)


def index_additivity(grid, u, eps, mask1, mask2, potential: Potential = QUARTIC, solver="auto"):
    """``(ind W1, ind W2, ind W1 u W2)`` for disjoint masks."""
    m1 = domain.as_mask(grid, mask1)
    m2 = domain.as_mask(grid, mask2)
    if np.any(m1 & m2):
        raise ValueError("masks are not disjoint")
    i1 = morse_index(grid, u, eps, m1, potential, solver)
    i2 = morse_index(grid, u, eps, m2, potential, solver)
    i12 = morse_index(grid, u, eps, m1 | m2, potential, solver)
    return i1, i2, i12


@dataclass
class BallStability:
    center: tuple
    radius: float
    index: int
    lambda_1: float

    @property
    def stable(self) -> bool:
        return self.index == 0


def stability_scan(grid, u, eps, ball_centers, radius: float, potential: Potential = QUARTIC,
                   band_level: float = 0.9, solver: str = "auto") -> list[BallStability]:
    """Morse index of ``u`` restricted to each ball; the balls must cover ``{|u| < band_level}``."""
    u = domain._check(grid, u)
    band = np.abs(u) < band_level
    covered = np.zeros(grid.shape, dtype=bool)
    masks = []
    for c in ball_centers:
        m = Ball(tuple(c), radius).mask(grid).mask
        covered |= m
        masks.append(m)
    missed = band & ~covered
    if missed.any():
        raise CoverageFailure(f"{int(missed.sum())} interface nodes lie outside every ball")
    rows = []
    for c, m in zip(ball_centers, masks):
        det = morse_index_detail(grid, u, eps, m, potential, solver, p_report=4)
        rows.append(BallStability(tuple(float(x) for x in c), radius, det.index,
                                  float(det.eigenvalues[0])))
    return rows


def covering_centers(grid: TorusGrid, radius: float) -> list[tuple]:
    """Lattice of centres whose balls of ``radius`` cover the torus."""
    step = radius * 2.0 / np.sqrt(grid.dim) * 0.95
    axes = []
    for L in grid.lengths:
        n = max(1, int(np.ceil(L / step)))
        axes.append((np.arange(n) + 0.5) * L / n)
    mesh = np.meshgrid(*axes, indexing="ij")
    return [tuple(float(m.ravel()[i]) for m in mesh) for i in range(mesh[0].size)]


SPECTRA_COLUMNS = ("run_id", "epsilon", "region_label", "p", "lambda", "solver", "residual")


def spectra_rows(run_id: str, eps: float, spec: SpectrumResult):
    return [(run_id, eps, spec.label, q + 1, float(v), spec.solver, float(r))
            for q, (v, r) in enumerate(zip(spec.eigenvalues, spec.residuals))]
