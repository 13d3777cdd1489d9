"""Zero level sets of grid fields as periodic curves (2-D) or triangle meshes (3-D)."""

from __future__ import annotations

import math
from itertools import product
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline, RegularGridInterpolator
from scipy.ndimage import map_coordinates
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .. import domain
from ..domain import Metric, TorusGrid
from ..errors import DegenerateLevelSet


@dataclass
class SurfaceComponent:
    """One closed component.

    Curves store uniformly resampled vertices (in metric arclength) of an
    unwrapped polyline; ``wrap`` is the lattice vector joining the last vertex
    back to the first.  Surfaces store vertices reduced into the fundamental
    cell with triangles ``faces``.
    """

    vertices: np.ndarray
    normals: np.ndarray
    curvature_sq: np.ndarray
    measure: float
    kind: str
    faces: np.ndarray | None = None
    wrap: np.ndarray | None = None
    spacing: float | None = None
    curvature: np.ndarray | None = None
    multiplicity: int = 1
    flagged: list = field(default_factory=list)

    @property
    def n_nodes(self) -> int:
        return len(self.vertices)


@dataclass
class SurfaceMesh:
    components: list
    dim: int
    lengths: tuple
    metric: Metric

    @property
    def n_nodes(self) -> int:
        return sum(c.n_nodes for c in self.components)

    @property
    def multiplicities(self) -> list[int]:
        return [c.multiplicity for c in self.components]

    def node_points(self) -> np.ndarray:
        """All surface nodes reduced to the fundamental cell, shape ``(n, dim)``."""
        L = np.asarray(self.lengths)
        return np.concatenate([np.mod(c.vertices, L) for c in self.components])

    def component_ids(self) -> np.ndarray:
        return np.concatenate([np.full(c.n_nodes, i) for i, c in enumerate(self.components)])

    def region_mask(self, region) -> np.ndarray:
        """Surface-node mask of a :class:`aclab.domain.Region` (or ``None`` for all nodes)."""
        pts = self.node_points()
        if region is None:
            return np.ones(len(pts), dtype=bool)
        if isinstance(region, np.ndarray):
            if region.shape != (len(pts),):
                raise ValueError("surface mask has the wrong length")
            return region.astype(bool)
        return np.asarray(region.contains(pts.T, self.lengths), dtype=bool)

    def min_separation(self) -> float:
        """Smallest periodic distance between vertices of different components."""
        if len(self.components) < 2:
            return math.inf
        L = np.asarray(self.lengths)
        best = math.inf
        trees = [cKDTree(np.mod(c.vertices, L) % L, boxsize=L) for c in self.components]
        for i in range(len(self.components)):
            for j in range(i + 1, len(self.components)):
                d, _ = trees[j].query(np.mod(self.components[i].vertices, L) % L)
                best = min(best, float(d.min()))
        return best

    def to_dict(self) -> list[dict]:
        return [{"id": i, "measure": c.measure, "multiplicity": c.multiplicity,
                 "flagged": list(c.flagged), "kind": c.kind, "nodes": c.n_nodes}
                for i, c in enumerate(self.components)]


def _min_image(d, L):
    return d - L * np.round(d / L)


# --------------------------------------------------------------------------
# marching squares


def _edge_points(v, h):
    """Zero crossings of ``v`` on the axis-0 and axis-1 edges of a periodic 2-D grid."""
    out = {}
    for axis in (0, 1):
        w = np.roll(v, -1, axis)
        for i, j in np.argwhere(v * w < 0):
            a, b = v[i, j], w[i, j]
            p = np.array([i * h[0], j * h[1]], dtype=float)
            p[axis] += a / (a - b) * h[axis]
            out[(axis, int(i), int(j))] = p
    return out


def _cell_segments(v, i, j, n0, n1):
    """Edge keys joined by segments inside cell ``(i, j)`` (marching squares).

    Corners run ``(i,j), (i+1,j), (i+1,j+1), (i,j+1)``; edge ``k`` joins corners
    ``k`` and ``k+1``.  Saddles are resolved by the sign of the cell average.
    """
    i1, j1 = (i + 1) % n0, (j + 1) % n1
    c = [v[i, j], v[i1, j], v[i1, j1], v[i, j1]]
    edges = [(0, i, j), (1, i1, j), (0, i, j1), (1, i, j)]
    pos = [x > 0 for x in c]
    crossing = [k for k in range(4) if pos[k] != pos[(k + 1) % 4]]
    if len(crossing) == 2:
        return [(edges[crossing[0]], edges[crossing[1]])]
    if len(crossing) == 4:
        if (sum(c) > 0) == pos[0]:
            return [(edges[0], edges[1]), (edges[2], edges[3])]
        return [(edges[3], edges[0]), (edges[1], edges[2])]
    return []


def _trace_curves(u, level, h):
    n0, n1 = u.shape
    v = u - level
    # nudge exact zeros so every crossing lies strictly inside an edge
    v = np.where(v == 0, 1e-300, v)
    pts = _edge_points(v, h)
    pos = v > 0
    mixed = np.zeros_like(pos)
    for di, dj in ((1, 0), (0, 1), (1, 1)):
        mixed |= pos != np.roll(np.roll(pos, -di, 0), -dj, 1)
    adj: dict = {}
    for i, j in np.argwhere(mixed):
        for a, b in _cell_segments(v, int(i), int(j), n0, n1):
            adj.setdefault(a, []).append(b)
            adj.setdefault(b, []).append(a)
    curves = []
    seen = set()
    for start in sorted(adj):
        if start in seen:
            continue
        loop = [start]
        seen.add(start)
        prev, cur = None, start
        while True:
            nxt = [k for k in adj[cur] if k != prev] or adj[cur]
            k = nxt[0]
            if k == start or k in seen:
                break
            loop.append(k)
            seen.add(k)
            prev, cur = cur, k
        curves.append([pts[k] for k in loop])
    return curves


def _unwrap(points, L):
    pts = np.asarray(points)
    steps = _min_image(np.diff(pts, axis=0), L)
    unwrapped = np.vstack([pts[:1], pts[0] + np.cumsum(steps, axis=0)])
    closing = _min_image(pts[0] - pts[-1], L)
    wrap = unwrapped[-1] + closing - unwrapped[0]
    return unwrapped, np.round(wrap / L) * L


def _resample_curve(points, wrap, grid: TorusGrid, n_nodes: int | None, spacing: float | None):
    """Periodic spline through the polyline, resampled uniformly in metric arclength."""
    L = np.asarray(grid.lengths)
    pts = np.asarray(points)
    closed = np.vstack([pts, pts[:1] + wrap])
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = s[-1]
    drift = wrap / total
    y = closed - s[:, None] * drift
    y[-1] = y[0]
    spl = CubicSpline(s, y, bc_type="periodic")
    fine = np.linspace(0.0, total, 16 * len(pts) + 1)
    xf = spl(fine) + fine[:, None] * drift
    dxf = spl(fine, 1) + drift
    speed = np.linalg.norm(dxf, axis=1)
    ef = np.exp(grid.metric.f(np.mod(xf, L).T, grid.lengths)) if not grid.metric.is_flat else 1.0
    dens = speed * ef
    g_arc = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(fine))])
    g_total = g_arc[-1]
    if n_nodes is None:
        n_nodes = max(16, int(math.ceil(g_total / spacing)))
    target = np.arange(n_nodes) * g_total / n_nodes
    t = np.interp(target, g_arc, fine)
    x = spl(t) + t[:, None] * drift
    d1 = spl(t, 1) + drift
    d2 = spl(t, 2)
    sp1 = np.linalg.norm(d1, axis=1)
    tangent = d1 / sp1[:, None]
    normal = np.stack([tangent[:, 1], -tangent[:, 0]], axis=1)
    # Euclidean curvature with respect to ``normal``
    k0 = (d2[:, 0] * normal[:, 0] + d2[:, 1] * normal[:, 1]) / sp1**2
    return x, normal, k0, g_total, n_nodes


def _orient_normals(normal, k0, x, grid: TorusGrid, u):
    """Flip normals to point towards increasing ``u``."""
    gu = domain.coordinate_gradient(grid, u)
    L = np.asarray(grid.lengths)
    axes = [np.arange(n) * h for n, h in zip(grid.shape, grid.spacing)]
    comps = []
    for a in range(grid.dim):
        padded = np.pad(gu[a], [(0, 1)] * grid.dim, mode="wrap")
        interp = RegularGridInterpolator([np.append(ax, l) for ax, l in zip(axes, L)], padded)
        comps.append(interp(np.mod(x, L)))
    g = np.stack(comps, axis=1)
    sign = np.sign(np.sum(g * normal, axis=1).sum())
    sign = 1.0 if sign == 0 else sign
    return normal * sign, k0 * sign


def _shape_operator(grid: TorusGrid, u) -> np.ndarray:
    """Frame components of the level-set second fundamental form, ``-P D^2u P / |grad u|``."""
    g = domain.gradient(grid, u)
    gn = np.sqrt(domain.norm_sq(g))
    nu = g / np.where(gn > 0, gn, 1.0)
    d = grid.dim
    P = np.eye(d).reshape((d, d) + (1,) * d) - np.einsum("i...,j...->ij...", nu, nu)
    H = domain.hessian(grid, u)
    return -np.einsum("ik...,kl...,lj...->ij...", P, H, P) / np.where(gn > 0, gn, np.inf)


def _sample(grid: TorusGrid, field: np.ndarray, x: np.ndarray, order: int = 3) -> np.ndarray:
    """Periodic spline interpolation of a grid field at points ``x`` of shape ``(m, dim)``.

    Use ``order=1`` for fields with large values away from the interface: the
    cubic prefilter spreads them over several cells.
    """
    idx = (np.mod(x, np.asarray(grid.lengths)) / np.asarray(grid.spacing)).T
    return map_coordinates(field, idx, order=order, mode="grid-wrap")


def _curve_component(raw, grid: TorusGrid, u, n_nodes, spacing, shape_op) -> SurfaceComponent:
    L = np.asarray(grid.lengths)
    pts, wrap = _unwrap(raw, L)
    x, normal, k0, length, n = _resample_curve(pts, wrap, grid, n_nodes, spacing)
    normal, k0 = _orient_normals(normal, k0, x, grid, u)
    comp = curve_from_samples(x, normal, k0, length, wrap, grid.metric, grid.lengths)
    # the spline curvature of marching-squares points is noisy at O(1); the
    # trace of the field's shape operator is second-order accurate
    kg = _sample(grid, shape_op[0, 0] + shape_op[1, 1], x, order=1)
    comp.curvature = kg
    comp.curvature_sq = kg**2
    return comp


def curve_from_samples(x, normal, k0, length, wrap, metric: Metric, lengths) -> SurfaceComponent:
    """Component from uniformly spaced samples of a closed curve (Euclidean curvature ``k0``)."""
    L = np.asarray(lengths)
    if metric.is_flat:
        kg = k0
    else:
        # conformal change of geodesic curvature: e^{-f} (k0 - d_n f)
        pts = np.mod(x, L).T
        f = metric.f(pts, lengths)
        df = metric.grad_f(pts, lengths)
        kg = np.exp(-f) * (k0 - np.sum(df.T * normal, axis=1))
    n = len(x)
    return SurfaceComponent(vertices=np.asarray(x), normals=np.asarray(normal), curvature_sq=kg**2,
                            measure=float(length), kind="curve", wrap=np.asarray(wrap, dtype=float),
                            spacing=float(length) / n, curvature=kg)


def straight_line(lengths, axis: int, offset: float, n_nodes: int, metric: Metric | None = None
                  ) -> SurfaceComponent:
    """Closed geodesic ``{x_other = offset}`` running along ``axis`` of a 2-torus."""
    metric = metric or Metric.flat()
    L = float(lengths[axis])
    t = np.arange(n_nodes) * L / n_nodes
    x = np.zeros((n_nodes, 2))
    x[:, axis] = t
    x[:, 1 - axis] = offset
    normal = np.zeros((n_nodes, 2))
    normal[:, 1 - axis] = 1.0
    wrap = np.zeros(2)
    wrap[axis] = L
    if not metric.is_flat:
        # metric arclength parametrisation
        fine = np.linspace(0.0, L, 64 * n_nodes + 1)
        pts = np.zeros((2, fine.size))
        pts[axis] = fine
        pts[1 - axis] = offset
        ef = np.exp(metric.f(pts, lengths))
        arc = np.concatenate([[0.0], np.cumsum(0.5 * (ef[1:] + ef[:-1]) * np.diff(fine))])
        x[:, axis] = np.interp(np.arange(n_nodes) * arc[-1] / n_nodes, arc, fine)
        L = arc[-1]
    return curve_from_samples(x, normal, np.zeros(n_nodes), L, wrap, metric, lengths)


def circle(center, radius: float, n_nodes: int, lengths, metric: Metric | None = None) -> SurfaceComponent:
    metric = metric or Metric.flat()
    th = 2 * np.pi * np.arange(n_nodes) / n_nodes
    x = np.stack([center[0] + radius * np.cos(th), center[1] + radius * np.sin(th)], axis=1)
    normal = np.stack([np.cos(th), np.sin(th)], axis=1)
    return curve_from_samples(x, normal, np.full(n_nodes, -1.0 / radius), 2 * np.pi * radius,
                              np.zeros(2), metric, lengths)


# --------------------------------------------------------------------------
# marching cubes


def _surface_component(verts, faces, grid: TorusGrid, u, shape_op) -> SurfaceComponent:
    L = np.asarray(grid.lengths)
    e1 = _min_image(verts[faces[:, 1]] - verts[faces[:, 0]], L)
    e2 = _min_image(verts[faces[:, 2]] - verts[faces[:, 0]], L)
    cr = np.cross(e1, e2)
    area_f = 0.5 * np.linalg.norm(cr, axis=1)
    if not grid.metric.is_flat:
        cent = np.mod(verts[faces[:, 0]] + (e1 + e2) / 3.0, L)
        area_f = area_f * np.exp(2 * grid.metric.f(cent.T, grid.lengths))
    # vertex normals from the field gradient
    gu = domain.coordinate_gradient(grid, u)
    axes = [np.append(np.arange(n) * h, l) for n, h, l in zip(grid.shape, grid.spacing, L)]
    g = np.stack([RegularGridInterpolator(axes, np.pad(gu[a], [(0, 1)] * 3, mode="wrap"))(verts)
                  for a in range(3)], axis=1)
    normals = g / np.linalg.norm(g, axis=1, keepdims=True)
    curv = _sample(grid, np.einsum("ij...,ij...->...", shape_op, shape_op), verts, order=1)
    return SurfaceComponent(vertices=verts, normals=normals, curvature_sq=curv,
                            measure=float(area_f.sum()), kind="surface", faces=faces)


def _marching_cubes(grid: TorusGrid, u, level):
    from skimage.measure import marching_cubes

    L = np.asarray(grid.lengths)
    vol = np.pad(u, [(0, 1)] * 3, mode="wrap")
    verts, faces, _, _ = marching_cubes(vol, level, spacing=tuple(grid.spacing), allow_degenerate=False)
    verts = np.mod(verts, L)
    tol = 1e-9 * float(L.max())
    verts = np.where(np.abs(verts - L) < tol, 0.0, verts)
    tree = cKDTree(verts, boxsize=L)
    pairs = tree.query_pairs(tol, output_type="ndarray")
    parent = np.arange(len(verts))
    for a, b in sorted(map(tuple, pairs)):
        ra, rb = parent[a], parent[b]
        while parent[ra] != ra:
            ra = parent[ra]
        while parent[rb] != rb:
            rb = parent[rb]
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    for i in range(len(parent)):
        r = i
        while parent[r] != r:
            r = parent[r]
        parent[i] = r
    keep, inv = np.unique(parent, return_inverse=True)
    verts = verts[keep]
    faces = inv[faces]
    good = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    return verts, faces[good]


def _relax_surface(verts, faces, grid: TorusGrid, u, level, iters: int = 10):
    """Tangential umbrella smoothing with Newton projection back onto ``{u = level}``.

    Marching cubes leaves sliver triangles; a few relaxation sweeps lift the
    minimum angle well above the quality gate without changing connectivity.
    """
    L = np.asarray(grid.lengths)
    n = len(verts)
    rows = np.concatenate([faces[:, 0], faces[:, 1], faces[:, 2], faces[:, 1], faces[:, 2], faces[:, 0]])
    cols = np.concatenate([faces[:, 1], faces[:, 2], faces[:, 0], faces[:, 0], faces[:, 1], faces[:, 2]])
    adj = coo_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n)).tocsr().tocoo()
    deg = np.bincount(adj.row, minlength=n)
    gu = domain.coordinate_gradient(grid, u)
    v = np.asarray(verts, dtype=float).copy()

    def grad_at(x):
        return np.stack([_sample(grid, gu[a], x) for a in range(grid.dim)], axis=1)

    for _ in range(iters):
        d = _min_image(v[adj.col] - v[adj.row], L)
        off = np.stack([np.bincount(adj.row, weights=d[:, a], minlength=n) for a in range(3)], 1)
        off /= np.maximum(deg, 1)[:, None]
        gr = grad_at(v)
        nrm = gr / np.linalg.norm(gr, axis=1, keepdims=True)
        v = v + 0.5 * (off - np.sum(off * nrm, axis=1)[:, None] * nrm)
        for _ in range(2):
            gr = grad_at(v)
            v = v - ((_sample(grid, u, v) - level) / np.sum(gr * gr, axis=1))[:, None] * gr
        v = np.mod(v, L)
    return v


def min_face_angle(comp: SurfaceComponent, lengths) -> float:
    """Smallest interior triangle angle in degrees (``180`` for curves)."""
    if comp.faces is None:
        return 180.0
    L = np.asarray(lengths)
    v = comp.vertices
    f = comp.faces
    best = 180.0
    for k in range(3):
        a, b, c = f[:, k], f[:, (k + 1) % 3], f[:, (k + 2) % 3]
        e1 = _min_image(v[b] - v[a], L)
        e2 = _min_image(v[c] - v[a], L)
        cosang = np.sum(e1 * e2, 1) / (np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1))
        best = min(best, float(np.degrees(np.arccos(np.clip(cosang, -1, 1))).min()))
    return best


# --------------------------------------------------------------------------


def extract_level_set(grid: TorusGrid, u, level: float = 0.0, grad_floor: float = 1e-8,
                      n_nodes: int | None = None, spacing: float | None = None) -> SurfaceMesh:
    """Components of ``{u = level}``.

    Curves are resampled to ``n_nodes`` uniform nodes per component or, when
    ``n_nodes`` is ``None``, to a spacing of ``spacing`` (default: the smallest
    grid spacing).
    """
    u = domain._check(grid, u)
    v = u - level
    zero = v == 0
    flat = np.ones(grid.shape, dtype=bool)
    for offset in product((0, 1), repeat=grid.dim):
        shifted = zero
        for a, o in enumerate(offset):
            shifted = np.roll(shifted, -o, a)
        flat &= shifted
    if flat.any():
        raise DegenerateLevelSet("level set contains cells with all corners on the level")
    if not (np.any(v > 0) and np.any(v < 0)):
        return SurfaceMesh([], grid.dim, grid.lengths, grid.metric)
    gn = np.sqrt(domain.norm_sq(domain.coordinate_gradient(grid, u)))
    floor = grad_floor * gn.max()
    near = np.zeros(grid.shape, dtype=bool)
    for a in range(grid.dim):
        near |= v * np.roll(v, -1, a) < 0
    if np.any(gn[near] <= floor):
        raise DegenerateLevelSet("level set is not transversal: gradient below floor on crossing cells")
    comps = []
    shape_op = _shape_operator(grid, u)
    if grid.dim == 2:
        spacing = spacing or min(grid.spacing)
        for raw in _trace_curves(u, level, grid.spacing):
            if len(raw) < 3:
                continue
            comps.append(_curve_component(raw, grid, u, n_nodes, spacing, shape_op))
    else:
        verts, faces = _marching_cubes(grid, u, level)
        nv = len(verts)
        rows = np.concatenate([faces[:, 0], faces[:, 1], faces[:, 2]])
        cols = np.concatenate([faces[:, 1], faces[:, 2], faces[:, 0]])
        adj = coo_matrix((np.ones(rows.size), (rows, cols)), shape=(nv, nv))
        ncomp, lab = connected_components(adj, directed=False)
        for c in range(ncomp):
            sel = np.flatnonzero(lab == c)
            fsel = faces[np.all(np.isin(faces, sel), axis=1)]
            if len(fsel) == 0:
                continue
            remap = -np.ones(nv, dtype=int)
            remap[sel] = np.arange(sel.size)
            vs = _relax_surface(verts[sel], remap[fsel], grid, u, level)
            comps.append(_surface_component(vs, remap[fsel], grid, u, shape_op))
    comps.sort(key=lambda c: tuple(np.round(np.mod(c.vertices, np.asarray(grid.lengths)).min(0), 9)))
    return SurfaceMesh(comps, grid.dim, grid.lengths, grid.metric)
