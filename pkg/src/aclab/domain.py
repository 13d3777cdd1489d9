"""Periodic computational geometry on flat tori with an optional conformal factor.

Fields are plain ``numpy`` arrays of shape ``grid.shape`` (row-major, axis ``a``
is the coordinate ``x_a``).  Vector fields carry a leading axis of length
``grid.dim`` and symmetric tensors two leading axes.  Every metric quantity is
expressed in the orthonormal frame ``e^{-f} d/dx_a`` so that norms are plain
Euclidean sums of components.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import GridError, NonFiniteField

MIN_NODES = 8


# --------------------------------------------------------------------------
# metric


@dataclass(frozen=True)
class ConformalMode:
    """One plane wave ``amplitude * cos(2 pi k.x / L + phase)`` of the exponent f."""

    amplitude: float
    wavenumbers: tuple[int, ...]
    phase: float = 0.0


@dataclass(frozen=True)
class Metric:
    """``g = e^{2f} delta`` with ``f`` a finite sum of plane waves (flat when empty)."""

    modes: tuple[ConformalMode, ...] = ()

    @classmethod
    def flat(cls) -> "Metric":
        return cls(())

    @classmethod
    def conformal(cls, modes: Sequence[ConformalMode | tuple]) -> "Metric":
        out = []
        for m in modes:
            if not isinstance(m, ConformalMode):
                m = ConformalMode(float(m[0]), tuple(int(k) for k in m[1]),
                                  float(m[2]) if len(m) > 2 else 0.0)
            out.append(m)
        return cls(tuple(out))

    @property
    def kind(self) -> str:
        return "conformal" if self.modes else "flat"

    @property
    def is_flat(self) -> bool:
        return not self.modes

    def _phases(self, points, lengths, mode):
        k = np.asarray(mode.wavenumbers, dtype=float)
        kvec = 2.0 * np.pi * k / np.asarray(lengths, dtype=float)
        arg = np.tensordot(kvec, points, axes=(0, 0)) + mode.phase
        return kvec, arg

    def f(self, points: np.ndarray, lengths) -> np.ndarray:
        """Exponent f at ``points`` (shape ``(dim, ...)``)."""
        out = np.zeros(points.shape[1:])
        for m in self.modes:
            _, arg = self._phases(points, lengths, m)
            out += m.amplitude * np.cos(arg)
        return out

    def grad_f(self, points, lengths) -> np.ndarray:
        dim = points.shape[0]
        out = np.zeros((dim,) + points.shape[1:])
        for m in self.modes:
            kvec, arg = self._phases(points, lengths, m)
            s = -m.amplitude * np.sin(arg)
            for a in range(dim):
                out[a] += kvec[a] * s
        return out

    def hess_f(self, points, lengths) -> np.ndarray:
        dim = points.shape[0]
        out = np.zeros((dim, dim) + points.shape[1:])
        for m in self.modes:
            kvec, arg = self._phases(points, lengths, m)
            c = -m.amplitude * np.cos(arg)
            for a in range(dim):
                for b in range(dim):
                    out[a, b] += kvec[a] * kvec[b] * c
        return out

    def ricci_coordinate(self, points, lengths) -> np.ndarray:
        """Ricci tensor (covariant coordinate components) from the conformal-change formula.

        ``Ric = -(d-2)(D^2 f - df (x) df) - (Lap f + (d-2)|df|^2) delta`` with all
        derivatives Euclidean.
        """
        dim = points.shape[0]
        g = self.grad_f(points, lengths)
        H = self.hess_f(points, lengths)
        lap = np.trace(H, axis1=0, axis2=1)
        gg = np.einsum("a...,a...->...", g, g)
        ric = np.zeros_like(H)
        for a in range(dim):
            for b in range(dim):
                ric[a, b] = -(dim - 2) * (H[a, b] - g[a] * g[b])
            ric[a, a] -= lap + (dim - 2) * gg
        return ric

    def ricci_frame(self, points, lengths) -> np.ndarray:
        """Ricci tensor in the orthonormal frame ``e^{-f} d/dx_a``."""
        return self.ricci_coordinate(points, lengths) * np.exp(-2.0 * self.f(points, lengths))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "modes": [[m.amplitude, list(m.wavenumbers), m.phase] for m in self.modes],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Metric":
        if data.get("kind", "flat") == "flat":
            return cls.flat()
        return cls.conformal([(float(a), tuple(int(k) for k in w), float(p)) for a, w, p in data["modes"]])


# --------------------------------------------------------------------------
# grid


@dataclass(frozen=True, eq=False)
class TorusGrid:
    dim: int
    lengths: tuple[float, ...]
    resolution: tuple[int, ...]
    metric: Metric = field(default_factory=Metric.flat)

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise GridError(f"dimension must be 2 or 3, got {self.dim}")
        if len(self.lengths) != self.dim or len(self.resolution) != self.dim:
            raise GridError("lengths and resolution must have one entry per axis")
        if any(not (L > 0) or not math.isfinite(L) for L in self.lengths):
            raise GridError(f"lengths must be positive, got {self.lengths}")
        if any(int(n) < MIN_NODES for n in self.resolution):
            raise GridError(f"resolution too small: need >= {MIN_NODES} nodes per axis, got {self.resolution}")
        if self.metric.modes and any(len(m.wavenumbers) != self.dim for m in self.metric.modes):
            raise GridError("conformal mode wavenumbers must match the grid dimension")

    def __eq__(self, other):
        return (isinstance(other, TorusGrid) and self.dim == other.dim
                and self.lengths == other.lengths and self.resolution == other.resolution
                and self.metric == other.metric)

    def __hash__(self):
        return hash((self.dim, self.lengths, self.resolution, self.metric))

    # ---- basic geometry -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(int(n) for n in self.resolution)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(L / n for L, n in zip(self.lengths, self.resolution))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def min_spacing(self) -> float:
        return min(self.spacing)

    @cached_property
    def coords(self) -> np.ndarray:
        """Node coordinates, shape ``(dim, *shape)``."""
        axes = [np.arange(n) * h for n, h in zip(self.shape, self.spacing)]
        return np.array(np.meshgrid(*axes, indexing="ij"))

    def axis_coords(self, a: int) -> np.ndarray:
        return np.arange(self.shape[a]) * self.spacing[a]

    def with_resolution(self, resolution) -> "TorusGrid":
        return TorusGrid(self.dim, self.lengths, tuple(int(n) for n in resolution), self.metric)

    def with_metric(self, metric: Metric) -> "TorusGrid":
        return TorusGrid(self.dim, self.lengths, self.resolution, metric)

    def periodic_delta(self, diff: np.ndarray) -> np.ndarray:
        """Minimum-image reduction of coordinate differences (leading axis = dim)."""
        L = np.asarray(self.lengths).reshape((self.dim,) + (1,) * (diff.ndim - 1))
        return diff - L * np.round(diff / L)

    def distance_to(self, center) -> np.ndarray:
        c = np.asarray(center, dtype=float).reshape((self.dim,) + (1,) * self.dim)
        d = self.periodic_delta(self.coords - c)
        return np.sqrt(np.sum(d * d, axis=0))

    # ---- metric samples ---------------------------------------------------
    @cached_property
    def conformal_exponent(self) -> np.ndarray:
        return self.metric.f(self.coords, self.lengths)

    @cached_property
    def volume_density(self) -> np.ndarray:
        """``sqrt(det g)`` at nodes."""
        if self.metric.is_flat:
            return np.ones(self.shape)
        return np.exp(self.dim * self.conformal_exponent)

    @cached_property
    def volume_weights(self) -> np.ndarray:
        """Quadrature weight per node (lumped metric volume)."""
        return self.volume_density * self.cell_volume

    @cached_property
    def _edge_weights(self) -> list[np.ndarray]:
        # c = e^{(d-2) f} at edge midpoints, analytic
        out = []
        for a, h in enumerate(self.spacing):
            if self.metric.is_flat or self.dim == 2:
                c = np.ones(self.shape)
            else:
                mid = self.coords.copy()
                mid[a] = mid[a] + 0.5 * h
                c = np.exp((self.dim - 2) * self.metric.f(mid, self.lengths))
            out.append(c * self.cell_volume / h**2)
        return out

    @cached_property
    def ricci_frame(self) -> np.ndarray:
        if self.metric.is_flat:
            return np.zeros((self.dim, self.dim) + self.shape)
        return self.metric.ricci_frame(self.coords, self.lengths)

    @cached_property
    def grad_conformal_exponent(self) -> np.ndarray:
        if self.metric.is_flat:
            return np.zeros((self.dim,) + self.shape)
        return self.metric.grad_f(self.coords, self.lengths)

    # ---- sparse assembly --------------------------------------------------
    def flat_index(self) -> np.ndarray:
        return np.arange(self.size).reshape(self.shape)

    @cached_property
    def stiffness(self) -> sp.csr_matrix:
        """Symmetric PSD ``K`` with ``u.K.u`` the discrete Dirichlet integral."""
        idx = self.flat_index()
        rows, cols, vals = [], [], []
        diag = np.zeros(self.size)
        for a in range(self.dim):
            w = self._edge_weights[a].ravel()
            nb = np.roll(idx, -1, axis=a).ravel()
            i = idx.ravel()
            rows += [i, nb]
            cols += [nb, i]
            vals += [-w, -w]
            diag += w
            np.add.at(diag, nb, w)
        rows.append(np.arange(self.size))
        cols.append(np.arange(self.size))
        vals.append(diag)
        K = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(self.size, self.size))
        return K.tocsr()

    @cached_property
    def laplacian_symbol(self) -> np.ndarray | None:
        """Eigenvalues of ``-Delta_h`` on the Fourier grid (flat metric only)."""
        if not self.metric.is_flat:
            return None
        sym = np.zeros(self.shape)
        for a, (n, h) in enumerate(zip(self.shape, self.spacing)):
            k = np.fft.fftfreq(n) * n
            s = (4.0 / h**2) * np.sin(np.pi * k / n) ** 2
            sym = sym + s.reshape([-1 if b == a else 1 for b in range(self.dim)])
        return sym

    def to_dict(self) -> dict:
        return {"dim": self.dim, "lengths": list(self.lengths),
                "resolution": list(self.shape), "metric": self.metric.to_dict()}


def grid_from_dict(data: dict) -> TorusGrid:
    """Inverse of :meth:`TorusGrid.to_dict`."""
    return build_torus_grid(data["dim"], data["lengths"], data["resolution"],
                            Metric.from_dict(data.get("metric", {})))


def build_torus_grid(dim: int, lengths, resolution, metric: Metric | None = None) -> TorusGrid:
    """Construct a periodic grid; rejects bad dimensions, lengths and resolutions."""
    lengths = tuple(float(L) for L in lengths)
    try:
        resolution = tuple(int(n) for n in resolution)
    except TypeError as exc:
        raise GridError("resolution must be a sequence of integers") from exc
    return TorusGrid(int(dim), lengths, resolution, metric or Metric.flat())


# --------------------------------------------------------------------------
# differential operators


def _check(grid: TorusGrid, u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.shape != grid.shape:
        raise GridError(f"field shape {u.shape} does not match grid {grid.shape}")
    if not np.all(np.isfinite(u)):
        raise NonFiniteField("field contains NaN or Inf")
    return u


def coordinate_gradient(grid: TorusGrid, u: np.ndarray) -> np.ndarray:
    """Central differences ``d u / d x_a``."""
    return np.array([(np.roll(u, -1, a) - np.roll(u, 1, a)) / (2.0 * h)
                     for a, h in enumerate(grid.spacing)])


def gradient(grid: TorusGrid, u) -> np.ndarray:
    """Metric gradient in the orthonormal frame (``e^{-f} du/dx_a``)."""
    u = _check(grid, u)
    g = coordinate_gradient(grid, u)
    if not grid.metric.is_flat:
        g = g * np.exp(-grid.conformal_exponent)
    return g


def coordinate_hessian(grid: TorusGrid, u: np.ndarray) -> np.ndarray:
    d = grid.dim
    H = np.empty((d, d) + grid.shape)
    h = grid.spacing
    for a in range(d):
        H[a, a] = (np.roll(u, -1, a) - 2.0 * u + np.roll(u, 1, a)) / h[a] ** 2
    for a in range(d):
        da = (np.roll(u, -1, a) - np.roll(u, 1, a)) / (2.0 * h[a])
        for b in range(a + 1, d):
            H[a, b] = (np.roll(da, -1, b) - np.roll(da, 1, b)) / (2.0 * h[b])
            H[b, a] = H[a, b]
    return H


def hessian(grid: TorusGrid, u) -> np.ndarray:
    """Covariant Hessian in the orthonormal frame; symmetric by construction."""
    u = _check(grid, u)
    H = coordinate_hessian(grid, u)
    if grid.metric.is_flat:
        return H
    du = coordinate_gradient(grid, u)
    df = grid.grad_conformal_exponent
    dot = np.einsum("a...,a...->...", df, du)
    for a in range(grid.dim):
        for b in range(grid.dim):
            H[a, b] -= du[a] * df[b] + du[b] * df[a]
        H[a, a] += dot
    return H * np.exp(-2.0 * grid.conformal_exponent)


def stiffness_apply(grid: TorusGrid, u: np.ndarray) -> np.ndarray:
    out = np.zeros_like(u)
    for a, w in enumerate(grid._edge_weights):
        flux = w * (np.roll(u, -1, a) - u)
        out -= flux
        out += np.roll(flux, 1, a)
    return out


def laplacian(grid: TorusGrid, u) -> np.ndarray:
    """5/7-point Laplace-Beltrami in flux form with analytic conformal weights."""
    u = _check(grid, u)
    return -stiffness_apply(grid, u) / grid.volume_weights


def integrate(grid: TorusGrid, values, mask=None) -> float:
    values = np.asarray(values, dtype=float)
    w = values * grid.volume_weights
    if mask is not None:
        w = w[_mask_array(grid, mask)]
    return float(np.sum(w))


def dirichlet_density(grid: TorusGrid, u: np.ndarray) -> np.ndarray:
    """Nodal density of ``|grad u|^2`` whose quadrature reproduces ``u.K.u`` exactly."""
    out = np.zeros(grid.shape)
    for a, w in enumerate(grid._edge_weights):
        e = w * (np.roll(u, -1, a) - u) ** 2
        out += 0.5 * (e + np.roll(e, 1, a))
    return out / grid.volume_weights


def norm_sq(vec: np.ndarray) -> np.ndarray:
    return np.einsum("a...,a...->...", vec, vec)


# --------------------------------------------------------------------------
# regions


class Region:
    """Geometric region on the torus; evaluates membership at arbitrary points."""

    label = "region"

    def contains(self, points: np.ndarray, lengths) -> np.ndarray:
        raise NotImplementedError

    def mask(self, grid: TorusGrid) -> "RegionMask":
        return RegionMask(grid, self.contains(grid.coords, grid.lengths), self.label)

    def __sub__(self, other):
        return Difference(self, other)

    def __or__(self, other):
        return Union(self, other)


@dataclass(frozen=True)
class Full(Region):
    label: str = "full"

    def contains(self, points, lengths):
        return np.ones(points.shape[1:], dtype=bool)


@dataclass(frozen=True)
class Box(Region):
    """Product of periodic intervals; ``None`` leaves an axis unrestricted."""

    lower: tuple
    upper: tuple
    label: str = "box"

    def contains(self, points, lengths):
        inside = np.ones(points.shape[1:], dtype=bool)
        for a, (lo, hi) in enumerate(zip(self.lower, self.upper)):
            if lo is None:
                continue
            L = lengths[a]
            width = hi - lo
            t = np.mod(points[a] - lo, L)
            inside &= (t > 0) & (t < width)
        return inside


@dataclass(frozen=True)
class Ball(Region):
    """Open coordinate ball (periodic minimum-image distance)."""

    center: tuple
    radius: float
    closed: bool = False
    label: str = "ball"

    def distance(self, points, lengths):
        c = np.asarray(self.center, float).reshape((len(self.center),) + (1,) * (points.ndim - 1))
        d = points - c
        L = np.asarray(lengths, float).reshape(c.shape)
        d = d - L * np.round(d / L)
        return np.sqrt(np.sum(d * d, axis=0))

    def contains(self, points, lengths):
        r = self.distance(points, lengths)
        return r <= self.radius if self.closed else r < self.radius


@dataclass(frozen=True)
class Difference(Region):
    base: Region
    removed: Region
    label: str = "difference"

    def contains(self, points, lengths):
        return self.base.contains(points, lengths) & ~self.removed.contains(points, lengths)


@dataclass(frozen=True)
class Union(Region):
    first: Region
    second: Region
    label: str = "union"

    def contains(self, points, lengths):
        return self.first.contains(points, lengths) | self.second.contains(points, lengths)


class RegionMask:
    """Boolean node mask with a label; the complement partitions the node set."""

    def __init__(self, grid: TorusGrid, mask, label: str = "mask"):
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != grid.shape:
            raise GridError(f"mask shape {mask.shape} does not match grid {grid.shape}")
        self.grid = grid
        self.mask = mask
        self.label = label

    @classmethod
    def full(cls, grid: TorusGrid) -> "RegionMask":
        return cls(grid, np.ones(grid.shape, dtype=bool), "full")

    def complement(self) -> "RegionMask":
        return RegionMask(self.grid, ~self.mask, f"not({self.label})")

    @property
    def count(self) -> int:
        return int(self.mask.sum())

    def __and__(self, other):
        return RegionMask(self.grid, self.mask & _mask_array(self.grid, other),
                          f"{self.label}&{getattr(other, 'label', 'mask')}")

    def __or__(self, other):
        return RegionMask(self.grid, self.mask | _mask_array(self.grid, other),
                          f"{self.label}|{getattr(other, 'label', 'mask')}")

    def boundary_layer(self) -> np.ndarray:
        """Masked nodes with at least one neighbour outside the mask."""
        m = self.mask
        out = np.zeros_like(m)
        for a in range(self.grid.dim):
            out |= m & (~np.roll(m, 1, a) | ~np.roll(m, -1, a))
        return out

    def __repr__(self):
        return f"RegionMask({self.label!r}, {self.count}/{self.grid.size} nodes)"


def _mask_array(grid: TorusGrid, mask) -> np.ndarray:
    if mask is None:
        return np.ones(grid.shape, dtype=bool)
    if isinstance(mask, RegionMask):
        return mask.mask
    if isinstance(mask, Region):
        return mask.mask(grid).mask
    m = np.asarray(mask, dtype=bool)
    if m.shape != grid.shape:
        raise GridError(f"mask shape {m.shape} does not match grid {grid.shape}")
    return m


def as_mask(grid: TorusGrid, mask) -> np.ndarray:
    return _mask_array(grid, mask)


# --------------------------------------------------------------------------
# binary field dump ("ACFD")

_MAGIC = b"ACFD"
_VERSION = 1


def write_field(path, values: np.ndarray) -> None:
    values = np.ascontiguousarray(values, dtype="<f8")
    dim = values.ndim
    header = _MAGIC + struct.pack("<IB", _VERSION, dim) + struct.pack("<" + "Q" * dim, *values.shape)
    Path(path).write_bytes(header + values.tobytes(order="C"))


def read_field(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise GridError(f"{path}: not an ACFD field dump")
    if len(data) < 9:
        raise GridError(f"{path}: truncated header")
    version, dim = struct.unpack_from("<IB", data, 4)
    if version != _VERSION:
        raise GridError(f"{path}: unsupported ACFD version {version}")
    off = 9
    if len(data) < off + 8 * dim:
        raise GridError(f"{path}: truncated header")
    counts = struct.unpack_from("<" + "Q" * dim, data, off)
    off += 8 * dim
    n = int(np.prod(counts))
    if len(data) != off + 8 * n:
        raise GridError(f"{path}: truncated or oversized payload")
    values = np.frombuffer(data, dtype="<f8", count=n, offset=off)
    return values.reshape(counts).astype(float)
