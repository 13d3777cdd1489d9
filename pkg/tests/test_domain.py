import numpy as np
import pytest
import scipy.sparse.linalg as spla
from hypothesis import given, settings
from hypothesis import strategies as st

from aclab import domain
from aclab.domain import Ball, Box, Full, Metric, RegionMask
from aclab.errors import GridError, NonFiniteField


def _grid(n=64, dim=2, metric=None):
    return domain.build_torus_grid(dim, (1.0,) * dim, (n,) * dim, metric)


CONFORMAL = Metric.conformal([(0.1, (1, 0), 0.0), (0.05, (1, 2), 0.3)])


# ---- construction ---------------------------------------------------------


def test_build_2d_grid():
    g = _grid(64)
    assert g.size == 4096
    assert g.spacing == (1 / 64, 1 / 64)
    assert g.coords.shape == (2, 64, 64)


def test_build_3d_grid():
    assert _grid(32, dim=3).size == 32768


@pytest.mark.parametrize("args", [
    (2, (1.0, 1.0), (4, 4)),
    (1, (1.0,), (16,)),
    (4, (1.0,) * 4, (8,) * 4),
    (2, (1.0, -1.0), (16, 16)),
    (2, (1.0, 0.0), (16, 16)),
    (2, (1.0,), (16, 16)),
])
def test_build_rejects_bad_input(args):
    with pytest.raises(GridError):
        domain.build_torus_grid(*args)


def test_grid_round_trips_through_dict():
    g = _grid(16, metric=CONFORMAL)
    assert domain.grid_from_dict(g.to_dict()) == g


# ---- metric -----------------------------------------------------------------


def test_flat_ricci_is_zero():
    assert np.all(_grid(16).ricci_frame == 0.0)


def test_conformal_with_zero_amplitude_has_zero_ricci():
    g = _grid(16, metric=Metric.conformal([(0.0, (1, 1), 0.0)]))
    assert np.all(g.ricci_frame == 0.0)


def test_conformal_ricci_2d_matches_gauss_curvature():
    # in 2-D Ric = K g with K = -e^{-2f} Lap f
    g = _grid(32, metric=CONFORMAL)
    x = g.coords
    f = g.conformal_exponent
    lap = np.zeros(g.shape)
    for amp, k, ph in [(0.1, (1, 0), 0.0), (0.05, (1, 2), 0.3)]:
        kv = 2 * np.pi * np.asarray(k, float)
        lap -= amp * (kv @ kv) * np.cos(kv[0] * x[0] + kv[1] * x[1] + ph)
    K = -np.exp(-2 * f) * lap
    ric = g.ricci_frame
    assert np.allclose(ric[0, 0], K, atol=1e-12)
    assert np.allclose(ric[1, 1], K, atol=1e-12)
    assert np.allclose(ric[0, 1], 0.0, atol=1e-12)


def test_conformal_ricci_3d_matches_closed_form():
    # Ric_ab = -(D^2 f - df df)_ab - (Lap f + |df|^2) delta_ab for d = 3 in coordinates
    m = Metric.conformal([(0.2, (1, 0, 0), 0.0)])
    g = _grid(8, dim=3, metric=m)
    x = g.coords[0]
    k = 2 * np.pi
    f1 = -0.2 * k * np.sin(k * x)
    f11 = -0.2 * k * k * np.cos(k * x)
    ric = m.ricci_coordinate(g.coords, g.lengths)
    assert np.allclose(ric[0, 0], -(f11 - f1 * f1) - (f11 + f1 * f1), atol=1e-12)
    assert np.allclose(ric[1, 1], -(f11 + f1 * f1), atol=1e-12)
    assert np.allclose(ric[0, 1], 0.0, atol=1e-12)


# ---- operators ----------------------------------------------------------------


def _sin(g):
    return np.sin(2 * np.pi * g.coords[0])


def test_gradient_of_constant_is_zero():
    g = _grid(16)
    assert np.all(domain.gradient(g, np.full(g.shape, 3.7)) == 0.0)


def test_gradient_of_sine():
    g = _grid(128)
    du = domain.gradient(g, _sin(g))
    exact = 2 * np.pi * np.cos(2 * np.pi * g.coords[0])
    h = g.spacing[0]
    # central difference error (2 pi)^3 h^2 / 6
    assert np.max(np.abs(du[0] - exact)) <= (2 * np.pi) ** 3 * h**2 / 6 * 1.01
    assert np.all(du[1] == 0.0)


def test_summation_by_parts():
    rng = np.random.default_rng(0)
    g = _grid(32)
    u = rng.standard_normal(g.shape)
    v = rng.standard_normal(g.shape)
    du = domain.coordinate_gradient(g, u)
    dv = domain.coordinate_gradient(g, v)
    # sum(du . v) = -sum(u . dv) for the central difference
    for a in range(2):
        lhs = domain.integrate(g, du[a] * v)
        rhs = -domain.integrate(g, u * dv[a])
        assert abs(lhs - rhs) <= 1e-12 * np.linalg.norm(u) * np.linalg.norm(v)


def test_hessian_of_sine():
    g = _grid(128)
    H = domain.hessian(g, _sin(g))
    exact = -4 * np.pi**2 * _sin(g)
    assert np.max(np.abs(H[0, 0] - exact)) <= (2 * np.pi) ** 4 * g.spacing[0] ** 2 / 12 * 1.01
    assert np.all(H[0, 1] == 0.0) and np.all(H[1, 1] == 0.0)


def test_hessian_mixed_partial():
    g = _grid(128)
    x, y = g.coords
    u = np.cos(2 * np.pi * x) * np.cos(2 * np.pi * y)
    H = domain.hessian(g, u)
    exact = 4 * np.pi**2 * np.sin(2 * np.pi * x) * np.sin(2 * np.pi * y)
    assert np.max(np.abs(H[0, 1] - exact)) < 4 * np.pi**2 * 2 * (2 * np.pi * g.spacing[0]) ** 2 / 6
    assert np.array_equal(H[0, 1], H[1, 0])


def test_trace_of_hessian_is_laplacian():
    rng = np.random.default_rng(1)
    g = _grid(24)
    u = rng.standard_normal(g.shape)
    H = domain.hessian(g, u)
    assert np.max(np.abs(H[0, 0] + H[1, 1] - domain.laplacian(g, u))) <= 1e-12 * np.max(np.abs(H))


def test_laplacian_of_sine_and_constant():
    g = _grid(128)
    err = np.max(np.abs(domain.laplacian(g, _sin(g)) + 4 * np.pi**2 * _sin(g)))
    assert err <= (2 * np.pi) ** 4 * g.spacing[0] ** 2 / 12 * 1.01
    assert np.all(domain.laplacian(g, np.ones(g.shape)) == 0.0)


@pytest.mark.parametrize("metric", [None, CONFORMAL])
def test_laplacian_is_conservative(metric):
    rng = np.random.default_rng(2)
    g = _grid(32, metric=metric)
    u = rng.standard_normal(g.shape)
    assert abs(domain.integrate(g, domain.laplacian(g, u))) <= 1e-10 * np.linalg.norm(u)


def test_laplacian_symmetric_nsd_with_constant_kernel():
    g = _grid(8)
    K = g.stiffness.toarray()
    assert np.allclose(K, K.T, atol=0.0)
    w = np.linalg.eigvalsh(K)
    assert w[0] > -1e-12
    assert np.sum(np.abs(w) < 1e-10) == 1
    assert np.allclose(K @ np.ones(g.size), 0.0)


def test_laplacian_spectrum_matches_symbol():
    g = _grid(16)
    M = np.diag(1 / g.volume_weights.ravel()) @ g.stiffness.toarray()
    w = np.sort(np.linalg.eigvals(M).real)
    assert np.allclose(w, np.sort(g.laplacian_symbol.ravel()), atol=1e-9)


def _orders(op, exact, ns=(32, 64, 128)):
    errs = []
    for n in ns:
        g = _grid(n)
        x, y = g.coords
        u = np.sin(2 * np.pi * x) * np.cos(4 * np.pi * y)
        errs.append(np.max(np.abs(op(g, u) - exact(x, y))))
    return [errs[i] / errs[i + 1] for i in range(len(errs) - 1)]


def test_second_order_convergence():
    s, c = np.sin, np.cos
    p = 2 * np.pi
    cases = [
        (lambda g, u: domain.gradient(g, u)[0], lambda x, y: p * c(p * x) * c(2 * p * y)),
        (lambda g, u: domain.gradient(g, u)[1], lambda x, y: -2 * p * s(p * x) * s(2 * p * y)),
        (domain.laplacian, lambda x, y: -5 * p * p * s(p * x) * c(2 * p * y)),
        (lambda g, u: domain.hessian(g, u)[0, 1], lambda x, y: -2 * p * p * c(p * x) * s(2 * p * y)),
    ]
    for op, exact in cases:
        for r in _orders(op, exact):
            assert 3.6 <= r <= 4.4


def test_conformal_laplacian_converges():
    # Lap_g u = e^{-2f} Lap u in 2-D
    errs = []
    for n in (32, 64, 128):
        g = _grid(n, metric=CONFORMAL)
        u = _sin(g)
        exact = -4 * np.pi**2 * u * np.exp(-2 * g.conformal_exponent)
        errs.append(np.max(np.abs(domain.laplacian(g, u) - exact)))
    assert 3.6 <= errs[0] / errs[1] <= 4.4
    assert 3.6 <= errs[1] / errs[2] <= 4.4


def test_non_finite_field_rejected():
    g = _grid(8)
    u = np.zeros(g.shape)
    u[0, 0] = np.nan
    with pytest.raises(NonFiniteField):
        domain.gradient(g, u)
    with pytest.raises(GridError):
        domain.laplacian(g, np.zeros((9, 8)))


# ---- quadrature and regions ---------------------------------------------------


def test_integrate_constant_and_sine():
    g = _grid(64)
    assert domain.integrate(g, np.ones(g.shape)) == 1.0
    assert abs(domain.integrate(g, _sin(g))) <= 1e-12


def test_integrate_half_torus():
    g = _grid(64)
    half = Box((0.0, None), (0.5, None)).mask(g)
    v = domain.integrate(g, np.ones(g.shape), half)
    assert abs(v - 0.5) <= g.spacing[0]


def test_conformal_volume():
    # vol = int e^{2f}; f = a cos(2 pi x) gives I0(2a)
    from scipy.special import i0

    g = _grid(64, metric=Metric.conformal([(0.3, (1, 0), 0.0)]))
    assert abs(domain.integrate(g, np.ones(g.shape)) - i0(0.6)) < 1e-12


def test_mask_partition_and_full():
    g = _grid(16)
    m = Ball((0.5, 0.5), 0.3).mask(g)
    c = m.complement()
    assert not np.any(m.mask & c.mask)
    assert np.all(m.mask | c.mask)
    assert RegionMask.full(g).count == g.size
    assert Full().mask(g).count == g.size


def test_periodic_ball_wraps():
    g = _grid(16)
    m = Ball((0.0, 0.0), 0.2).mask(g)
    assert m.mask[0, 0] and m.mask[-1, -1] and m.mask[1, -1]
    assert not m.mask[8, 8]


def test_region_algebra():
    g = _grid(16)
    a, b = Box((0.0, 0.0), (0.5, 1.0)), Ball((0.5, 0.5), 0.2)
    assert np.array_equal((a - b).mask(g).mask, a.mask(g).mask & ~b.mask(g).mask)
    assert np.array_equal((a | b).mask(g).mask, a.mask(g).mask | b.mask(g).mask)


def test_boundary_layer():
    g = _grid(16)
    m = Box((0.2, 0.2), (0.8, 0.8)).mask(g)
    bl = m.boundary_layer()
    assert np.all(m.mask[bl])
    assert bl.sum() < m.count
    assert not RegionMask.full(g).boundary_layer().any()


# ---- field dump -----------------------------------------------------------------


def test_field_dump_layout(tmp_path):
    u = np.arange(24, dtype=float).reshape(2, 3, 4)
    p = tmp_path / "u.acfd"
    domain.write_field(p, u)
    raw = p.read_bytes()
    assert raw[:4] == b"ACFD"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert raw[8] == 3
    assert [int.from_bytes(raw[9 + 8 * i: 17 + 8 * i], "little") for i in range(3)] == [2, 3, 4]
    assert np.array_equal(np.frombuffer(raw[33:], "<f8"), u.ravel())
    assert np.array_equal(domain.read_field(p), u)


def test_field_dump_rejects_garbage(tmp_path):
    p = tmp_path / "bad.acfd"
    p.write_bytes(b"NOPE")
    with pytest.raises(GridError):
        domain.read_field(p)
    domain.write_field(p, np.ones((8, 8)))
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(GridError):
        domain.read_field(p)


# ---- properties -----------------------------------------------------------------


fields = st.integers(min_value=0, max_value=2**32 - 1)


@settings(max_examples=25, deadline=None)
@given(seed=fields, conformal=st.booleans())
def test_stiffness_symmetric_psd(seed, conformal):
    g = _grid(8, dim=3 if seed % 2 else 2, metric=None)
    if conformal:
        modes = [(0.1, (1,) * g.dim, 0.2)]
        g = g.with_metric(Metric.conformal(modes))
    K = g.stiffness
    assert spla.norm(K - K.T) <= 1e-12 * spla.norm(K)
    u = np.random.default_rng(seed).standard_normal(g.size)
    assert u @ (K @ u) >= -1e-12


@settings(max_examples=25, deadline=None)
@given(seed=fields)
def test_dirichlet_density_reproduces_form(seed):
    g = _grid(12, metric=CONFORMAL)
    u = np.random.default_rng(seed).standard_normal(g.shape)
    q = u.ravel() @ (g.stiffness @ u.ravel())
    assert abs(domain.integrate(g, domain.dirichlet_density(g, u)) - q) <= 1e-10 * q


@settings(max_examples=25, deadline=None)
@given(seed=fields)
def test_laplacian_self_adjoint(seed):
    rng = np.random.default_rng(seed)
    g = _grid(10, metric=CONFORMAL)
    u, v = rng.standard_normal((2,) + g.shape)
    a = domain.integrate(g, domain.laplacian(g, u) * v)
    b = domain.integrate(g, u * domain.laplacian(g, v))
    assert abs(a - b) <= 1e-10 * (abs(a) + 1)
