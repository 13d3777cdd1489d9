import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aclab import allen_cahn as ac
from aclab import critical_points as cp
from aclab import domain, spectrum
from aclab.errors import NotCritical, SupportError
from aclab.varifold import smooth_bump

SIGMA = math.sqrt(2.0) / 3.0


def _grid(n=64, lengths=(1.0, 1.0), metric=None):
    return domain.build_torus_grid(len(lengths), lengths, (n,) * len(lengths), metric)


# ---- potential ----------------------------------------------------------------


def test_potential_at_wells_and_origin():
    for u in (-1.0, 1.0):
        assert tuple(map(float, ac.potential_eval(u))) == (0.0, 0.0, 2.0)
    assert tuple(map(float, ac.potential_eval(0.0))) == (0.25, 0.0, -1.0)


def test_sigma_closed_form_matches_quadrature():
    assert ac.QUARTIC.sigma == SIGMA
    assert abs(ac.QUARTIC.sigma_quadrature() - SIGMA) <= 1e-10


def test_psi_primitive():
    p = ac.QUARTIC
    assert float(p.psi(0.0)) == 0.0
    assert abs(float(p.psi(1.0)) - SIGMA / 2) <= 1e-15
    t = np.linspace(-1.5, 1.5, 31)
    h = 1e-6
    deriv = (p.psi(t + h) - p.psi(t - h)) / (2 * h)
    # the integrand has a kink at +-1, where the central difference is O(h)
    assert np.allclose(deriv, np.sqrt(p.W(t) / 2), atol=1e-6)


def test_unknown_potential():
    with pytest.raises(ValueError):
        ac.get_potential("sextic")


# ---- energy -----------------------------------------------------------------


def test_energy_of_well_is_zero():
    g = _grid(16)
    assert ac.energy(g, np.ones(g.shape), 0.1).total == 0.0


@settings(max_examples=30, deadline=None)
@given(eps=st.floats(min_value=1e-3, max_value=10.0),
       L=st.tuples(st.floats(0.5, 3.0), st.floats(0.5, 3.0)))
def test_energy_of_zero_is_volume_over_4eps(eps, L):
    g = domain.build_torus_grid(2, L, (8, 8))
    e = ac.energy(g, np.zeros(g.shape), eps)
    assert e.dirichlet_part == 0.0
    assert abs(e.total - L[0] * L[1] / (4 * eps)) <= 1e-12 * e.total


def test_energy_two_interface_profile():
    g = _grid(512)
    e = ac.energy(g, cp.interface_pair(g, 0.05), 0.05)
    assert abs(e.total - 4 * SIGMA) <= 0.02 * 4 * SIGMA
    assert abs(e.total - (e.dirichlet_part + e.potential_part)) <= 1e-12 * e.total
    assert e.dirichlet_part > 0 and e.potential_part > 0


def test_energy_on_region():
    g = _grid(64)
    half = domain.Box((0.0, None), (0.5, None), label="left").mask(g)
    e = ac.energy(g, np.zeros(g.shape), 0.2, half)
    assert e.region == "left"
    # open box: 31 of 64 columns
    assert half.count == 31 * 64
    assert abs(e.total - half.count * g.cell_volume / 0.8) <= 1e-12


@pytest.mark.parametrize("eps", [0.0, -0.1, float("nan")])
def test_bad_epsilon(eps):
    g = _grid(8)
    with pytest.raises(ValueError):
        ac.energy(g, np.zeros(g.shape), eps)
    with pytest.raises(ValueError):
        ac.residual(g, np.zeros(g.shape), eps)


# ---- residual -------------------------------------------------------------------


@pytest.mark.parametrize("c", [-1.0, 0.0, 1.0])
def test_residual_of_constant_critical_points(c):
    g = _grid(16)
    assert np.all(ac.residual(g, np.full(g.shape, c), 0.1) == 0.0)


def test_tanh_residual_is_discretisation_error():
    eps = 0.1
    res = []
    for n in (128, 256, 512):
        g = domain.build_torus_grid(2, (2.0, 2.0 * 8 / n), (n, 8))
        h = g.spacing[0]
        r = ac.residual_linf(g, cp.interface_pair(g, eps), eps)
        # Laplacian truncation h^2 u''''/12 with max |u''''| <= 1.5 / eps^4
        assert r <= h**2 / eps**4
        res.append(r)
    assert 3.6 <= res[0] / res[1] <= 4.4
    assert 3.6 <= res[1] / res[2] <= 4.4


# ---- second variation ------------------------------------------------------------


def test_second_variation_at_well():
    g = _grid(32)
    eps = 0.2
    phi = np.sin(2 * np.pi * g.coords[0])
    val = ac.second_variation(g, np.ones(g.shape), eps, phi)
    dens = domain.dirichlet_density(g, phi)
    expect = domain.integrate(g, eps * dens + 2 / eps * phi**2)
    assert val > 0
    assert abs(val - expect) <= 1e-12 * val


def test_second_variation_constant_direction_at_zero():
    g = _grid(32)
    eps = 0.3
    assert abs(ac.second_variation(g, np.zeros(g.shape), eps, np.ones(g.shape)) + 1 / eps) <= 1e-12


def test_second_variation_matches_operator():
    rng = np.random.default_rng(3)
    g = _grid(24, metric=domain.Metric.conformal([(0.1, (1, 1), 0.0)]))
    eps = 0.15
    u = np.tanh(rng.standard_normal(g.shape))
    phi = rng.standard_normal(g.shape)
    op = spectrum.assemble(g, u, eps)
    # d^2 E = eps <phi, -L phi>
    form = eps * domain.integrate(g, phi * op.apply(phi))
    val = ac.second_variation(g, u, eps, phi)
    assert abs(val - form) <= 1e-10 * abs(val)


def test_second_variation_rejects_support_violation():
    g = _grid(16)
    mask = domain.Ball((0.5, 0.5), 0.2).mask(g)
    with pytest.raises(SupportError):
        ac.second_variation(g, np.zeros(g.shape), 0.1, np.ones(g.shape), mask)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), eps=st.floats(0.05, 1.0))
def test_second_variation_polarization(seed, eps):
    rng = np.random.default_rng(seed)
    g = _grid(12)
    u, phi, psi = rng.uniform(-1.2, 1.2, (3,) + g.shape)
    B = lambda f: ac.second_variation(g, u, eps, f)  # noqa: E731
    lhs = B(phi + psi) + B(phi - psi)
    rhs = 2 * B(phi) + 2 * B(psi)
    assert abs(lhs - rhs) <= 1e-10 * (abs(B(phi)) + abs(B(psi)))
    cross = ac.second_variation_bilinear(g, u, eps, phi, psi)
    assert abs(4 * cross - (B(phi + psi) - B(phi - psi))) <= 1e-10 * (abs(B(phi)) + abs(B(psi)))


# ---- weighted identity ------------------------------------------------------------


def test_identity_trivial_at_well():
    g = _grid(16)
    chk = ac.weighted_second_variation_identity(g, np.ones(g.shape), 0.1, np.ones(g.shape))
    assert chk.lhs == 0.0 and chk.rhs == 0.0


def _bump(g):
    return smooth_bump(g, (0.3, 0.3), 0.25)


def test_identity_flat(flat_pair):
    p = flat_pair
    chk = ac.weighted_second_variation_identity(p.grid, p.u, p.epsilon, _bump(p.grid))
    assert chk.defect <= ac.identity_tolerance(chk.lhs, chk.rhs, p.grid, p.epsilon)
    assert chk.lhs > 1.0


def test_identity_conformal(conformal_pair):
    p = conformal_pair
    g = p.grid
    chk = ac.weighted_second_variation_identity(g, p.u, p.epsilon, _bump(g))
    assert chk.defect <= ac.identity_tolerance(chk.lhs, chk.rhs, g, p.epsilon)
    # the Ricci contribution is active
    gu = domain.gradient(g, p.u)
    ric = np.einsum("ab...,a...,b...->...", g.ricci_frame, gu, gu)
    assert abs(domain.integrate(g, ric * _bump(g) ** 2)) > 10 * chk.defect


def test_identity_rejects_non_critical():
    g = _grid(64)
    u = cp.interface_pair(g, 0.1) * 0.9
    with pytest.raises(NotCritical):
        ac.weighted_second_variation_identity(g, u, 0.1, _bump(g))


def test_identity_tolerance_grows_on_coarse_grids():
    fine = _grid(256)
    coarse = _grid(64)
    assert ac.identity_tolerance(1.0, 1.0, fine, 0.1) == pytest.approx(3e-3)
    assert ac.identity_tolerance(1.0, 1.0, coarse, 0.1) > ac.identity_tolerance(1.0, 1.0, fine, 0.1)
