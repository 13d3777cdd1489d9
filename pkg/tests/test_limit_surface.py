import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aclab import critical_points as cp
from aclab import domain
from aclab import limit_surface as ls
from aclab import varifold as vf
from aclab.domain import Ball, Box
from aclab.errors import (DegenerateLevelSet, EmptyRegion, InsufficientSchedule, MultiplicityAmbiguous,
                          TubeOverlap, ZeroNorm)

from conftest import CONFORMAL

SQ2 = math.sqrt(2.0)
UNIT = (1.0, 1.0)


def _grid(n=128, metric=None, lengths=UNIT):
    return domain.build_torus_grid(len(lengths), lengths, (n,) * len(lengths), metric)


def _line_mesh(n=128, offset=0.25, metric=None):
    comp = ls.straight_line(UNIT, 1, offset, n, metric)
    return ls.SurfaceMesh([comp], 2, UNIT, metric or domain.Metric.flat())


# ---- extraction ---------------------------------------------------------------------


def test_extract_tanh_pair():
    g = _grid(128)
    S = ls.extract_level_set(g, cp.interface_pair(g, 0.1))
    h = g.spacing[0]
    assert len(S.components) == 2
    for c in S.components:
        assert c.kind == "curve"
        assert abs(c.measure - 1.0) <= 2 * h
        assert np.max(c.curvature_sq) <= 1e-6
        assert np.allclose(np.abs(c.normals[:, 0]), 1.0, atol=1e-6)
    xs = sorted(float(np.mod(c.vertices[:, 0], 1.0).mean()) for c in S.components)
    assert xs == pytest.approx([0.25, 0.75], abs=1e-3)


def test_extract_zero_field_is_degenerate():
    g = _grid(16)
    with pytest.raises(DegenerateLevelSet):
        ls.extract_level_set(g, np.zeros(g.shape))


def test_extract_constant_sign_is_empty():
    g = _grid(16)
    assert ls.extract_level_set(g, np.ones(g.shape)).components == []


def test_extract_circle():
    g = _grid(256)
    r = 0.3
    u = np.tanh((r - g.distance_to((0.5, 0.5))) / (SQ2 * 0.03))
    S = ls.extract_level_set(g, u)
    assert len(S.components) == 1
    c = S.components[0]
    assert abs(c.measure - 2 * np.pi * r) <= 0.02 * 2 * np.pi * r
    assert np.max(np.abs(np.sqrt(c.curvature_sq) * r - 1.0)) <= 0.03


def test_extract_resampling_options():
    g = _grid(64)
    u = cp.interface_pair(g, 0.1)
    assert all(c.n_nodes == 40 for c in ls.extract_level_set(g, u, n_nodes=40).components)
    fine = ls.extract_level_set(g, u, spacing=0.5 / 64)
    assert all(c.n_nodes == 128 for c in fine.components)


def test_extract_planes_in_3d():
    g = _grid(24, lengths=(1.0, 1.0, 1.0))
    u = cp.interface_pair(g, 0.1)
    S = ls.extract_level_set(g, u)
    assert len(S.components) == 2
    for c in S.components:
        assert c.kind == "surface"
        assert c.measure == pytest.approx(1.0, rel=1e-6)
        assert np.max(c.curvature_sq) <= 1e-6
        assert ls.min_face_angle(c, g.lengths) >= ls.jacobi.MIN_ANGLE_DEG


def test_surface_mesh_helpers():
    g = _grid(64)
    S = ls.extract_level_set(g, cp.interface_pair(g, 0.1))
    assert S.min_separation() == pytest.approx(0.5, abs=1e-3)
    assert S.region_mask(None).all()
    left = S.region_mask(Box((0.0, None), (0.5, None)))
    assert left.sum() == S.components[0].n_nodes
    with pytest.raises(ValueError):
        S.region_mask(np.ones(3, dtype=bool))
    rows = S.to_dict()
    assert [r["multiplicity"] for r in rows] == [1, 1]


# ---- multiplicity ------------------------------------------------------------------------


@pytest.fixture(scope="module")
def pair_fields():
    g = _grid(256)
    u = cp.interface_pair(g, 0.05)
    return g, u, ls.extract_level_set(g, u)


def test_multiplicity_of_tanh_pair(pair_fields):
    g, u, S = pair_fields
    est = ls.estimate_multiplicity([vf.build_diffuse_varifold(g, u, 0.05)], S)
    assert est.theta == [1, 1]
    assert np.all((est.ratios >= 0.9) & (est.ratios <= 1.1))
    assert est.surface.multiplicities == [1, 1]


def test_doubled_profile_has_multiplicity_two():
    # two layers 4 eps apart are seen at the scale of the tube as one sheet of mass 2
    eps = 0.02
    g = _grid(512)
    x = g.coords[0]
    u = -np.tanh((x - 0.46) / (SQ2 * eps)) * np.tanh((x - 0.54) / (SQ2 * eps))
    lone = ls.extract_level_set(g, np.tanh(np.sin(2 * np.pi * (x - 0.5)) / 0.1))
    single = [c for c in lone.components if abs(np.mod(c.vertices[:, 0], 1).mean() - 0.5) < 0.1]
    S = ls.SurfaceMesh(single, 2, UNIT, g.metric)
    est = ls.estimate_multiplicity([vf.build_diffuse_varifold(g, u, eps)], S, tube=0.2)
    assert est.theta == [2]
    assert abs(est.ratios[-1, 0] - 2.0) <= 0.2


def test_ambiguous_multiplicity(pair_fields):
    g, u, S = pair_fields
    V = vf.build_diffuse_varifold(g, u, 0.05)
    half = ls.SurfaceMesh([ls.straight_line(UNIT, 1, 0.25, 64)], 2, UNIT, g.metric)
    # rescaling the weight gives a ratio near 1.45
    V.weight[...] *= 1.45
    with pytest.raises(MultiplicityAmbiguous) as info:
        ls.estimate_multiplicity([V], half, tube=0.2)
    assert info.value.args[0].startswith("component 0: mass ratio 1.4")


def test_multiplicity_needs_input(pair_fields):
    g, u, S = pair_fields
    with pytest.raises(ValueError):
        ls.estimate_multiplicity([], S)


# ---- Jacobi operator and spectra ---------------------------------------------------------------


def test_flat_geodesic_operator_is_laplacian():
    op = ls.jacobi_operator(_line_mesh())
    assert np.all(op.potential == 0.0)
    A = op.matrix().toarray()
    assert np.allclose(A, A.T)
    assert abs(np.sum(A @ np.ones(len(A)))) <= 1e-9


def test_circle_potential():
    r = 0.2
    S = ls.SurfaceMesh([ls.circle((0.5, 0.5), r, 64, UNIT)], 2, UNIT, domain.Metric.flat())
    op = ls.jacobi_operator(S)
    assert np.allclose(op.potential, 1 / r**2)


def test_conformal_potential_includes_ricci():
    S = _line_mesh(64, metric=CONFORMAL)
    op = ls.jacobi_operator(S)
    pts = np.mod(S.components[0].vertices, 1.0).T
    ric = CONFORMAL.ricci_frame(pts, UNIT)
    nu = S.components[0].normals
    expect = np.einsum("ab...,...a,...b->...", ric, nu, nu)
    assert np.allclose(op.potential, expect, atol=1e-12)
    assert np.max(np.abs(expect)) > 0.1
    assert np.all(ls.jacobi_operator(S, include_ricci=False).potential == 0.0)


def test_empty_mask():
    with pytest.raises(EmptyRegion):
        ls.jacobi_operator(_line_mesh(), Box((0.5, None), (0.6, None)))
    with pytest.raises(EmptyRegion):
        ls.jacobi_operator(ls.SurfaceMesh([], 2, UNIT, domain.Metric.flat()))


def test_closed_curve_spectrum():
    res = ls.jacobi_spectrum(ls.jacobi_operator(_line_mesh(512)), 3)
    lam = res.eigenvalues
    assert abs(lam[0]) <= 1e-9
    # discrete symbol of the second difference on 512 nodes
    h = 1.0 / 512
    sym = (2 / h * np.sin(np.pi * h)) ** 2
    assert lam[1:] == pytest.approx([sym, sym], abs=1e-6)
    # the symbol sits (pi h)^2 / 3 below the continuum value
    assert sym == pytest.approx(4 * np.pi**2, rel=2e-5)


def test_dirichlet_arc_spectrum():
    S = _line_mesh(512)
    ell = 0.5
    mask = Box((None, 0.0), (None, ell))
    res = ls.jacobi_spectrum(ls.jacobi_operator(S, mask), 5)
    # interior nodes of the open box span (M + 1) h with M masked nodes
    span = (int(S.region_mask(mask).sum()) + 1) / 512
    assert span == pytest.approx(ell, abs=1e-12)
    for p, lam in enumerate(res.eigenvalues, start=1):
        assert lam == pytest.approx((p * np.pi / ell) ** 2, rel=0.005)


@settings(max_examples=20, deadline=None)
@given(theta=st.lists(st.integers(1, 5), min_size=2, max_size=2), p=st.integers(1, 6))
def test_weighted_equals_unweighted(theta, p):
    S = ls.SurfaceMesh([ls.straight_line(UNIT, 1, 0.25, 48, CONFORMAL),
                        ls.circle((0.7, 0.5), 0.1, 40, UNIT, CONFORMAL)], 2, UNIT, CONFORMAL)
    op = ls.jacobi_operator(S)
    a = ls.jacobi_spectrum(op, p, theta, weighted=True).eigenvalues
    b = ls.jacobi_spectrum(op, p, theta, weighted=False).eigenvalues
    assert np.max(np.abs(a - b)) <= 1e-10


def test_lanczos_matches_dense():
    op = ls.jacobi_operator(_line_mesh(400, metric=CONFORMAL))
    a = ls.jacobi_spectrum(op, 4, solver="dense").eigenvalues
    b = ls.jacobi_spectrum(op, 4, solver="lanczos").eigenvalues
    assert np.allclose(a, b, atol=1e-8)
    with pytest.raises(ValueError):
        ls.jacobi_spectrum(op, 0)


def test_surface_dirichlet_monotonicity():
    S = _line_mesh(256, metric=CONFORMAL)
    small = ls.jacobi_spectrum(ls.jacobi_operator(S, Box((None, 0.1), (None, 0.4))), 4).eigenvalues
    big = ls.jacobi_spectrum(ls.jacobi_operator(S, Box((None, 0.05), (None, 0.6))), 4).eigenvalues
    assert np.all(small >= big - 1e-9)


def test_index_additivity_over_components():
    S = ls.SurfaceMesh([ls.circle((0.3, 0.3), 0.1, 60, UNIT), ls.circle((0.7, 0.7), 0.15, 90, UNIT)],
                       2, UNIT, domain.Metric.flat())
    ids = S.component_ids()
    whole = ls.jacobi_index(ls.jacobi_operator(S))
    parts = [ls.jacobi_index(ls.jacobi_operator(S, ids == i)) for i in (0, 1)]
    assert whole == sum(parts)
    # 1/r^2 exceeds the first nonzero circle modes: 3 negative modes per circle
    assert parts == [3, 3]


# ---- transfer ------------------------------------------------------------------------------------


def test_cutoff_profile():
    t = np.array([0.0, 0.49, 0.5, 0.75, 1.0, 2.0])
    eta = ls.cutoff(t)
    assert list(eta[:3]) == [1.0, 1.0, 1.0]
    assert eta[3] == pytest.approx(0.5)
    assert list(eta[4:]) == [0.0, 0.0]
    with pytest.raises(ValueError):
        ls.cutoff(t, 1.0)


def test_transfer_plateau():
    g = _grid(128)
    S = ls.SurfaceMesh([ls.circle((0.5, 0.5), 0.25, 128, UNIT)], 2, UNIT, g.metric)
    tau = 0.2
    phi = ls.transfer_test_function(S, np.ones(S.n_nodes), g, tau, plateau=0.5)
    d = np.abs(g.distance_to((0.5, 0.5)) - 0.25)
    assert np.allclose(phi[d < 0.45 * tau], 1.0, atol=1e-12)
    assert np.all(phi[d > 1.05 * tau] == 0.0)


def test_transfer_is_constant_along_normals():
    g = _grid(256)
    S = _line_mesh(256)
    s = np.arange(256) / 256
    phi = ls.transfer_test_function(S, np.sin(2 * np.pi * s), g, 0.2, plateau=0.5)
    dx = domain.coordinate_gradient(g, phi)[0]
    # the difference stencil must stay inside the plateau d < tau / 2
    d = np.abs(g.coords[0] - 0.25)
    tube = (d < 0.1 - 2 * g.spacing[0]) & (d > 2 * g.spacing[0])
    assert np.max(np.abs(dx[tube])) <= 1e-6


def test_transfer_tube_overlap():
    g = _grid(64)
    S = ls.extract_level_set(g, cp.interface_pair(g, 0.1))
    with pytest.raises(TubeOverlap):
        ls.transfer_test_function(S, np.ones(S.n_nodes), g, 0.3)


def test_projector_on_plane():
    S = ls.SurfaceMesh([ls.straight_line(UNIT, 1, 0.25, 64)], 2, UNIT, domain.Metric.flat())
    d, comp, _, _ = ls.SurfaceProjector(S).project(np.array([[0.35, 0.123], [0.9, 0.5]]))
    assert d == pytest.approx([0.1, 0.35])
    assert list(comp) == [0, 0]


# ---- Rayleigh transfer -----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def schedule():
    # thin strip: the cutoff at 0.8 tau must sit many widths out for J_i to approach J_V
    g = domain.build_torus_grid(2, (1.0, 1.0 / 64), (1024, 16))
    pts = [cp.newton_refine(g, cp.interface_pair(g, e), e, 1e-9) for e in (0.04, 0.03, 0.025, 0.02)]
    return pts, ls.extract_level_set(g, pts[-1].u)


def test_rayleigh_transfer_on_flat_geodesic(schedule):
    pts, S = schedule
    left = Box((0.0, None), (0.5, None))
    phi = S.region_mask(left).astype(float)
    rt = ls.rayleigh_transfer_check(pts, S, phi, left, tau=0.2)
    assert abs(rt.J_V) <= 1e-12
    assert len(rt.J_i) == 4
    assert all(j <= rt.slack for j in rt.J_i[-3:])
    assert rt.holds
    assert rt.to_dict()["status"] == "PASS"


def test_rayleigh_transfer_zero_norm(schedule):
    pts, S = schedule
    with pytest.raises(ZeroNorm):
        ls.rayleigh_transfer_check(pts, S, np.zeros(S.n_nodes))


def test_bulk_rayleigh_quotient_sign(flat_pair):
    p = flat_pair
    gn = np.sqrt(domain.norm_sq(domain.gradient(p.grid, p.u)))
    # the translation mode |grad u| is a near-zero direction
    assert abs(ls.rayleigh_quotient_bulk(p.grid, p.u, p.epsilon, gn)) <= 1e-2
    with pytest.raises(ZeroNorm):
        ls.rayleigh_quotient_bulk(p.grid, p.u, p.epsilon, np.zeros(p.grid.shape))


# ---- verdicts ------------------------------------------------------------------------------------------


def test_verdict_pass_for_approach_from_below():
    v = ls.spectral_verdict({"full": [0.0]}, {"full": [[-0.3], [-0.1], [-0.03], [-0.01]]}, k=0)
    assert v.spectral_pass and v.index_pass
    assert v.rows[0]["limsup_i"] == -0.01
    assert v.to_dict()["sing_V"] == "empty (desk scale)"


def test_verdict_fail_and_index():
    v = ls.spectral_verdict({"full": [-1.0, 0.0]}, {"full": [[0.5, 1.0]] * 3}, k=0)
    assert not v.spectral_pass
    assert v.index_V == 1 and not v.index_pass
    assert ls.spectral_verdict({"full": [-1.0, 0.0]}, {"full": [[-1.0, 0.0]] * 3}, k=1).index_pass


def test_verdict_needs_three_points():
    with pytest.raises(InsufficientSchedule):
        ls.spectral_verdict({"full": [0.0]}, {"full": [[0.0], [0.0]]}, k=0)


# ---- shrinking balls --------------------------------------------------------------------------------------


def test_shrinking_ball_on_curve_keeps_the_gap():
    S = _line_mesh(512)
    radii = [0.2, 0.1, 0.05]
    t = ls.shrinking_ball_spectrum(S, None, (0.25, 0.5), radii, 1)
    assert t.monotone
    assert t.base[0] == pytest.approx(0.0, abs=1e-9)
    for R, val in zip(radii, t.values[:, 0]):
        assert val == pytest.approx((np.pi / (1 - 2 * R)) ** 2, rel=0.01)
    assert t.gaps[0] > 5
    assert any("intrinsic dimension 1" in f for f in t.flags)


def test_shrinking_ball_on_surface_closes_the_gap():
    g = _grid(32, lengths=(1.0, 1.0, 1.0))
    S = ls.extract_level_set(g, cp.interface_pair(g, 0.1))
    S = ls.SurfaceMesh(S.components[:1], 3, g.lengths, g.metric)
    h = g.spacing[0]
    t = ls.shrinking_ball_spectrum(S, None, np.mod(S.components[0].vertices[0], 1.0),
                                   [16 * h, 8 * h, 4 * h], 1)
    assert t.monotone
    # punctured first eigenvalue decays like 1 / log(1 / R) in two dimensions
    assert t.values[-1, 0] < t.values[0, 0]
    assert not any("intrinsic dimension" in f for f in t.flags)


def test_shrinking_ball_rejects_increasing_radii():
    with pytest.raises(ValueError):
        ls.shrinking_ball_spectrum(_line_mesh(64), None, (0.25, 0.5), [0.1, 0.2], 1)


def test_ball_region_on_surface():
    S = _line_mesh(128)
    assert S.region_mask(Ball((0.25, 0.5), 0.1)).sum() == 25
