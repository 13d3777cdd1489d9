import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from aclab import allen_cahn as ac
from aclab import domain, lanczos, spectrum
from aclab.domain import Ball, Box
from aclab.errors import CoverageFailure, EmptyRegion, MonotonicityViolation


def _grid(n=32, metric=None):
    return domain.build_torus_grid(2, (1.0, 1.0), (n, n), metric)


def _residual_ok(op, res):
    for lam, r in zip(res.eigenvalues, res.residuals):
        assert r <= 1e-8 * (abs(lam) + 1)


# ---- assembly -------------------------------------------------------------------


def test_assemble_potential_terms():
    g = _grid(16)
    eps = 0.25
    assert np.all(spectrum.assemble(g, np.zeros(g.shape), eps).potential_term == -1 / eps**2)
    assert np.all(spectrum.assemble(g, np.ones(g.shape), eps).potential_term == 2 / eps**2)


def test_assemble_empty_region():
    g = _grid(16)
    with pytest.raises(EmptyRegion):
        spectrum.assemble(g, np.zeros(g.shape), 0.1, np.zeros(g.shape, dtype=bool))


@pytest.mark.parametrize("metric", [None, domain.Metric.conformal([(0.2, (1, 1), 0.0)])])
def test_operator_symmetric(metric):
    g = _grid(24, metric)
    u = np.tanh(np.random.default_rng(0).standard_normal(g.shape))
    op = spectrum.assemble(g, u, 0.1, Ball((0.5, 0.5), 0.3))
    assert op.max_asymmetry() <= 1e-12 * sp.linalg.norm(op.matrix)


@pytest.mark.parametrize("c", [-1.0, 0.0, 0.3, 1.0])
def test_constant_field_spectrum(c):
    g = _grid(16)
    eps = 0.2
    op = spectrum.assemble(g, np.full(g.shape, c), eps)
    vals = spectrum.eigen_smallest(op, op.size, "dense").eigenvalues
    expect = np.sort(g.laplacian_symbol.ravel() + (3 * c * c - 1) / eps**2)
    assert np.allclose(vals, expect, atol=1e-9 * (1 + abs(expect).max()))


# ---- eigen_smallest ------------------------------------------------------------


def test_zero_field_spectrum_64():
    g = _grid(64)
    op = spectrum.assemble(g, np.zeros(g.shape), 0.5)
    res = spectrum.eigen_smallest(op, 5, "lanczos")
    assert abs(res[1] + 4.0) <= 1e-10
    sym = g.laplacian_symbol[1, 0]
    assert np.allclose(res.eigenvalues[1:], sym - 4.0, atol=1e-8)
    assert sym - 4 == pytest.approx(4 * np.pi**2 - 4, rel=2e-3)
    _residual_ok(op, res)


def test_zero_field_spectrum_dense_oracle_32():
    g = _grid(32)
    op = spectrum.assemble(g, np.zeros(g.shape), 0.5)
    a = spectrum.eigen_smallest(op, 5, "lanczos").eigenvalues
    b = spectrum.eigen_smallest(op, 5, "dense").eigenvalues
    assert np.max(np.abs(a - b)) <= 1e-8


def test_well_spectrum():
    g = _grid(32)
    op = spectrum.assemble(g, np.ones(g.shape), 0.5)
    assert abs(spectrum.eigen_smallest(op, 1, "lanczos")[1] - 8.0) <= 1e-10


@pytest.mark.parametrize("mask", [None, Box((0.1, 0.2), (0.6, 0.9)), Ball((0.3, 0.5), 0.3)])
def test_lanczos_matches_dense_random_field(mask):
    g = _grid(32)
    u = np.random.default_rng(5).uniform(-1, 1, g.shape)
    op = spectrum.assemble(g, u, 0.1, mask)
    a = spectrum.eigen_smallest(op, 10, "lanczos")
    b = spectrum.eigen_smallest(op, 10, "dense")
    assert np.max(np.abs(a.eigenvalues - b.eigenvalues)) <= 1e-8
    assert np.all(np.diff(a.eigenvalues) >= 0)
    _residual_ok(op, a)


def test_eigen_smallest_rejects_bad_p():
    g = _grid(8)
    op = spectrum.assemble(g, np.zeros(g.shape), 0.5)
    for p in (0, op.size + 1):
        with pytest.raises(ValueError):
            spectrum.eigen_smallest(op, p)
    with pytest.raises(ValueError):
        spectrum.eigen_smallest(op, 2, "qr")


def test_sign_convention_matches_second_variation(flat_pair):
    p = flat_pair
    op = spectrum.assemble(p.grid, p.u, p.epsilon)
    res = spectrum.eigen_smallest(op, 4, vectors=True)
    for i in range(4):
        phi = op.to_nodal(res.eigenvectors[:, i])
        # rescaled form eps^-1 d^2 E over the L^2 norm is lambda
        q = ac.second_variation(p.grid, p.u, p.epsilon, phi) / p.epsilon
        lam = q / domain.integrate(p.grid, phi * phi)
        assert abs(lam - res.eigenvalues[i]) <= 1e-8 * (abs(lam) + 1)


# ---- Morse index -----------------------------------------------------------------


def test_index_of_well():
    g = _grid(16)
    assert spectrum.morse_index(g, np.ones(g.shape), 0.1) == 0


def _lattice_count(eps):
    k = np.arange(-20, 21)
    kk = k[:, None] ** 2 + k[None, :] ** 2
    return int(np.sum(4 * np.pi**2 * kk < eps**-2))


@pytest.mark.parametrize("eps, expect", [(0.5, 1), (0.1, 9)])
def test_index_of_zero_field(eps, expect):
    g = _grid(32)
    assert _lattice_count(eps) == expect
    assert spectrum.morse_index(g, np.zeros(g.shape), eps) == expect


@settings(max_examples=20, deadline=None)
@given(eps=st.floats(0.06, 1.0))
def test_index_of_zero_field_counts_discrete_modes(eps):
    g = _grid(16)
    sym = g.laplacian_symbol.ravel()
    tz = spectrum.zero_tolerance(eps)
    assume(np.min(np.abs(sym - eps**-2)) > 10 * tz)
    det = spectrum.morse_index_detail(g, np.zeros(g.shape), eps)
    assert det.index == int(np.sum(sym < eps**-2))
    assert det.near_zero == []


def test_near_zero_reported_separately(flat_pair):
    det = spectrum.morse_index_detail(flat_pair.grid, flat_pair.u, flat_pair.epsilon)
    # translation of the layers across the interface normal
    assert len(det.near_zero) == 1
    assert det.index == 1
    assert det.eigenvalues[0] < -det.tol_zero


# ---- monotonicity and additivity ------------------------------------------------------


def test_monotonicity_equal_regions():
    g = _grid(16)
    m = Ball((0.5, 0.5), 0.3)
    rep = spectrum.spectrum_monotonicity_check(g, np.zeros(g.shape), 0.2, m, m, 5)
    assert np.array_equal(rep.inner, rep.outer)
    assert rep.strict == []


def test_monotonicity_half_torus():
    g = _grid(16)
    half = Box((0.0, None), (0.5, None))
    rep = spectrum.spectrum_monotonicity_check(g, np.zeros(g.shape), 0.2, half, None, 4, solver="dense")
    assert 1 in rep.strict
    assert np.all(rep.inner >= rep.outer - 1e-9)


def test_monotonicity_rejects_non_nested():
    g = _grid(16)
    with pytest.raises(ValueError):
        spectrum.spectrum_monotonicity_check(g, np.zeros(g.shape), 0.2, None, Ball((0.5, 0.5), 0.2), 2)


def test_monotonicity_violation_names_q(monkeypatch):
    g = _grid(8)
    real = spectrum.eigen_smallest
    calls = []

    def fake(op, p, solver="auto", **kw):
        res = real(op, p, solver, **kw)
        calls.append(op)
        if len(calls) == 1:
            res.eigenvalues = res.eigenvalues.copy()
            res.eigenvalues[1] -= 1e3
        return res

    monkeypatch.setattr(spectrum, "eigen_smallest", fake)
    with pytest.raises(MonotonicityViolation) as info:
        spectrum.spectrum_monotonicity_check(g, np.zeros(g.shape), 0.2, Ball((0.5, 0.5), 0.3), None, 3)
    assert info.value.q == 2


boxes = st.tuples(st.integers(0, 3), st.integers(1, 3), st.integers(0, 13), st.integers(1, 10))


@settings(max_examples=20, deadline=None)
@given(a=boxes, b=boxes, seed=st.integers(0, 2**32 - 1))
def test_index_additivity_separated_masks(a, b, seed):
    g = _grid(16)
    u = np.random.default_rng(seed).uniform(-1, 1, g.shape)
    m1 = np.zeros(g.shape, dtype=bool)
    m2 = np.zeros(g.shape, dtype=bool)
    m1[a[0]: a[0] + a[1], a[2]: a[2] + a[3]] = True
    # rows 0..5 and 7..14: a one-row gap on both sides, including across the wrap
    m2[7 + b[0]: min(15, 7 + b[0] + b[1]), b[2]: b[2] + b[3]] = True
    assume(m1.any() and m2.any())
    i1, i2, i12 = spectrum.index_additivity(g, u, 0.15, m1, m2)
    assert i1 + i2 == i12


def test_additivity_rejects_overlap():
    g = _grid(16)
    m = Ball((0.5, 0.5), 0.2)
    with pytest.raises(ValueError):
        spectrum.index_additivity(g, np.zeros(g.shape), 0.2, m, m)


# ---- stability scan ----------------------------------------------------------------


def test_stability_scan_pair(flat_pair):
    p = flat_pair
    centers = spectrum.covering_centers(p.grid, 0.15)
    rows = spectrum.stability_scan(p.grid, p.u, p.epsilon, centers, 0.15)
    assert len(rows) == len(centers)
    assert all(r.stable for r in rows)


def test_stability_scan_zero_field():
    g = _grid(32)
    rows = spectrum.stability_scan(g, np.zeros(g.shape), 0.05, spectrum.covering_centers(g, 0.2), 0.2)
    assert any(not r.stable for r in rows)


def test_stability_scan_coverage(flat_pair):
    with pytest.raises(CoverageFailure):
        spectrum.stability_scan(flat_pair.grid, flat_pair.u, 0.1, [(0.5, 0.5)], 0.1)


def test_spectra_rows_schema(flat_pair):
    op = spectrum.assemble(flat_pair.grid, flat_pair.u, 0.1, label="full")
    rows = spectrum.spectra_rows("run", 0.1, spectrum.eigen_smallest(op, 3))
    assert spectrum.SPECTRA_COLUMNS == ("run_id", "epsilon", "region_label", "p", "lambda", "solver", "residual")
    assert [r[3] for r in rows] == [1, 2, 3]
    assert all(r[0] == "run" and r[2] == "full" for r in rows)


# ---- Krylov machinery ------------------------------------------------------------------


def _random_symmetric(n, seed, density=0.05):
    A = sp.random(n, n, density=density, random_state=seed)
    return sp.csr_matrix(A + A.T + sp.diags(np.random.default_rng(seed).standard_normal(n)))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), shift=st.floats(-2.0, 2.0))
def test_inertia_count(seed, shift):
    A = _random_symmetric(120, seed)
    w = np.linalg.eigvalsh(A.toarray())
    assume(np.min(np.abs(w - shift)) > 1e-8)
    n = lanczos.count_below(A, shift)
    if n is not None:
        assert n == int(np.sum(w < shift))


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_smallest_eigenpairs_vs_eigh(seed):
    A = _random_symmetric(200, seed)
    res = lanczos.smallest_eigenpairs(A, 6, seed=seed)
    w = np.linalg.eigvalsh(A.toarray())[:6]
    assert np.allclose(res.eigenvalues, w, atol=1e-9 * (1 + np.abs(w).max()))
    V = res.eigenvectors
    assert np.allclose(V.T @ V, np.eye(6), atol=1e-8)


def test_repeated_eigenvalues_recovered():
    # four-fold degenerate |k| = 1 cluster of the periodic Laplacian
    g = _grid(32)
    res = lanczos.smallest_eigenpairs(g.stiffness / g.cell_volume, 9)
    sym = np.sort(g.laplacian_symbol.ravel())[:9]
    assert np.allclose(res.eigenvalues, sym, atol=1e-8)


def test_shift_invert_nearest():
    A = sp.diags(np.arange(1.0, 101.0)).tocsr()
    res = lanczos.shift_invert_lanczos(A, 3, 50.2, which="nearest")
    assert np.allclose(np.sort(res.eigenvalues), [49.0, 50.0, 51.0])


def test_residual_floor_scales_with_norm():
    A = sp.identity(10, format="csr")
    assert lanczos.residual_floor(3.0 * A) == pytest.approx(3 * lanczos.residual_floor(A))
