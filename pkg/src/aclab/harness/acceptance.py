"""Acceptance suite AC-1 ... AC-12, shared by ``aclab verify`` and the test-suite.

Each criterion returns a :class:`Criterion` carrying the numbers behind its
verdict.  Expensive runs (the flat pair, the mountain pass) are computed once per
:class:`Suite` and shared between criteria.
"""

from __future__ import annotations

import dataclasses
import filecmp
import logging
import math
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import critical_points as cp, domain, spectrum, varifold as vf
from ..allen_cahn import QUARTIC, identity_tolerance, residual_linf, weighted_second_variation_identity
from ..limit_surface import jacobi_operator, jacobi_spectrum
from .config import bundled_config, load_config
from .pipeline import Report, run_experiment

log = logging.getLogger(__name__)

LEVELS = ("quick", "full")
QUICK_MAX_2D = 128
QUICK_MAX_3D = 32
# quick schedule: every grid is 128^2 (8 or more nodes per eps)
QUICK_EPSILONS = (0.1, 0.085, 0.0725, 0.0625)
N_BUMPS = 5
# bump radius as a fraction of the shortest period; the stability check carries
# an O((h / r)^2) quadrature error that 0.15 leaves above tol_id on 128^2 grids
BUMP_RADIUS = 0.3
ANALYTIC_REL = 5e-3
LAMBDA_ZERO = 1e-8


@dataclass
class Criterion:
    id: str
    title: str
    passed: bool
    seconds: float | None
    budget: float | None
    details: dict = field(default_factory=dict)
    message: str = ""

    @property
    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f": {self.message}" if self.message else ""
        return f"{self.id} {status} {self.title} ({self.seconds:.1f} s){extra}"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self) | {"status": "PASS" if self.passed else "FAIL"}


def _scaled(cfg, level: str, out: Path, seed: int):
    """Bundled config adapted to the verification level and output directory."""
    changes = {"output": str(out / cfg.name), "seed": seed}
    if level == "quick":
        eps = QUICK_EPSILONS
        res = tuple((QUICK_MAX_2D,) * cfg.dim if cfg.dim == 2 else (QUICK_MAX_3D,) * cfg.dim for _ in eps)
        cp.EpsSchedule(eps, res, cfg.lengths)  # validates the node density
        changes |= {"epsilons": eps, "resolutions": res}
        if cfg.surface_spacing is None:
            # the limit curve is sampled at half the coarse spacing so the Jacobi
            # eigenvalues p <= 5 stay inside the analytic 0.5% band
            changes["surface_spacing"] = 0.5 * min(L / n for L, n in zip(cfg.lengths, res[-1]))
    return dataclasses.replace(cfg, **changes)


class Suite:
    """Lazily computed runs shared by the criteria."""

    def __init__(self, level: str = "quick", out_dir=None, seed: int = 0):
        if level not in LEVELS:
            raise ValueError(f"level must be one of {LEVELS}, got {level!r}")
        self.level = level
        self.seed = int(seed)
        self._tmp = None
        if out_dir is None:
            self._tmp = tempfile.TemporaryDirectory(prefix="aclab-verify-")
            out_dir = self._tmp.name
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self._cache: dict = {}

    def config(self, name: str):
        return _scaled(load_config(bundled_config(name)), self.level, self.out, self.seed)

    def run(self, name: str) -> tuple[Report, float]:
        if name not in self._cache:
            t = time.perf_counter()
            rep = run_experiment(self.config(name))
            self._cache[name] = (rep, time.perf_counter() - t)
        return self._cache[name]

    def conformal_points(self) -> list:
        """Flat pair solved under a conformal metric varying across the layers."""
        if "conformal" not in self._cache:
            metric = domain.Metric.conformal([(0.2, (0, 1), 0.0), (0.05, (0, 2), 0.3)])
            pts = []
            for eps in (0.1, 0.0625):
                g = domain.build_torus_grid(2, (1.0, 1.0), (128, 128), metric)
                pts.append(cp.solve(g, cp.interface_pair(g, eps), eps, 1e-9))
            self._cache["conformal"] = pts
        return self._cache["conformal"]

    def converged_points(self) -> list:
        return self.run("flat_pair")[0].points + self.run("mountain_pass_k1")[0].points + self.conformal_points()


def _timed(fn):
    def wrapper(suite: Suite) -> Criterion:
        t = time.perf_counter()
        try:
            c = fn(suite)
        except Exception as exc:  # a crash is a failure of that criterion
            log.exception("criterion %s raised", fn.__name__)
            c = Criterion(fn.__name__.upper().replace("_", "-"), fn.__doc__.strip().splitlines()[0],
                          False, None, None, message=f"{type(exc).__name__}: {exc}")
        if c.seconds is None:
            c.seconds = time.perf_counter() - t
        if c.budget is not None and c.seconds > c.budget:
            c.passed = False
            c.message = (c.message + "; " if c.message else "") + f"runtime {c.seconds:.0f} s over {c.budget:.0f} s"
        return c
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


# --------------------------------------------------------------------------
# criteria


def _tanh_fourth_max() -> float:
    """``max |d^4/ds^4 tanh(s / sqrt 2)|``: with ``T = tanh``, ``T'''' = 8 T (1 - T^2)(2 - 3 T^2)``."""
    T = np.linspace(-1.0, 1.0, 200001)
    return float(np.max(np.abs(8.0 * T * (1 - T * T) * (2 - 3 * T * T)))) / 4.0


@_timed
def ac_1(suite: Suite) -> Criterion:
    """Heteroclinic exactness"""
    eps, n = 0.1, 256
    Lx = 2.0
    h = Lx / n
    grid = domain.build_torus_grid(2, (Lx, 8 * h), (n, 8))
    u = cp.interface_pair(grid, eps)
    res = residual_linf(grid, u, eps)
    bound = 5.0 * h**2 / eps**4 * _tanh_fourth_max()
    star = cp.newton_refine(grid, u, eps, 1e-10)
    again = cp.newton_refine(grid, star.u, eps, 1e-10)
    move = float(np.max(np.abs(again.u - star.u)))
    ok = res <= bound and star.residual_linf <= 1e-10 and move <= 1e-10
    return Criterion("AC-1", "Heteroclinic exactness", ok, None, 10.0, {
        "residual_linf": res, "bound": bound, "newton_residual": star.residual_linf,
        "fixed_point_move": move, "distance_to_samples": float(np.max(np.abs(star.u - u)))})


def _trend(values, target: float, band: float) -> bool:
    gaps = [abs(v - target) for v in values]
    return all(b <= a + band for a, b in zip(gaps, gaps[1:]))


@_timed
def ac_2(suite: Suite) -> Criterion:
    """Energy/mass limit"""
    rep, _ = suite.run("flat_pair")
    if rep.status != "OK":
        return Criterion("AC-2", "Energy/mass limit", False, None, None, message=rep.error or "run failed")
    e = [r["energy_over_2sigma"] for r in rep.rows]
    m = [r["mass"] for r in rep.rows]
    band = 1e-3 * 2.0
    ok_e = abs(e[-1] - 2.0) <= 0.02 * 2.0
    ok_m = abs(m[-1] - 2.0) <= 0.02 * 2.0
    mono = _trend(e, 2.0, band) and _trend(m, 2.0, band)
    secs = rep.stages.get("solve", 0.0) + rep.stages.get("varifold", 0.0)
    return Criterion("AC-2", "Energy/mass limit", ok_e and ok_m and mono, secs, 300.0, {
        "epsilons": [r["epsilon"] for r in rep.rows], "energy_over_2sigma": e, "mass": m,
        "trend_band": band, "monotone": mono})


@_timed
def ac_3(suite: Suite) -> Criterion:
    """Equipartition"""
    rep, _ = suite.run("flat_pair")
    d = [r["equipartition_defect"] for r in rep.rows]
    shrink = 1.0 - d[-1] / d[0] if d[0] > 0 else 0.0
    return Criterion("AC-3", "Equipartition", shrink >= 0.3, None, None,
                     {"defects": d, "shrink": shrink})


@_timed
def ac_4(suite: Suite) -> Criterion:
    """Stationarity"""
    rep, _ = suite.run("flat_pair")
    first, last = rep.rows[0], rep.rows[-1]
    ratios = []
    for j in (1, 2, 3):
        a, b = abs(first[f"first_variation_rhs_{j}"]), abs(last[f"first_variation_rhs_{j}"])
        ratios.append(b / a if a > 0 else math.inf)
    ok = all(r <= 0.25 for r in ratios)
    msg = "" if ok else "first-variation rhs does not fall to 25% (discretisation floor, see ledger)"
    return Criterion("AC-4", "Stationarity", ok, None, None, {
        "rhs_first": [first[f"first_variation_rhs_{j}"] for j in (1, 2, 3)],
        "rhs_last": [last[f"first_variation_rhs_{j}"] for j in (1, 2, 3)], "ratios": ratios}, msg)


def _band_length(surface, region) -> tuple[int, float]:
    """Nodes of the surface inside ``region`` and the Dirichlet length ``(M + 1) h``."""
    ids = surface.component_ids()
    mask = surface.region_mask(region)
    comps = np.unique(ids[mask])
    if len(comps) != 1:
        raise ValueError(f"band must cut exactly one component, got {len(comps)}")
    c = surface.components[int(comps[0])]
    m = int(mask.sum())
    return m, (m + 1) * c.measure / c.n_nodes


@_timed
def ac_5(suite: Suite) -> Criterion:
    """Spectral transfer and lower bound"""
    rep, secs = suite.run("flat_pair")
    if rep.status != "OK":
        return Criterion("AC-5", "Spectral transfer and lower bound", False, secs, 600.0,
                         message=rep.error or "run failed")
    cfg = suite.config("flat_pair")
    spectra = rep.limit["spectra"]
    lam_full = spectra["full"]["eigenvalues"]
    m, ell = _band_length(rep.surface, cfg.region("band"))
    lam_band = spectra["band"]["eigenvalues"]
    exact = [(p * math.pi / ell) ** 2 for p in range(1, len(lam_band) + 1)]
    rel = [abs(a - b) / b for a, b in zip(lam_band, exact)]
    rows = rep.verdicts["spectral_lower_bound"]
    verdict_ok = (isinstance(rows, list) and len(rows) == 2 * cfg.p
                  and all(r["status"] == "PASS" for r in rows))
    sign_ok = abs(lam_full[0]) <= LAMBDA_ZERO and all(r <= ANALYTIC_REL for r in rel)
    ok = verdict_ok and sign_ok
    msg = ""
    if not sign_ok:
        msg = "limit spectrum disagrees with the analytic values (sign convention?)"
    elif not verdict_ok:
        msg = "spectral lower-bound verdict failed"
    return Criterion("AC-5", "Spectral transfer and lower bound", ok, secs, 600.0, {
        "lambda_full": lam_full, "lambda_band": lam_band, "band_nodes": m, "band_length": ell,
        "analytic_band": exact, "relative_error": rel, "verdict_rows": rows,
        "rayleigh_transfer": rep.limit.get("rayleigh_transfer")}, msg)


@_timed
def ac_6(suite: Suite) -> Criterion:
    """Index bounds"""
    rep, secs = suite.run("mountain_pass_k1")
    stable, _ = suite.run("flat_pair")
    if rep.status != "OK" or stable.status != "OK":
        return Criterion("AC-6", "Index bounds", False, secs, 1200.0,
                         message=(rep.error or stable.error or "run failed"))
    idx = [r["index"] for r in rep.rows]
    neg_mp = rep.limit["index_V"]
    neg_stable = stable.limit["index_V"]
    ok = (all(0 <= i <= 1 for i in idx) and neg_mp <= 1
          and rep.verdicts["index_bound"]["status"] == "PASS" and neg_stable == 0)
    return Criterion("AC-6", "Index bounds", ok, secs, 1200.0, {
        "mountain_pass_indices": idx, "limit_negatives_mountain_pass": neg_mp,
        "limit_negatives_stable": neg_stable})


@_timed
def ac_7(suite: Suite) -> Criterion:
    """Eigensolver oracle"""
    grid = domain.build_torus_grid(2, (1.0, 1.0), (32, 32))
    eps = 0.1
    u = cp.interface_pair(grid, eps)
    masks = [None, domain.Box((0.1, 0.2), (0.6, 0.9)).mask(grid), domain.Ball((0.3, 0.5), 0.3).mask(grid)]
    errs = []
    for m in masks:
        op = spectrum.assemble(grid, u, eps, m)
        a = spectrum.eigen_smallest(op, 10, "lanczos").eigenvalues
        b = spectrum.eigen_smallest(op, 10, "dense").eigenvalues
        errs.append(float(np.max(np.abs(a - b))))
    counts = {}
    for e in (0.5, 0.1):
        counts[e] = spectrum.morse_index(grid, np.zeros(grid.shape), e)
    ok = max(errs) <= 1e-8 and counts == {0.5: 1, 0.1: 9}
    return Criterion("AC-7", "Eigensolver oracle", ok, None, 60.0,
                     {"max_abs_error": errs, "zero_field_index": {str(k): v for k, v in counts.items()}})


def _random_bumps(grid, rng, n, radius):
    L = np.asarray(grid.lengths)
    return [(tuple(float(c) for c in rng.uniform(0, 1, grid.dim) * L), radius) for _ in range(n)]


@_timed
def ac_8(suite: Suite) -> Criterion:
    """Second-variation identity and stability inequality"""
    rng = np.random.default_rng(suite.seed)
    pts = {"flat": suite.run("flat_pair")[0].points, "conformal": suite.conformal_points()}
    rows = []
    ok = True
    for kind, plist in pts.items():
        for p in plist:
            g, u, e = p.grid, p.u, p.epsilon
            phi = vf.smooth_bump(g, tuple(0.3 * l for l in g.lengths), 0.25 * min(g.lengths))
            idc = weighted_second_variation_identity(g, u, e, phi)
            tol = identity_tolerance(idc.lhs, idc.rhs, g, e)
            row = {"metric": kind, "epsilon": e, "identity_defect": idc.defect, "tol_id": tol, "bumps": []}
            ok &= idc.defect <= tol
            for c, r in _random_bumps(g, rng, N_BUMPS, BUMP_RADIUS * min(g.lengths)):
                if spectrum.morse_index(g, u, e, domain.Ball(c, r).mask(g)) != 0:
                    row["bumps"].append({"center": c, "skipped": "not stable in ball"})
                    continue
                bump = vf.smooth_bump(g, c, r)
                lhs, rhs, _ = vf.stability_inequality_check(g, u, e, bump)
                t = identity_tolerance(lhs, rhs, g, e)
                row["bumps"].append({"center": c, "lhs": lhs, "rhs": rhs, "tol_id": t})
                ok &= lhs <= rhs + t
            ok &= sum("lhs" in b for b in row["bumps"]) > 0
            rows.append(row)
    return Criterion("AC-8", "Second-variation identity and stability inequality", ok, None, 300.0,
                     {"rows": rows})


@_timed
def ac_9(suite: Suite) -> Criterion:
    """Pointwise Hessian bound"""
    viol = []
    for p in suite.converged_points():
        n, worst = vf.lemma_pointwise_violations(vf.build_diffuse_varifold(p.grid, p.u, p.epsilon))
        viol.append({"epsilon": p.epsilon, "metric": p.grid.metric.kind, "violations": n, "worst": worst})
    return Criterion("AC-9", "Pointwise Hessian bound", all(v["violations"] == 0 for v in viol), None, None,
                     {"runs": viol})


@_timed
def ac_10(suite: Suite) -> Criterion:
    """Generalised-curvature residual"""
    rows = []
    ok = True
    for p in suite.run("flat_pair")[0].points:
        g, u, e = p.grid, p.u, p.epsilon
        alpha = vf.smooth_bump(g, tuple(0.3 * l for l in g.lengths), 0.3 * min(g.lengths))
        for k, phi in enumerate(vf.standard_grassmann_tests(alpha, g.dim)):
            lhs, rhs, defect = vf.generalized_curvature_residual(g, u, e, phi)
            tol = identity_tolerance(float(np.max(np.abs(lhs))), float(np.max(np.abs(rhs))), g, e)
            rows.append({"epsilon": e, "test": k, "defect": defect, "tol_id": tol})
            ok &= defect <= tol
        n, worst = vf.B_bound_violations(vf.build_diffuse_varifold(g, u, e))
        rows.append({"epsilon": e, "B_violations": n, "worst_excess": worst})
        ok &= n == 0
    return Criterion("AC-10", "Generalised-curvature residual", ok, None, 300.0, {"rows": rows})


@_timed
def ac_11(suite: Suite) -> Criterion:
    """Min-max structure"""
    rep, _ = suite.run("flat_pair")
    cfg = suite.config("flat_pair")
    surf = rep.surface
    diffs = []
    for region in (None, cfg.region("band")):
        op = jacobi_operator(surf, region)
        p = min(cfg.p, int(op.mask.sum()))
        a = jacobi_spectrum(op, p, [1, 2], weighted=True).eigenvalues
        b = jacobi_spectrum(op, p).eigenvalues
        diffs.append(float(np.max(np.abs(a - b))))
    grid = domain.build_torus_grid(2, (1.0, 1.0), (20, 20))
    eps = 0.15
    u = cp.interface_pair(grid, eps)
    outer = domain.Box((0.0, 0.1), (0.6, 0.9)).mask(grid)
    inner = domain.Box((0.1, 0.2), (0.5, 0.7)).mask(grid)
    mono = spectrum.spectrum_monotonicity_check(grid, u, eps, inner, outer, 6, solver="dense")
    m1 = domain.Box((0.0, 0.0), (0.5, 1.0)).mask(grid)
    m2 = domain.Box((0.5, 0.0), (1.0, 1.0)).mask(grid)
    i1, i2, i12 = spectrum.index_additivity(grid, u, 0.1, m1, m2, solver="dense")
    balls = rep.limit["shrinking_ball"]
    flagged = any("dimension 1" in f for f in balls["flags"])
    ok = max(diffs) <= 1e-10 and i1 + i2 == i12 and flagged
    return Criterion("AC-11", "Min-max structure", ok, None, None, {
        "weighted_vs_unweighted": diffs, "monotonicity_inner": mono.inner.tolist(),
        "monotonicity_outer": mono.outer.tolist(), "index_additivity": [i1, i2, i12],
        "shrinking_ball": balls})


def _csvs(root: Path) -> list[Path]:
    return sorted(p.relative_to(root) for p in root.rglob("*.csv"))


@_timed
def ac_12(suite: Suite) -> Criterion:
    """Determinism"""
    from .plots import emit_plot_data

    outs = []
    for k in range(2):
        # the first quick run is shared with the other criteria
        sub = suite if k == 0 and suite.level == "quick" else Suite("quick", suite.out / f"determinism_{k}", suite.seed)
        rep, _ = sub.run("flat_pair")
        root = Path(sub.config("flat_pair").output)
        emit_plot_data(rep, root / "plots")
        outs.append(root)
    a, b = _csvs(outs[0]), _csvs(outs[1])
    same = a == b and all(filecmp.cmp(outs[0] / p, outs[1] / p, shallow=False) for p in a)
    return Criterion("AC-12", "Determinism", same and len(a) > 0, None, None,
                     {"files": [str(p) for p in a]})


CRITERIA = (ac_1, ac_2, ac_3, ac_4, ac_5, ac_6, ac_7, ac_8, ac_9, ac_10, ac_11, ac_12)


def verify_suite(level: str = "quick", out_dir=None, seed: int = 0, only=None, echo=print) -> tuple[int, list]:
    """Run the criteria; returns ``(exit_status, results)``.

    The exit status is 0 when every criterion passes and 1 otherwise; the first
    failing criterion is named on the last line.
    """
    suite = Suite(level, out_dir, seed)
    results = []
    for fn in CRITERIA:
        cid = fn.__name__.upper().replace("_", "-")
        if only and cid not in only:
            continue
        c = fn(suite)
        results.append(c)
        if echo:
            echo(c.line)
    failed = [c for c in results if not c.passed]
    if echo:
        echo(f"first failing criterion: {failed[0].id}" if failed else "all criteria passed")
    return (1 if failed else 0), results
