"""End-to-end experiment: continuation, spectra, varifold diagnostics, limit and verdicts."""

from __future__ import annotations

import csv
import json
import logging
import platform
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from .. import __version__, critical_points as cp, domain, spectrum, varifold as vf
from ..allen_cahn import get_potential, identity_tolerance, weighted_second_variation_identity
from ..limit_surface import (estimate_multiplicity, extract_level_set, jacobi_index, jacobi_operator,
                             jacobi_spectrum, rayleigh_transfer_check, shrinking_ball_spectrum,
                             spectral_verdict)
from ..errors import NotStableInBall
from .config import ExperimentConfig

log = logging.getLogger(__name__)

STAGES = ("solve", "spectra", "varifold", "limit")
VARIFOLD_COLUMNS = ("run_id", "epsilon", "mass_total", "equipartition_defect", "first_variation_residual",
                    "curvature_l2", "ball_ratio_max")
N_BALLS = 4


def fmt(x) -> str:
    """Shortest round-trip text for CSV cells (stable across runs)."""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])


DIM_FLAG = ("diagnostic: ambient dimension 2 lies below the n + 1 >= 3 range of the convergence "
            "theory; results are consistency checks, not instances of it")


@dataclass
class Report:
    config: dict
    status: str = "OK"
    failed_stage: str | None = None
    error: str | None = None
    rows: list = field(default_factory=list)
    limit: dict = field(default_factory=dict)
    verdicts: dict = field(default_factory=dict)
    stages: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    points: list = field(default_factory=list, repr=False)  # converged fields, not serialised
    surface: object = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {"status": self.status, "failed_stage": self.failed_stage, "error": self.error,
                "config": self.config, "rows": self.rows, "limit": self.limit,
                "verdicts": self.verdicts, "stages": self.stages, "provenance": self.provenance,
                "flags": self.flags}

    def write(self, out: Path) -> None:
        (out / "report.json").write_text(json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True))


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        return float(x) if np.isfinite(x) else str(float(x))
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def _empty_verdicts(reason: str) -> dict:
    return {"spectral_lower_bound": {"status": reason}, "index_bound": {"status": reason},
            "rayleigh_transfer": {"status": reason}, "sing_V": "empty (desk scale)"}


# --------------------------------------------------------------------------
# stages


def initial_field(cfg: ExperimentConfig, grid, eps):
    ini = cfg.initial
    if ini["kind"] == "pair":
        u = cp.interface_pair(grid, eps, tuple(ini.get("positions", (0.25, 0.75))), int(ini.get("axis", 0)))
        amp = float(ini.get("perturbation", 0.0))
        if amp:
            rng = np.random.default_rng(cfg.seed)
            u = u + amp * rng.standard_normal(grid.shape)
        return u
    raise ValueError(f"initial kind {ini['kind']!r} needs the mountain-pass method")


def stage_solve(cfg: ExperimentConfig, potential) -> list:
    sched = cfg.schedule
    eps0, res0 = sched.epsilons[0], sched.resolutions[0]
    grid = domain.build_torus_grid(cfg.dim, cfg.lengths, res0, cfg.metric)
    tol = cfg.tolerances.tol_res
    if cfg.method == "gradient_flow":
        seed = cp.solve(grid, initial_field(cfg, grid, eps0), eps0, tol, potential=potential)
    else:
        seed = cp.mountain_pass(grid, eps0, path_points=cfg.path_points, tol_res=tol, seed=cfg.seed,
                                path=cfg.initial["kind"], potential=potential, max_index=max(cfg.k, 1))
    return cp.continue_in_eps(seed, sched, tol, potential, max_index=cfg.k)


def stage_spectra(cfg: ExperimentConfig, points, potential) -> dict:
    """``lambda_p^i(W)`` per region and schedule point."""
    table = {r.name: [] for r in cfg.regions}
    rows = []
    for pt in points:
        for r in cfg.regions:
            mask = r.build().mask(pt.grid)
            op = spectrum.assemble(pt.grid, pt.u, pt.epsilon, mask, potential, label=r.name)
            spec = spectrum.eigen_smallest(op, min(cfg.p, op.size), seed=cfg.seed)
            table[r.name].append([float(v) for v in spec.eigenvalues])
            rows.extend(spectrum.spectra_rows(cfg.name, pt.epsilon, spec))
    return {"table": table, "rows": rows}


def _vector_fields(grid):
    """Three fixed, generic test fields (none is annihilated by a symmetry of a flat pair)."""
    x = grid.coords
    L = grid.lengths
    d = grid.dim
    b1 = vf.smooth_bump(grid, tuple((0.35 if a == 0 else 0.4) * l for a, l in enumerate(L)), 0.25 * min(L))
    b3 = vf.smooth_bump(grid, tuple(0.7 * l for l in L), 0.3 * min(L))
    s = [np.sin(2 * np.pi * x[a] / L[a]) for a in range(d)]
    c = [np.cos(2 * np.pi * x[a] / L[a]) for a in range(d)]
    X1 = np.zeros((d,) + grid.shape)
    X1[0] = b1
    X2 = np.stack([np.sin(4 * np.pi * (x[0] / L[0] + 0.1)) + c[1]] +
                  [s[0] * c[(a + 1) % d] for a in range(1, d)])
    X3 = np.stack([b3 * (s[(a + 1) % d] if a else 1.0) for a in range(d)])
    return [X1, X2, X3]


def ball_ratios(grid, u, eps, V, potential) -> list[float]:
    """``r^2 int_{B(r/2)} |A|^2 / ||V||(B(r))`` at interface nodes where ``u`` is stable."""
    band = np.flatnonzero(np.abs(u).ravel() < 0.5)
    if band.size == 0:
        return []
    r = 0.1 * min(grid.lengths)
    out = []
    for j in band[np.linspace(0, band.size - 1, N_BALLS).astype(int)]:
        c = tuple(float(x.ravel()[j]) for x in grid.coords)
        try:
            out.append(vf.ball_curvature_bound(grid, u, eps, c, r, potential, V).ratio)
        except NotStableInBall:
            continue
    return out


def point_row(pt) -> dict:
    return {"epsilon": pt.epsilon, "N": int(pt.grid.shape[0]), "energy": pt.energy.total,
            "sup_norm": pt.sup_norm, "residual": pt.residual_linf,
            "index": -1 if pt.morse_index is None else pt.morse_index, "flags": list(pt.flags)}


def varifold_row(cfg: ExperimentConfig, pt, potential) -> tuple[dict, vf.DiffuseVarifold]:
    g, u, e = pt.grid, pt.u, pt.epsilon
    V = vf.build_diffuse_varifold(g, u, e, potential=potential)
    eq = vf.equipartition_defect(g, u, e, None, potential)
    fv = [vf.first_variation_defect(g, u, e, X, potential, V=V) for X in _vector_fields(g)]
    phi = vf.smooth_bump(g, tuple(0.3 * l for l in g.lengths), 0.25 * min(g.lengths))
    idc = weighted_second_variation_identity(g, u, e, phi, None, potential)
    tol_id = cfg.tolerances.tol_id or identity_tolerance(idc.lhs, idc.rhs, g, e)
    st_l, st_r, _ = vf.stability_inequality_check(g, u, e, phi, None, potential, tol_id)
    viol, _ = vf.lemma_pointwise_violations(V)
    balls = ball_ratios(g, u, e, V, potential)
    row = {
        "energy_over_2sigma": pt.energy.total / (2 * V.sigma), "mass": vf.mass(V),
        "equipartition_dirichlet": eq.dirichlet, "equipartition_potential": eq.potential,
        "equipartition_modica": eq.modica, "equipartition_defect": eq.defect,
        "first_variation_rhs_1": fv[0].rhs, "first_variation_rhs_2": fv[1].rhs,
        "first_variation_rhs_3": fv[2].rhs, "first_variation_defect": max(q.defect for q in fv),
        "first_variation_residual": max(abs(q.rhs) for q in fv),
        "curvature_l2": vf.measure_function_pairing(V, V.A_sq), "identity_lhs": idc.lhs,
        "identity_rhs": idc.rhs, "identity_defect": idc.defect, "tol_id": tol_id,
        "stability_lhs": st_l, "stability_rhs": st_r, "pointwise_violations": viol,
        "ball_ratio_max": max(balls) if balls else float("nan"), "stable_balls": len(balls),
    }
    return row, V


def stage_limit(cfg: ExperimentConfig, points, varifolds, spectra: dict) -> dict:
    last = points[-1]
    spacing = cfg.surface_spacing or min(last.grid.spacing)
    surface = extract_level_set(last.grid, last.u, spacing=spacing)
    if not surface.components:
        raise ValueError("final solution has no interface")
    mult = estimate_multiplicity(varifolds, surface, cfg.tube)
    surface = mult.surface
    theta = mult.theta
    lam_V, spec_rows, transfer = {}, {}, {}
    index_V = 0
    for r in cfg.regions:
        region = r.build()
        m = surface.region_mask(region)
        if not m.any():
            spec_rows[r.name] = {"status": "EMPTY"}
            continue
        op = jacobi_operator(surface, m, label=r.name)
        res = jacobi_spectrum(op, min(cfg.p, int(m.sum())), theta, weighted=True, vectors=True)
        lam_V[r.name] = [float(v) for v in res.eigenvalues]
        spec_rows[r.name] = {"eigenvalues": lam_V[r.name], "nodes": int(m.sum()),
                             "solver": res.solver, "residuals": res.residuals.tolist()}
        index_V = max(index_V, jacobi_index(op, 1e-8, theta))
        phi = np.zeros(surface.n_nodes)
        phi[op.index] = res.eigenvectors[:, 0]
        tau = min(0.25 * min(cfg.lengths), 0.5 * surface.min_separation())
        tr = rayleigh_transfer_check(points, surface, phi, region if r.kind != "full" else None, tau,
                                     cfg.tolerances.slack, cfg.tolerances.tail, theta)
        transfer[r.name] = tr.to_dict()
    verdict = spectral_verdict(lam_V, {k: v for k, v in spectra["table"].items() if k in lam_V}, cfg.k,
                               cfg.tolerances.slack, cfg.tolerances.tail, 1e-8, index_V)
    L = min(cfg.lengths)
    y = np.mod(surface.components[0].vertices[0], np.asarray(cfg.lengths))
    balls = shrinking_ball_spectrum(surface, None, y, [0.2 * L, 0.1 * L, 0.05 * L, 0.025 * L],
                                    min(3, cfg.p), theta)
    return {
        "components": surface.to_dict(), "multiplicity_ratios": mult.ratios.tolist(), "tube": mult.tube,
        "spectra": spec_rows, "rayleigh_transfer": transfer, "shrinking_ball": balls.to_dict(),
        "verdicts": verdict.to_dict(), "index_V": index_V, "_surface": surface,
    }


# --------------------------------------------------------------------------


def load_fields(cfg: ExperimentConfig, out: Path, potential) -> list | None:
    """Points saved by an earlier ``solve`` stage matching the schedule, or None."""
    fdir = out / "fields"
    points = []
    for i, (eps, res) in enumerate(cfg.schedule):
        path = fdir / f"u_{i:02d}.acfd"
        if not path.exists():
            return None
        p = cp.load_point(path, potential)
        if p.epsilon != eps or p.grid.shape != tuple(res) or p.residual_linf > cfg.tolerances.tol_res:
            return None
        points.append(p)
    return points


def run_experiment(cfg: ExperimentConfig, out_dir=None, save_fields: bool = True, until: str = "limit",
                   reuse_fields: bool = False) -> Report:
    """Run the stages up to ``until``, writing artifacts as they become available.

    With ``reuse_fields`` converged fields already present in the output
    directory replace the solve stage.  A failing stage ends the run with
    ``status = "FAILED"`` and the stage name; the report and every artifact
    produced so far are still written.
    """
    if until not in STAGES:
        raise ValueError(f"until must be one of {STAGES}, got {until!r}")
    stop = STAGES.index(until)
    out = Path(out_dir or cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    potential = get_potential(cfg.potential)
    report = Report(config=cfg.to_dict())
    report.verdicts = _empty_verdicts("NOT_RUN")
    if cfg.dim < 3:
        report.flags.append(DIM_FLAG)
    report.provenance = {"aclab": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                         "python": platform.python_version(), "platform": platform.platform(),
                         "seed": cfg.seed}
    t0 = time.perf_counter()
    stage = "solve"
    try:
        t = time.perf_counter()
        points = load_fields(cfg, out, potential) if reuse_fields else None
        reused = points is not None
        if not reused:
            points = stage_solve(cfg, potential)
        report.points = points
        report.rows = [point_row(pt) for pt in points]
        report.provenance["fields_reused"] = reused
        report.stages["solve"] = time.perf_counter() - t
        if save_fields and not reused:
            fdir = out / "fields"
            fdir.mkdir(exist_ok=True)
            for i, pt in enumerate(points):
                cp.save_point(pt, fdir / f"u_{i:02d}.acfd", cfg.seed)

        if stop < 1:
            return _finish(report, out, t0)
        stage = "spectra"
        t = time.perf_counter()
        spectra = stage_spectra(cfg, points, potential)
        write_csv(out / "spectra.csv", spectrum.SPECTRA_COLUMNS, spectra["rows"])
        report.stages["spectra"] = time.perf_counter() - t

        if stop < 2:
            return _finish(report, out, t0)
        stage = "varifold"
        t = time.perf_counter()
        varifolds = []
        for i, pt in enumerate(points):
            row, V = varifold_row(cfg, pt, potential)
            report.rows[i].update(row)
            report.rows[i]["lambda"] = {k: v[i] for k, v in spectra["table"].items()}
            varifolds.append(V)
        write_csv(out / "varifold_metrics.csv", VARIFOLD_COLUMNS,
                  [[cfg.name, r["epsilon"], r["mass"], r["equipartition_defect"], r["first_variation_residual"],
                    r["curvature_l2"], r["ball_ratio_max"]] for r in report.rows])
        report.stages["varifold"] = time.perf_counter() - t

        if stop < 3:
            return _finish(report, out, t0)
        stage = "limit"
        t = time.perf_counter()
        limit = stage_limit(cfg, points, varifolds, spectra)
        report.surface = limit.pop("_surface")
        report.limit = limit
        report.verdicts = dict(limit["verdicts"])
        report.verdicts["rayleigh_transfer"] = {
            k: v["status"] for k, v in limit["rayleigh_transfer"].items()}
        (out / "limit_report.json").write_text(json.dumps(_jsonable(limit), indent=2, sort_keys=True))
        report.stages["limit"] = time.perf_counter() - t
    except Exception as exc:  # fail fast; the partial report is the forensic record
        log.error("stage %s failed: %s", stage, exc)
        report.status = "FAILED"
        report.failed_stage = stage
        report.error = f"{type(exc).__name__}: {exc}"
        report.provenance["traceback"] = traceback.format_exc()
        report.verdicts = {**_empty_verdicts(f"FAILED ({stage})"), **{
            k: v for k, v in report.verdicts.items() if not (isinstance(v, dict) and v.get("status") == "NOT_RUN")}}
    return _finish(report, out, t0)


def _finish(report: Report, out: Path, t0: float) -> Report:
    report.provenance["wall_time"] = time.perf_counter() - t0
    report.write(out)
    return report
