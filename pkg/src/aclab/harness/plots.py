"""Plot data: one CSV per figure plus a gnuplot script that draws it."""

from __future__ import annotations

from pathlib import Path

from .pipeline import Report, write_csv

FIGURES = ("spectra", "energy", "defects", "index")


def _rows(report) -> tuple[list, dict]:
    d = report.to_dict() if isinstance(report, Report) else dict(report)
    rows = d.get("rows") or []
    if not rows:
        raise ValueError("report has an empty schedule; nothing to plot")
    return rows, d


def _script(name: str, title: str, ylabel: str, plots: list[str], logy: bool = False) -> str:
    lines = [
        f"# gnuplot script for {name}.csv",
        "set datafile separator ','",
        "set key autotitle columnhead",
        f"set title '{title}'",
        "set xlabel 'eps'",
        "set logscale x",
        "set xrange [*:*] reverse",
        f"set ylabel '{ylabel}'",
    ]
    if logy:
        lines.append("set logscale y")
    lines += ["set terminal pngcairo size 800,600", f"set output '{name}.png'",
              "plot " + ", \\\n     ".join(plots), ""]
    return "\n".join(lines)


def emit_plot_data(report, out_dir) -> list[Path]:
    """Write ``<fig>.csv`` and ``<fig>.gp`` for spectra, energy, defects and index against eps.

    ``report`` is a :class:`Report` or its JSON dictionary.  Returns the written
    paths (CSV files first).
    """
    rows, d = _rows(report)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    k = d.get("config", {}).get("k", "")

    spec = []
    regions = []
    for r in rows:
        for region, lam in sorted(r.get("lambda", {}).items()):
            if region not in regions:
                regions.append(region)
            spec.extend((r["epsilon"], v, region, p) for p, v in enumerate(lam, start=1))
    csvs = {
        "spectra": (("eps", "value", "region", "p"), spec),
        "energy": (("eps", "energy", "energy_over_2sigma", "mass"),
                   [(r["epsilon"], r["energy"], r["energy_over_2sigma"], r["mass"]) for r in rows]),
        "defects": (("eps", "equipartition_defect", "first_variation_residual", "identity_defect", "tol_id"),
                    [(r["epsilon"], r["equipartition_defect"], r["first_variation_residual"],
                      r["identity_defect"], r["tol_id"]) for r in rows]),
        "index": (("eps", "index", "k"), [(r["epsilon"], r["index"], k) for r in rows]),
    }
    n_p = max((p for *_, p in spec), default=0)
    scripts = {
        "spectra": _script("spectra", "low eigenvalues of -L", "lambda_p", [
            f"'spectra.csv' using 1:($4=={p} && strcol(3) eq '{reg}' ? $2 : 1/0) with linespoints "
            f"title '{reg} p={p}'" for reg in regions for p in range(1, n_p + 1)]),
        "energy": _script("energy", "energy and mass", "value", [
            "'energy.csv' using 1:3 with linespoints", "'energy.csv' using 1:4 with linespoints"]),
        "defects": _script("defects", "identity and stationarity defects", "defect", [
            f"'defects.csv' using 1:{c} with linespoints" for c in (2, 3, 4, 5)], logy=True),
        "index": _script("index", "certified Morse index", "index", [
            "'index.csv' using 1:2 with linespoints", "'index.csv' using 1:3 with lines"]),
    }
    written = []
    for name in FIGURES:
        header, data = csvs[name]
        path = out / f"{name}.csv"
        write_csv(path, header, data)
        written.append(path)
    for name in FIGURES:
        path = out / f"{name}.gp"
        path.write_text(scripts[name])
        written.append(path)
    return written
