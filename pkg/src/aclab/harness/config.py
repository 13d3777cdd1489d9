"""Experiment configuration: TOML input, validation and a JSON echo."""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..allen_cahn import POTENTIALS
from ..critical_points import EpsSchedule
from ..domain import Ball, Box, Full, Metric, Region, build_torus_grid
from ..errors import ConfigError, ScheduleError

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

METHODS = ("gradient_flow", "mountain_pass")
INITIAL_KINDS = ("pair", "linear", "slab")


@dataclass(frozen=True)
class RegionSpec:
    name: str
    kind: str
    lower: tuple | None = None
    upper: tuple | None = None
    center: tuple | None = None
    radius: float | None = None

    def build(self) -> Region:
        if self.kind == "full":
            return Full(label=self.name)
        if self.kind == "box":
            return Box(tuple(self.lower), tuple(self.upper), label=self.name)
        return Ball(tuple(self.center), float(self.radius), label=self.name)


@dataclass(frozen=True)
class Tolerances:
    tol_res: float = 1e-9
    tol_id: float | None = None  # None: mesh-dependent default
    slack: float = 0.05
    tol_zero: float | None = None  # None: 1e-7 (1 + eps^-2)
    tail: int = 3


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    dim: int
    lengths: tuple
    epsilons: tuple
    resolutions: tuple
    metric: Metric = field(default_factory=Metric.flat)
    potential: str = "quartic"
    method: str = "gradient_flow"
    k: int = 0
    regions: tuple = (RegionSpec("full", "full"),)
    tolerances: Tolerances = field(default_factory=Tolerances)
    initial: dict = field(default_factory=dict)
    p: int = 5
    path_points: int = 16
    surface_spacing: float | None = None
    tube: float | None = None
    seed: int = 0
    output: str = "runs"

    @property
    def schedule(self) -> EpsSchedule:
        return EpsSchedule(self.epsilons, self.resolutions, self.lengths)

    def region(self, name: str) -> Region:
        for r in self.regions:
            if r.name == name:
                return r.build()
        raise KeyError(name)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["metric"] = self.metric.to_dict()
        out["lengths"] = list(self.lengths)
        out["epsilons"] = list(self.epsilons)
        out["resolutions"] = [list(r) for r in self.resolutions]
        return out


def _get(table: dict, key: str, kind, default=None, required: bool = False, where: str = ""):
    if key not in table:
        if required:
            raise ConfigError(f"missing required key {where}{key}")
        return default
    val = table[key]
    if kind is float and isinstance(val, int) and not isinstance(val, bool):
        val = float(val)
    if not isinstance(val, kind):
        raise ConfigError(f"{where}{key} must be {getattr(kind, '__name__', kind)}, got {val!r}")
    return val


def _metric(table: dict) -> Metric:
    kind = _get(table, "kind", str, "flat", where="metric.")
    if kind == "flat":
        return Metric.flat()
    if kind != "conformal":
        raise ConfigError(f"metric.kind must be 'flat' or 'conformal', got {kind!r}")
    modes = []
    for m in _get(table, "modes", list, [], where="metric."):
        if not isinstance(m, dict):
            raise ConfigError("metric.modes entries must be tables")
        modes.append((float(m.get("amplitude", 0.0)), tuple(int(k) for k in m.get("wavenumbers", ())),
                       float(m.get("phase", 0.0))))
    if not modes:
        raise ConfigError("conformal metric needs at least one mode")
    return Metric.conformal(modes)


def _regions(items, dim: int, lengths) -> tuple:
    out = []
    names = set()
    for i, r in enumerate(items):
        if not isinstance(r, dict):
            raise ConfigError(f"regions[{i}] must be a table")
        name = _get(r, "name", str, required=True, where=f"regions[{i}].")
        if name in names:
            raise ConfigError(f"duplicate region name {name!r}")
        names.add(name)
        kind = _get(r, "kind", str, required=True, where=f"regions[{i}].")
        if kind == "full":
            spec = RegionSpec(name, kind)
        elif kind == "box":
            lo = _get(r, "lower", list, required=True, where=f"regions[{i}].")
            hi = _get(r, "upper", list, required=True, where=f"regions[{i}].")
            if len(lo) != dim or len(hi) != dim:
                raise ConfigError(f"region {name!r}: box bounds need {dim} entries")
            for a, (l, h) in enumerate(zip(lo, hi)):
                if (l is None) != (h is None):
                    raise ConfigError(f"region {name!r}: axis {a} has only one bound")
                if l is not None and not (0.0 < h - l <= lengths[a]):
                    raise ConfigError(f"region {name!r} is empty along axis {a}")
            spec = RegionSpec(name, kind, lower=tuple(lo), upper=tuple(hi))
        elif kind == "ball":
            c = _get(r, "center", list, required=True, where=f"regions[{i}].")
            rad = _get(r, "radius", float, required=True, where=f"regions[{i}].")
            if len(c) != dim:
                raise ConfigError(f"region {name!r}: center needs {dim} entries")
            if not rad > 0:
                raise ConfigError(f"region {name!r} is empty (radius {rad})")
            spec = RegionSpec(name, kind, center=tuple(float(x) for x in c), radius=rad)
        else:
            raise ConfigError(f"region {name!r}: unknown kind {kind!r}")
        out.append(spec)
    if not out:
        raise ConfigError("at least one region is required")
    return tuple(out)


def parse_config(data: dict, source: str = "<dict>") -> ExperimentConfig:
    """Validate a decoded TOML document; raises :class:`ConfigError` before any solving."""
    try:
        return _parse(data)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def _parse(data: dict) -> ExperimentConfig:
    name = _get(data, "name", str, "experiment")
    grid = _get(data, "grid", dict, required=True)
    dim = _get(grid, "dim", int, required=True, where="grid.")
    if dim not in (2, 3):
        raise ConfigError(f"grid.dim must be 2 or 3, got {dim}")
    lengths = tuple(float(x) for x in _get(grid, "lengths", list, [1.0] * dim, where="grid."))
    if len(lengths) != dim or any(L <= 0 for L in lengths):
        raise ConfigError(f"grid.lengths must be {dim} positive numbers")
    metric = _metric(_get(data, "metric", dict, {}))
    potential = _get(data, "potential", str, "quartic")
    if potential not in POTENTIALS:
        raise ConfigError(f"unknown potential {potential!r}")
    method = _get(data, "method", str, "gradient_flow")
    if method not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}, got {method!r}")
    k = _get(data, "k", int, 0)
    if k < 0:
        raise ConfigError(f"index budget k must be >= 0, got {k}")

    sched = _get(data, "schedule", dict, required=True)
    eps = [float(e) for e in _get(sched, "epsilons", list, required=True, where="schedule.")]
    res = _get(sched, "resolutions", list, None, where="schedule.")
    try:
        if res is None:
            s = EpsSchedule.with_policy(eps, lengths, _get(sched, "nodes_per_eps", float, 12.8),
                                        _get(sched, "multiple", int, 8), _get(sched, "max_nodes", int, None))
        else:
            s = EpsSchedule(tuple(eps), tuple(tuple(int(n) for n in r) for r in res), lengths)
    except ScheduleError as exc:
        raise ConfigError(f"schedule: {exc}") from None
    if any(len(r) != dim for r in s.resolutions):
        raise ConfigError("schedule.resolutions entries need one count per axis")

    regions = _regions(_get(data, "regions", list, [{"name": "full", "kind": "full"}]), dim, lengths)
    tt = _get(data, "tolerances", dict, {})
    tol = Tolerances(
        tol_res=_get(tt, "tol_res", float, 1e-9, where="tolerances."),
        tol_id=_get(tt, "tol_id", float, None, where="tolerances."),
        slack=_get(tt, "slack", float, 0.05, where="tolerances."),
        tol_zero=_get(tt, "tol_zero", float, None, where="tolerances."),
        tail=_get(tt, "tail", int, 3, where="tolerances."),
    )
    if tol.tol_res <= 0 or tol.slack < 0 or tol.tail < 1:
        raise ConfigError("tolerances must be positive (tail >= 1)")
    initial = dict(_get(data, "initial", dict, {}))
    kind = initial.setdefault("kind", "pair" if method == "gradient_flow" else "linear")
    if kind not in INITIAL_KINDS:
        raise ConfigError(f"initial.kind must be one of {INITIAL_KINDS}, got {kind!r}")
    spectra = _get(data, "spectra", dict, {})
    p = _get(spectra, "p", int, 5, where="spectra.")
    if p < 1:
        raise ConfigError("spectra.p must be >= 1")
    limit = _get(data, "limit", dict, {})
    out = _get(data, "output", dict, {})
    cfg = ExperimentConfig(
        name=name, dim=dim, lengths=lengths, epsilons=s.epsilons, resolutions=s.resolutions,
        metric=metric, potential=potential, method=method, k=k, regions=regions, tolerances=tol,
        initial=initial, p=p, path_points=_get(data, "path_points", int, 16),
        surface_spacing=_get(limit, "surface_spacing", float, None, where="limit."),
        tube=_get(limit, "tube", float, None, where="limit."),
        seed=_get(data, "seed", int, 0), output=_get(out, "dir", str, f"runs/{name}", where="output."),
    )
    _check_regions_nonempty(cfg)
    return cfg


def _check_regions_nonempty(cfg: ExperimentConfig) -> None:
    grid = build_torus_grid(cfg.dim, cfg.lengths, cfg.resolutions[0], cfg.metric)
    for r in cfg.regions:
        if not r.build().mask(grid).mask.any():
            raise ConfigError(f"region {r.name!r} contains no grid nodes")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from None
    return parse_config(data, str(path))


def bundled_config(name: str) -> Path:
    """Path of a config shipped with the package (``flat_pair``, ``mountain_pass_k1``)."""
    path = Path(__file__).resolve().parent.parent / "configs" / f"{name.removesuffix('.toml')}.toml"
    if not path.exists():
        raise ConfigError(f"no bundled config named {name!r}")
    return path
