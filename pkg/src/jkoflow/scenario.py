"""
Scenario files: JSON documents (schema version 1) describing one JKO run.

Minimal example::

    {
      "schema": 1,
      "name": "heat_1d",
      "grid": {"lo": [0.0], "hi": [1.0], "n": [256]},
      "initial": {"type": "cosine-bump", "eps": 0.1, "mode": 1},
      "functional": {"entropy": true},
      "jko": {"tau": 0.001, "steps": 300},
      "checks": [{"id": "EnergyDissipation", "tol": 1e-6}]
    }

Paths inside a scenario (``file`` densities and potentials) are resolved
relative to the scenario file.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .diagnostics import CheckId, CheckParams, parse_check
from .errors import JkoFlowError, ParseError
from .functionals import (
    Entropy,
    Functional,
    Interaction,
    KellerSegel,
    LqSmoothing,
    Potential,
    builtin_function,
    potential_field,
)
from .grid import DensityField, Grid, ScalarField, from_function, normalize, read_snapshot
from .jko import JkoConfig

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
KS_CRITICAL_2D = 8.0 * math.pi


@dataclass(frozen=True)
class CheckSpec:
    id: CheckId
    params: CheckParams
    hard: bool = True


@dataclass(frozen=True)
class Scenario:
    name: str
    grid: Grid
    rho0: DensityField
    functional: Functional
    config: JkoConfig
    checks: tuple = ()
    lp_list: tuple = (2.0,)
    jp_list: tuple = (2.0,)
    out_dir: str | None = None
    snapshot_every: int = 0
    budget_seconds: float = float("inf")
    oracle_tolerance: float = 1e-5
    linf_cap: float | None = None  # ||rho_n||_inf <= (1 + n tau) * linf_cap
    path: Path | None = None
    warnings: tuple = ()


def bundled_dir():
    return resources.files("jkoflow") / "scenarios"


def bundled_names() -> list[str]:
    return sorted(p.name[:-5] for p in bundled_dir().iterdir() if p.name.endswith(".json"))


def resolve_path(spec: str) -> Path:
    """A path to a scenario file, or the name of a bundled scenario."""
    p = Path(spec)
    if p.exists():
        return p
    cand = bundled_dir() / (spec if spec.endswith(".json") else spec + ".json")
    if cand.is_file():
        return Path(str(cand))
    raise ParseError(f"no scenario file or bundled scenario named {spec!r}")


def _locate(text: str, key: str, as_value: bool = False) -> tuple[int | None, int | None]:
    pattern = r'"' + re.escape(key) + r'"' + ("" if as_value else r"\s*:")
    m = re.search(pattern, text)
    if not m:
        return None, None
    line = text.count("\n", 0, m.start()) + 1
    col = m.start() - (text.rfind("\n", 0, m.start()) + 1) + 1
    return line, col


class _Reader:
    """Typed access to the parsed JSON with located error messages."""

    def __init__(self, text: str, base: Path):
        self.text = text
        self.base = base

    def fail(self, key: str, msg: str):
        line, col = _locate(self.text, key)
        raise ParseError(msg, line, col)

    def fail_value(self, value: str, msg: str):
        """Like ``fail`` but locates a string value rather than a key."""
        line, col = _locate(self.text, value, as_value=True)
        raise ParseError(msg, line, col)

    def get(self, obj: dict, key: str, kind=float, default=..., check=None):
        if key not in obj:
            if default is ...:
                self.fail(key, f"missing required key {key!r}")
            return default
        val = obj[key]
        try:
            if kind is float:
                if isinstance(val, str) and val.lower() in ("inf", "infinity"):
                    val = math.inf
                elif isinstance(val, bool) or not isinstance(val, (int, float)):
                    raise TypeError
                val = float(val)
            elif kind is int:
                if isinstance(val, bool) or not isinstance(val, int):
                    raise TypeError
            elif kind is str:
                if not isinstance(val, str):
                    raise TypeError
            elif kind is bool:
                if not isinstance(val, bool):
                    raise TypeError
            elif kind in (list, dict):
                if not isinstance(val, kind):
                    raise TypeError
        except TypeError:
            self.fail(key, f"{key!r} must be of type {kind.__name__}, got {val!r}")
        if check is not None and not check(val):
            self.fail(key, f"invalid value for {key!r}: {val!r}")
        return val

    def vec(self, obj, key, dim, default=...):
        val = obj.get(key, default)
        if val is ...:
            self.fail(key, f"missing required key {key!r}")
        arr = np.atleast_1d(np.asarray(val, dtype=float))
        if arr.size == 1:
            arr = np.repeat(arr, dim)
        if arr.size != dim:
            self.fail(key, f"{key!r} needs {dim} entries")
        return arr


def _grid(r: _Reader, spec: dict) -> Grid:
    lo = np.atleast_1d(spec.get("lo", None) if "lo" in spec else r.fail("lo", "grid needs 'lo'"))
    hi = np.atleast_1d(spec.get("hi", None) if "hi" in spec else r.fail("hi", "grid needs 'hi'"))
    n = np.atleast_1d(spec.get("n", None) if "n" in spec else r.fail("n", "grid needs 'n'"))
    try:
        return Grid(tuple(lo), tuple(hi), tuple(int(v) for v in n))
    except (ValueError, TypeError) as exc:
        r.fail("grid", f"bad grid: {exc}")


def _density_values(r: _Reader, grid: Grid, spec: dict) -> np.ndarray:
    kind = r.get(spec, "type", str)
    d = grid.dim
    coords = grid.coords
    if kind == "uniform":
        return np.ones(grid.shape)
    if kind == "cosine-bump":
        eps = r.get(spec, "eps", float)
        mode = r.vec(spec, "mode", d, 1.0)
        wave = np.ones(grid.shape)
        for k in range(d):
            wave = wave * np.cos(mode[k] * math.pi * (coords[k] - grid.lo[k]) / (grid.hi[k] - grid.lo[k]))
        return 1.0 + eps * wave
    if kind == "gaussian":
        center = r.vec(spec, "center", d)
        sigma = r.get(spec, "sigma", float, check=lambda s: s > 0)
        floor = r.get(spec, "floor", float, 0.0, check=lambda s: s >= 0)
        sq = sum((coords[k] - center[k]) ** 2 for k in range(d))
        return np.exp(-sq / (2.0 * sigma**2)) + floor
    if kind == "mixture":
        comps = r.get(spec, "components", list)
        total = np.zeros(grid.shape)
        for c in comps:
            w = r.get(c, "weight", float, 1.0, check=lambda s: s >= 0)
            vals = _density_values(r, grid, c)
            total = total + w * vals / (np.sum(vals) * grid.cell_volume)
        return total
    if kind == "file":
        path = r.base / r.get(spec, "path", str)
        if not path.exists():
            r.fail("path", f"density file {path} does not exist")
        field_ = read_snapshot(path)
        if field_.grid != grid:
            r.fail("path", f"density file {path} is on a different grid")
        return np.asarray(field_.values)
    r.fail("type", f"unknown initial density type {kind!r}")


def _potential(r: _Reader, grid: Grid, spec: dict) -> Potential:
    if "file" in spec:
        path = r.base / r.get(spec, "file", str)
        if not path.exists():
            r.fail("file", f"potential file {path} does not exist")
        V = read_snapshot(path, ScalarField)
        if V.grid != grid:
            r.fail("file", "potential file is on a different grid")
    else:
        name = r.get(spec, "builtin", str)
        try:
            V = potential_field(grid, name, spec)
        except JkoFlowError as exc:
            r.fail("builtin", str(exc))
    lip = r.get(spec, "lipschitz", float, math.nan)
    lam = r.get(spec, "lambda", float, math.nan)
    return Potential(V, lip, lam)


def _interaction(r: _Reader, grid: Grid, spec: dict) -> Interaction:
    name = r.get(spec, "builtin", str)
    try:
        fn = builtin_function(name, {k: v for k, v in spec.items() if k != "center"}, grid.dim)
    except JkoFlowError as exc:
        r.fail("builtin", str(exc))
    lip = r.get(spec, "lipschitz", float, math.nan, check=lambda s: s >= 0 or math.isnan(s))
    mu = r.get(spec, "mu", float, math.nan, check=lambda s: s >= 0 or math.isnan(s))
    try:
        return Interaction.from_function(grid, fn, lip, mu)
    except JkoFlowError as exc:
        r.fail("interaction", str(exc))


def _functional(r: _Reader, grid: Grid, spec: dict, warnings: list) -> tuple[Functional, dict]:
    terms = []
    consts = {}
    if r.get(spec, "entropy", bool, True):
        terms.append(Entropy())
    if "potential" in spec:
        pspec = r.get(spec, "potential", dict)
        terms.append(_potential(r, grid, pspec))
        for key in ("lipschitz", "laplacian_bound"):
            if key in pspec:
                consts[key] = r.get(pspec, key, float)
    if "interaction" in spec:
        ispec = r.get(spec, "interaction", dict)
        terms.append(_interaction(r, grid, ispec))
        if "lipschitz" in ispec:
            consts["lip_W"] = r.get(ispec, "lipschitz", float)
    if "keller_segel" in spec:
        kspec = r.get(spec, "keller_segel", dict)
        chi = r.get(kspec, "chi", float, check=lambda s: s > 0)
        if grid.dim == 2 and chi >= KS_CRITICAL_2D:
            msg = f"chi = {chi:g} is not below the critical value 8 pi; the energy may be unbounded below"
            logger.warning(msg)
            warnings.append(msg)
        terms.append(KellerSegel(chi))
    if "smoothing" in spec:
        sspec = r.get(spec, "smoothing", dict)
        delta = r.get(sspec, "delta", float, check=lambda s: s >= 0)
        q = r.get(sspec, "q", float, 2.0, check=lambda s: s > grid.dim / 2 or delta == 0)
        terms.append(LqSmoothing(delta, q))
    elif "keller_segel" in spec:
        terms.append(LqSmoothing(1e-3, 2.0))
    F = Functional(tuple(terms))
    try:
        F.validate(grid)
    except JkoFlowError as exc:
        r.fail("functional", str(exc))
    return F, consts


def _config(r: _Reader, spec: dict) -> JkoConfig:
    tau = r.get(spec, "tau", float, check=lambda s: s > 0)
    steps = r.get(spec, "steps", int, 1, check=lambda s: s >= 0)
    eps = r.get(spec, "eps", float, None, check=lambda s: s > 0)
    kw = {}
    for key, kind in (("inner_tol", float), ("fixed_point_max", int), ("fixed_point_damping", float), ("newton_max", int), ("sinkhorn_max_iter", int)):
        if key in spec:
            kw[key] = r.get(spec, key, kind)
    try:
        return JkoConfig(tau=tau, steps=steps, eps=eps, **kw)
    except JkoFlowError as exc:
        r.fail("jko", str(exc))


_PARAM_KEYS = {
    "lip_V": float,
    "A": float,
    "lip_W": float,
    "jp_p": float,
    "fpk_p": float,
    "fpk_K": float,
    "D1_cap": float,
    "C_cap": float,
    "tol": float,
    "growth_rmax": float,
}


def _checks(r: _Reader, items: list, consts: dict, p_list: tuple) -> tuple:
    out = []
    for item in items:
        if isinstance(item, str):
            item = {"id": item}
        text = r.get(item, "id", str)
        try:
            cid = parse_check(text)
        except (KeyError, ValueError) as exc:
            r.fail_value(text, f"bad check {text!r}: {exc}")
        kw = {"p_list": p_list}
        if "lipschitz" in consts:
            kw["lip_V"] = consts["lipschitz"]
        if "laplacian_bound" in consts:
            kw["A"] = consts["laplacian_bound"]
        if "lip_W" in consts:
            kw["lip_W"] = consts["lip_W"]
        for key, kind in _PARAM_KEYS.items():
            if key in item:
                kw[key] = r.get(item, key, kind, check=(lambda v: v >= 0) if key == "tol" else None)
        if "H" in item:
            kw["H"] = item["H"]
        if "p_list" in item:
            kw["p_list"] = tuple(float(p) for p in item["p_list"])
        out.append(CheckSpec(cid, CheckParams(**kw), r.get(item, "hard", bool, True)))
    return tuple(out)


def _p_values(vals) -> tuple:
    return tuple(math.inf if str(v).lower() == "inf" else float(v) for v in vals)


def parse_scenario(text: str, base: Path | str = ".", path: Path | None = None) -> Scenario:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", exc.lineno, exc.colno) from exc
    if not isinstance(doc, dict):
        raise ParseError("scenario must be a JSON object", 1, 1)
    r = _Reader(text, Path(base))
    schema = r.get(doc, "schema", int)
    if schema != SCHEMA_VERSION:
        r.fail("schema", f"unsupported schema version {schema}; expected {SCHEMA_VERSION}")
    name = r.get(doc, "name", str, path.stem if path else "scenario")
    grid = _grid(r, r.get(doc, "grid", dict))
    vals = _density_values(r, grid, r.get(doc, "initial", dict))
    try:
        rho0 = normalize(DensityField(grid, vals))
    except (JkoFlowError, ValueError) as exc:
        r.fail("initial", f"bad initial density: {exc}")
    warnings: list = []
    F, consts = _functional(r, grid, r.get(doc, "functional", dict, {"entropy": True}), warnings)
    cfg = _config(r, r.get(doc, "jko", dict))
    norms = r.get(doc, "norms", dict, {})
    lp_list = _p_values(norms.get("lp", [2]))
    jp_list = _p_values(norms.get("jp", [2]))
    checks = _checks(r, r.get(doc, "checks", list, []), consts, tuple(p for p in lp_list if p != math.inf) or (2.0,))
    out = r.get(doc, "output", dict, {})
    monitors = r.get(doc, "monitors", dict, {})
    linf_cap = None
    if "linf_cap_factor" in monitors:
        linf_cap = r.get(monitors, "linf_cap_factor", float, check=lambda s: s > 0) * float(np.max(rho0.values))
    oracle = r.get(doc, "oracle", dict, {})
    return Scenario(
        name=name,
        grid=grid,
        rho0=rho0,
        functional=F,
        config=cfg,
        checks=checks,
        lp_list=lp_list,
        jp_list=jp_list,
        out_dir=out.get("dir"),
        snapshot_every=r.get(out, "snapshot_every", int, 0, check=lambda s: s >= 0),
        budget_seconds=r.get(doc, "budget_seconds", float, math.inf, check=lambda s: s > 0),
        oracle_tolerance=r.get(oracle, "tolerance", float, 1e-5, check=lambda s: s >= 0),
        linf_cap=linf_cap,
        path=path,
        warnings=tuple(warnings),
    )


def load_scenario(spec: str | Path) -> Scenario:
    path = resolve_path(str(spec))
    text = path.read_text()
    return parse_scenario(text, path.parent, path)
