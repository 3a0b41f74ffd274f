"""
Uniform cell-centred grids on boxes and the fields that live on them.

Every other module works with values sampled at cell centres
``lo + (i + 1/2) * h`` of a 1D interval or a 2D rectangle. Integrals use the
midpoint rule, which is exact for cell-aligned piecewise constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import BadExponent, GridMismatch, ParseError, ZeroMass


@dataclass(frozen=True)
class Grid:
    """Box ``[lo_1, hi_1] x ... x [lo_d, hi_d]`` split into ``n_k`` cells per axis."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]
    n: tuple[int, ...]

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lo))
        hi = tuple(float(v) for v in np.atleast_1d(self.hi))
        n = tuple(int(v) for v in np.atleast_1d(self.n))
        if not (len(lo) == len(hi) == len(n)) or len(n) not in (1, 2):
            raise ValueError("grid must be 1D or 2D with matching lo/hi/n lengths")
        for a, b, m in zip(lo, hi, n):
            if not b > a:
                raise ValueError(f"upper bound {b} must exceed lower bound {a}")
            if m < 2:
                raise ValueError("need at least 2 cells per axis")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "n", n)

    @classmethod
    def interval(cls, lo: float, hi: float, n: int) -> "Grid":
        return cls((lo,), (hi,), (n,))

    @classmethod
    def rectangle(cls, lo: Sequence[float], hi: Sequence[float], n: Sequence[int]) -> "Grid":
        return cls(tuple(lo), tuple(hi), tuple(n))

    @property
    def dim(self) -> int:
        return len(self.n)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.n

    @property
    def size(self) -> int:
        return int(np.prod(self.n))

    @property
    def h(self) -> tuple[float, ...]:
        return tuple((b - a) / m for a, b, m in zip(self.lo, self.hi, self.n))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.h))

    @property
    def volume(self) -> float:
        return float(np.prod([b - a for a, b in zip(self.lo, self.hi)]))

    @property
    def diam(self) -> float:
        return float(np.sqrt(sum((b - a) ** 2 for a, b in zip(self.lo, self.hi))))

    def axis_centers(self, axis: int) -> np.ndarray:
        a, h, m = self.lo[axis], self.h[axis], self.n[axis]
        return a + (np.arange(m) + 0.5) * h

    def axis_edges(self, axis: int) -> np.ndarray:
        a, h, m = self.lo[axis], self.h[axis], self.n[axis]
        return a + np.arange(m + 1) * h

    @cached_property
    def coords(self) -> tuple[np.ndarray, ...]:
        """Cell-centre coordinate arrays, each of shape ``grid.shape``."""
        axes = [self.axis_centers(k) for k in range(self.dim)]
        return tuple(np.meshgrid(*axes, indexing="ij"))

    @cached_property
    def points(self) -> np.ndarray:
        """Cell centres flattened row-major, shape ``(size, dim)``."""
        return np.stack([c.ravel() for c in self.coords], axis=-1)

    def header(self) -> str:
        def fmt(vals):
            return ",".join(repr(v) for v in vals)

        return f"# grid dim={self.dim} n={fmt(self.n)} lo={fmt(self.lo)} hi={fmt(self.hi)}"

    @classmethod
    def from_header(cls, line: str) -> "Grid":
        parts = line.strip().lstrip("#").split()
        if not parts or parts[0] != "grid":
            raise ParseError("snapshot header must start with '# grid'", line=1)
        kv = dict(p.split("=", 1) for p in parts[1:])
        try:
            dim = int(kv["dim"])
            n = tuple(int(v) for v in kv["n"].split(","))
            lo = tuple(float(v) for v in kv["lo"].split(","))
            hi = tuple(float(v) for v in kv["hi"].split(","))
        except (KeyError, ValueError) as exc:
            raise ParseError(f"bad snapshot header: {exc}", line=1) from exc
        if len(n) != dim:
            raise ParseError("header dim does not match n", line=1)
        return cls(lo, hi, n)


def _frozen(values) -> np.ndarray:
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Field:
    grid: Grid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = _frozen(self.values)
        expected = self._expected_shape()
        if vals.shape != expected:
            if vals.size == int(np.prod(expected)):
                vals = _frozen(vals.reshape(expected))
            else:
                raise GridMismatch(f"values of shape {vals.shape} do not fit grid shape {expected}")
        object.__setattr__(self, "values", vals)

    def _expected_shape(self) -> tuple[int, ...]:
        return self.grid.shape

    def with_values(self, values):
        return type(self)(self.grid, values)


class ScalarField(Field):
    pass


class DensityField(Field):
    """Nonnegative cell values; a probability density once normalized."""

    def __post_init__(self):
        super().__post_init__()
        if np.any(self.values < 0) or not np.all(np.isfinite(self.values)):
            raise ValueError("density values must be finite and nonnegative")

    @property
    def masses(self) -> np.ndarray:
        return self.values * self.grid.cell_volume


class VectorField(Field):
    def _expected_shape(self):
        return self.grid.shape + (self.grid.dim,)

    def norm(self) -> ScalarField:
        return ScalarField(self.grid, np.linalg.norm(self.values, axis=-1))


def _check_same_grid(*fields: Field) -> Grid:
    g = fields[0].grid
    for f in fields[1:]:
        if f.grid != g:
            raise GridMismatch("fields live on different grids")
    return g


def quadrature(f: Field, weight: Field | None = None) -> float:
    """Midpoint rule: sum of values (times weight) times the cell volume."""
    if weight is None:
        return float(np.sum(f.values) * f.grid.cell_volume)
    _check_same_grid(f, weight)
    return float(np.sum(f.values * weight.values) * f.grid.cell_volume)


def normalize(f: Field) -> DensityField:
    mass = quadrature(f)
    if not mass > 0:
        raise ZeroMass(f"cannot normalize a field of mass {mass}")
    vals = np.asarray(f.values) / mass
    return DensityField(f.grid, vals)


def gradient(f: Field) -> VectorField:
    """Centred differences inside, one-sided first-order differences on boundary cells."""
    g = f.grid
    parts = np.gradient(np.asarray(f.values), *g.h, edge_order=1)
    if g.dim == 1:
        parts = [parts]
    return VectorField(g, np.stack(parts, axis=-1))


def lp_norm(f: Field, p: float) -> float:
    if p == np.inf or p == "inf":
        return float(np.max(np.abs(f.values)))
    p = float(p)
    if not p >= 1:
        raise BadExponent(f"p must be >= 1 or inf, got {p}")
    return float(np.sum(np.abs(f.values) ** p) * f.grid.cell_volume) ** (1.0 / p)


def uniform(grid: Grid) -> DensityField:
    return DensityField(grid, np.full(grid.shape, 1.0 / grid.volume))


def from_function(grid: Grid, fn, kind=DensityField):
    """Sample ``fn(*coords)`` at cell centres."""
    vals = np.broadcast_to(np.asarray(fn(*grid.coords), dtype=float), grid.shape)
    return kind(grid, vals)


def write_snapshot(f: Field, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f.grid.header()]
    lines.extend(repr(float(v)) for v in np.asarray(f.values).ravel())
    path.write_text("\n".join(lines) + "\n")


def read_snapshot(path: str | Path, kind=ScalarField) -> Field:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ParseError(f"{path}: empty snapshot", line=1)
    grid = Grid.from_header(lines[0])
    vals = []
    for k, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            vals.append(float(line))
        except ValueError as exc:
            raise ParseError(f"{path}: not a number: {line!r}", line=k) from exc
    if len(vals) != grid.size:
        raise ParseError(f"{path}: expected {grid.size} values, found {len(vals)}")
    return kind(grid, np.array(vals).reshape(grid.shape))
