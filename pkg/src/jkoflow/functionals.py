"""
Energies ``F = E + G`` on grid densities.

A :class:`Functional` is a tuple of terms. ``evaluate`` sums their values;
``first_variation`` returns ``u[rho]``, the derivative of every term except
the entropy (the JKO stepper treats the entropy in closed form).

The module also carries the scalar functions used for displacement-convexity
estimates (``s log s``, ``s^q``, ``(s^p - K s^((d-1)/d))_+``, ``(s - K)_+^p``)
and a numerical test of the d-McCann condition.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np
from scipy.signal import convolve

from .elliptic import PoissonSolution, solve_poisson
from .errors import BadParameter
from .grid import DensityField, Field, Grid, ScalarField, from_function, quadrature


# ---------------------------------------------------------------------------
# terms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Entropy:
    pass


@dataclass(frozen=True)
class Potential:
    V: ScalarField
    lipschitz_V: float = float("nan")
    lambda_V: float = float("nan")


@dataclass(frozen=True)
class Interaction:
    """Even kernel ``W`` sampled at every grid displacement ``k * h``.

    ``stencil`` has shape ``(2 n_1 - 1, ..., 2 n_d - 1)``; the centre entry is
    ``W(0)``.
    """

    stencil: np.ndarray = field(repr=False)
    lipschitz_W: float = float("nan")
    mu_W: float = float("nan")

    def __post_init__(self):
        st = np.array(self.stencil, dtype=float)
        if not np.allclose(st, st[tuple(slice(None, None, -1) for _ in st.shape)], atol=1e-12, rtol=0):
            raise BadParameter("interaction kernel must be even: W(z) = W(-z)")
        st.setflags(write=False)
        object.__setattr__(self, "stencil", st)

    @classmethod
    def from_function(cls, grid: Grid, fn: Callable, lipschitz_W=float("nan"), mu_W=float("nan")) -> "Interaction":
        axes = [np.arange(-(m - 1), m) * h for m, h in zip(grid.n, grid.h)]
        z = np.meshgrid(*axes, indexing="ij")
        return cls(np.asarray(fn(*z), dtype=float), lipschitz_W, mu_W)

    def convolve(self, masses: np.ndarray) -> np.ndarray:
        """``(W * rho)(x_i) = sum_j W(x_i - x_j) m_j`` by direct summation."""
        full = convolve(masses, self.stencil, mode="full", method="direct")
        idx = tuple(slice(m - 1, 2 * m - 1) for m in masses.shape)
        return full[idx]


@dataclass(frozen=True)
class KellerSegel:
    chi: float
    tol: float = 1e-10

    def __post_init__(self):
        if not self.chi > 0:
            raise BadParameter("chi must be positive")


@dataclass(frozen=True)
class LqSmoothing:
    delta: float
    q: float = 2.0

    def __post_init__(self):
        if self.delta < 0:
            raise BadParameter("delta must be nonnegative")


Term = Union[Entropy, Potential, Interaction, KellerSegel, LqSmoothing]


@dataclass(frozen=True)
class Functional:
    terms: tuple = ()

    def __post_init__(self):
        terms = tuple(self.terms)
        if sum(isinstance(t, KellerSegel) for t in terms) > 1:
            raise BadParameter("at most one Keller-Segel term")
        object.__setattr__(self, "terms", terms)

    def validate(self, grid: Grid) -> None:
        for t in self.terms:
            if isinstance(t, LqSmoothing) and t.delta > 0 and not t.q > grid.dim / 2:
                raise BadParameter(f"L^q smoothing needs q > d/2, got q={t.q}, d={grid.dim}")
            if isinstance(t, Potential) and t.V.grid != grid:
                raise BadParameter("potential lives on a different grid")
            if isinstance(t, Interaction) and t.stencil.shape != tuple(2 * m - 1 for m in grid.n):
                raise BadParameter("interaction stencil does not match the grid")

    def of_type(self, kind) -> list:
        return [t for t in self.terms if isinstance(t, kind)]

    def has(self, kind) -> bool:
        return any(isinstance(t, kind) for t in self.terms)

    @property
    def keller_segel(self) -> KellerSegel | None:
        ks = self.of_type(KellerSegel)
        return ks[0] if ks else None

    def potential_values(self, grid: Grid) -> np.ndarray:
        """Sum of all ``Potential`` fields (zero if there are none)."""
        v = np.zeros(grid.shape)
        for t in self.of_type(Potential):
            v = v + t.V.values
        return v

    @property
    def nonlocal_terms(self) -> bool:
        return self.has(Interaction) or self.has(KellerSegel)

    def __add__(self, other: "Functional") -> "Functional":
        return Functional(self.terms + other.terms)


def entropy(rho: Field) -> float:
    v = np.asarray(rho.values)
    with np.errstate(divide="ignore", invalid="ignore"):
        integrand = np.where(v > 0, v * np.log(np.where(v > 0, v, 1.0)), 0.0)
    return float(np.sum(integrand) * rho.grid.cell_volume)


def _ks_solution(t: KellerSegel, rho: DensityField, cache: dict | None) -> PoissonSolution:
    if cache is not None and "poisson" in cache:
        return cache["poisson"]
    sol = solve_poisson(rho, t.tol, x0=None if cache is None else cache.get("poisson_x0"))
    if cache is not None:
        cache["poisson"] = sol
    return sol


def term_value(t: Term, rho: DensityField, cache: dict | None = None) -> float:
    g = rho.grid
    if isinstance(t, Entropy):
        return entropy(rho)
    if isinstance(t, Potential):
        return quadrature(t.V, weight=rho)
    if isinstance(t, Interaction):
        m = rho.masses
        return 0.5 * float(np.sum(m * t.convolve(m)))
    if isinstance(t, KellerSegel):
        sol = _ks_solution(t, rho, cache)
        return -0.5 * t.chi * quadrature(sol.h, weight=rho)
    if isinstance(t, LqSmoothing):
        if t.delta == 0:
            return 0.0
        return t.delta / t.q * float(np.sum(np.asarray(rho.values) ** t.q) * g.cell_volume)
    raise TypeError(f"unknown term {t!r}")


def evaluate(F: Functional, rho: DensityField, cache: dict | None = None) -> float:
    """Value of ``F`` at ``rho``; ``0 log 0 = 0`` in the entropy."""
    return float(sum(term_value(t, rho, cache) for t in F.terms))


def term_variation(t: Term, rho: DensityField, cache: dict | None = None) -> np.ndarray:
    g = rho.grid
    if isinstance(t, Entropy):
        return np.zeros(g.shape)
    if isinstance(t, Potential):
        return np.asarray(t.V.values)
    if isinstance(t, Interaction):
        return t.convolve(rho.masses)
    if isinstance(t, KellerSegel):
        return -t.chi * np.asarray(_ks_solution(t, rho, cache).h.values)
    if isinstance(t, LqSmoothing):
        if t.delta == 0:
            return np.zeros(g.shape)
        return t.delta * np.asarray(rho.values) ** (t.q - 1.0)
    raise TypeError(f"unknown term {t!r}")


def first_variation(F: Functional, rho: DensityField, cache: dict | None = None) -> ScalarField:
    """``u[rho] = V + W * rho - chi h[rho] + delta rho^(q-1)`` over the active terms."""
    u = np.zeros(rho.grid.shape)
    for t in F.terms:
        u = u + term_variation(t, rho, cache)
    return ScalarField(rho.grid, u)


def nonlocal_variation(F: Functional, rho: DensityField, cache: dict | None = None) -> np.ndarray:
    """The part of ``u[rho]`` frozen by the JKO fixed point (interaction and Keller-Segel)."""
    u = np.zeros(rho.grid.shape)
    for t in F.terms:
        if isinstance(t, (Interaction, KellerSegel)):
            u = u + term_variation(t, rho, cache)
    return u


# ---------------------------------------------------------------------------
# builtin potentials and kernels
# ---------------------------------------------------------------------------


def builtin_function(name: str, params: dict, dim: int) -> Callable:
    """Closed-form potentials by name; returns ``fn(*coords)``."""
    center = np.broadcast_to(np.asarray(params.get("center", 0.0), dtype=float), (dim,))

    def sqdist(coords):
        return sum((c - c0) ** 2 for c, c0 in zip(coords, center))

    if name == "quadratic":
        a = float(params.get("a", 1.0))
        return lambda *c: a * sqdist(c)
    if name == "linear":
        slope = np.broadcast_to(np.asarray(params.get("slope", 1.0), dtype=float), (dim,))
        offset = float(params.get("offset", 0.0))
        return lambda *c: offset + sum(s * x for s, x in zip(slope, c))
    if name == "cosine":
        amp = float(params.get("amplitude", 1.0))
        k = np.broadcast_to(np.asarray(params.get("wavenumber", 1.0), dtype=float), (dim,))
        return lambda *c: amp * np.prod([np.cos(np.pi * kk * x) for kk, x in zip(k, c)], axis=0)
    if name == "gaussian-well":
        depth = float(params.get("depth", 1.0))
        sigma = float(params.get("sigma", 0.25))
        return lambda *c: -depth * np.exp(-sqdist(c) / (2.0 * sigma**2))
    raise BadParameter(f"unknown builtin potential {name!r}")


def potential_field(grid: Grid, name: str, params: dict) -> ScalarField:
    return from_function(grid, builtin_function(name, params, grid.dim), ScalarField)


def estimate_lipschitz(V: ScalarField) -> float:
    """Largest finite-difference slope between neighbouring cells."""
    best = 0.0
    for axis, h in enumerate(V.grid.h):
        best = max(best, float(np.max(np.abs(np.diff(V.values, axis=axis)))) / h)
    return best


# ---------------------------------------------------------------------------
# McCann functions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Power:
    q: float

    def __call__(self, s):
        return np.asarray(s, dtype=float) ** self.q

    def deriv(self, s):
        return self.q * np.asarray(s, dtype=float) ** (self.q - 1.0)

    def scale(self, d: int) -> float:
        return 1.0


@dataclass(frozen=True)
class EntropyFn:
    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(s > 0, s * np.log(np.where(s > 0, s, 1.0)), 0.0)

    def deriv(self, s):
        s = np.asarray(s, dtype=float)
        with np.errstate(divide="ignore"):
            return np.log(s) + 1.0

    def scale(self, d: int) -> float:
        return 1.0


@dataclass(frozen=True)
class FpK:
    """``(s^p - K s^((d-1)/d))_+``."""

    p: float
    K: float
    d: int = 2

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        return np.maximum(s**self.p - self.K * s ** ((self.d - 1) / self.d), 0.0)

    def deriv(self, s):
        """Right derivative."""
        s = np.asarray(s, dtype=float)
        e = (self.d - 1) / self.d
        inner = s**self.p - self.K * s**e
        with np.errstate(divide="ignore", invalid="ignore"):
            d_inner = self.p * s ** (self.p - 1) - self.K * e * s ** (e - 1)
        return np.where(inner > 0, d_inner, np.where(inner == 0, np.maximum(d_inner, 0.0), 0.0))

    def scale(self, d: int) -> float:
        return self.K ** (-1.0 / (d * (self.p - 1.0) + 1.0))


@dataclass(frozen=True)
class FtildepK:
    """``(s - K)_+^p``."""

    p: float
    K: float

    def __call__(self, s):
        return np.maximum(np.asarray(s, dtype=float) - self.K, 0.0) ** self.p

    def deriv(self, s):
        return self.p * np.maximum(np.asarray(s, dtype=float) - self.K, 0.0) ** (self.p - 1.0)

    def scale(self, d: int) -> float:
        return self.K ** (-1.0 / d)


McCannFunction = Union[Power, EntropyFn, FpK, FtildepK]


@dataclass(frozen=True)
class McCannVerdict:
    passed: bool
    first_violation: float | None = None
    reason: str = ""

    def __bool__(self):
        return self.passed


def mccann_check(F: McCannFunction, d: int, samples: int = 2000, tol: float = 1e-9) -> McCannVerdict:
    """Test that ``g(s) = F(s^-d) s^d`` is convex and nonincreasing.

    Samples ``s`` log-uniformly over four decades around the function's
    natural scale and checks divided differences.
    """
    if d not in (1, 2):
        raise BadParameter("d must be 1 or 2")
    if samples < 100:
        raise BadParameter("need at least 100 samples")
    c = F.scale(d)
    s = c * np.logspace(-2.0, 2.0, samples)
    g = F(s ** (-float(d))) * s**d

    dg = np.diff(g)
    mag = np.maximum(1.0, np.abs(g[:-1]))
    bad = np.nonzero(dg > 1e-12 * mag)[0]
    if bad.size:
        return McCannVerdict(False, float(s[bad[0] + 1]), "not decreasing")

    slope = dg / np.diff(s)
    second = 2.0 * np.diff(slope) / (s[2:] - s[:-2])
    bad = np.nonzero(second < -tol)[0]
    if bad.size:
        return McCannVerdict(False, float(s[bad[0] + 1]), "not convex")
    return McCannVerdict(True)


def f_pk_integral(variant: McCannFunction, rho: Field) -> float:
    """``int F(rho) dx`` by the midpoint rule."""
    return float(np.sum(variant(np.asarray(rho.values))) * rho.grid.cell_volume)
