import numpy as np
import pytest

from jkoflow.errors import BadParameter
from jkoflow.grid import DensityField, Grid, ScalarField, from_function, uniform
from jkoflow.elliptic import ks_energy, ks_energy_forms, outward_normal_derivative, solve_poisson

# odd sine modes 1, 3, ..., 31 per axis: 16 x 16 terms
ODD = np.arange(1, 32, 2)


def series_h(x, y):
    """Fourier-sine series of the Dirichlet solution of -Lap h = 1 on the unit square."""
    out = np.zeros(np.broadcast(x, y).shape)
    for m in ODD:
        for n in ODD:
            c = 16.0 / (np.pi**4 * m * n * (m * m + n * n))
            out += c * np.sin(m * np.pi * x) * np.sin(n * np.pi * y)
    return out


def series_mean():
    m, n = np.meshgrid(ODD, ODD, indexing="ij")
    return float(np.sum(64.0 / (np.pi**6 * m**2 * n**2 * (m**2 + n**2))))


def square(n):
    return Grid.rectangle((0.0, 0.0), (1.0, 1.0), (n, n))


def manufactured_error(n):
    g = square(n)
    rho = from_function(g, lambda x, y: 2 * np.pi**2 * np.sin(np.pi * x) * np.sin(np.pi * y))
    sol = solve_poisson(rho)
    exact = np.sin(np.pi * g.coords[0]) * np.sin(np.pi * g.coords[1])
    return float(np.max(np.abs(sol.h.values - exact)))


def test_zero_source():
    sol = solve_poisson(DensityField(square(8), np.zeros((8, 8))))
    assert np.all(sol.h.values == 0.0)


def test_manufactured_order():
    e32, e64 = manufactured_error(32), manufactured_error(64)
    assert np.log2(e32 / e64) >= 1.9


def test_uniform_matches_series():
    g = square(64)
    sol = solve_poisson(uniform(g))
    assert np.max(np.abs(sol.h.values - series_h(*g.coords))) <= 1e-4


def test_series_oracle_frozen():
    # truncated values, and their distance to the classical torsion constants
    assert series_h(0.5, 0.5) == pytest.approx(0.073667458605, abs=1e-11)
    assert series_mean() == pytest.approx(0.035143434042, abs=1e-11)
    assert abs(series_h(0.5, 0.5) - 0.0736713533) <= 5e-6
    assert abs(series_mean() - 0.0351442537) <= 5e-6


def test_ks_energy_uniform():
    assert ks_energy(uniform(square(64)), 1.0) == pytest.approx(-0.5 * series_mean(), abs=1e-4)


def test_ks_energy_sign_and_zero():
    g = square(16)
    assert ks_energy(DensityField(g, np.zeros((16, 16))), 1.0) == 0.0
    rho = from_function(g, lambda x, y: np.exp(-((x - 0.3) ** 2 + (y - 0.6) ** 2) / 0.02))
    assert ks_energy(rho, 2.0) < 0.0
    with pytest.raises(BadParameter):
        ks_energy(rho, 0.0)


def test_linearity():
    g = square(24)
    r1 = from_function(g, lambda x, y: 1 + x * y)
    r2 = from_function(g, lambda x, y: np.exp(-((x - 0.4) ** 2) / 0.05))
    h1, h2 = solve_poisson(r1, 1e-12).h.values, solve_poisson(r2, 1e-12).h.values
    h12 = solve_poisson(ScalarField(g, 2 * r1.values + 0.5 * r2.values), 1e-12).h.values
    assert np.max(np.abs(h12 - (2 * h1 + 0.5 * h2))) <= 1e-9


@pytest.mark.parametrize("dim", [1, 2])
def test_max_principle_and_boundary_flux(dim):
    rng = np.random.default_rng(dim)
    g = Grid.interval(0, 1, 64) if dim == 1 else square(32)
    rho = DensityField(g, rng.uniform(0, 2, g.shape))
    sol = solve_poisson(rho)
    assert sol.h.values.min() >= -1e-10
    assert outward_normal_derivative(sol).max() <= 1e-8
    assert sol.residual <= 1e-8 * np.max(rho.values) + 1e-10


def test_energy_forms_agree_under_refinement():
    gaps = []
    for n in (16, 32, 64):
        rho = from_function(square(n), lambda x, y: 1 + 0.5 * np.sin(np.pi * x) * np.sin(np.pi * y))
        gaps.append(ks_energy_forms(rho, 1.0).discrepancy)
    assert gaps[0] > gaps[1] > gaps[2]
