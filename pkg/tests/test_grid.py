import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jkoflow.errors import BadExponent, GridMismatch, ZeroMass
from jkoflow.grid import (
    DensityField,
    Grid,
    ScalarField,
    from_function,
    gradient,
    lp_norm,
    normalize,
    quadrature,
    read_snapshot,
    uniform,
    write_snapshot,
)


def step_density(n=64):
    g = Grid.interval(0.0, 1.0, n)
    return DensityField(g, np.where(g.axis_centers(0) < 0.5, 2.0, 0.0))


def test_grid_geometry():
    g = Grid.rectangle((0.0, -1.0), (2.0, 1.0), (4, 8))
    assert g.dim == 2 and g.shape == (4, 8)
    assert g.h == (0.5, 0.25)
    assert np.isclose(g.cell_volume * g.size, g.volume)
    assert np.allclose(g.axis_centers(0), [0.25, 0.75, 1.25, 1.75])


@pytest.mark.parametrize("lo,hi,n", [(1.0, 0.0, 4), (0.0, 1.0, 1)])
def test_grid_rejects_bad_boxes(lo, hi, n):
    with pytest.raises(ValueError):
        Grid.interval(lo, hi, n)


def test_density_rejects_negative_values():
    with pytest.raises(ValueError):
        DensityField(Grid.interval(0, 1, 4), [1.0, -1.0, 1.0, 1.0])


def test_normalize_constant():
    g = Grid.interval(0.0, 1.0, 16)
    out = normalize(DensityField(g, np.full(16, 2.0)))
    assert np.allclose(out.values, 1.0, atol=1e-15)


def test_normalize_identity_on_normalized():
    f = uniform(Grid.interval(0.0, 1.0, 10))
    assert np.array_equal(normalize(f).values, f.values)


def test_normalize_gaussian_against_fine_quadrature():
    g = Grid.interval(-2.0, 2.0, 64)
    f = from_function(g, lambda x: np.exp(-(x**2)))
    out = normalize(f)
    assert abs(quadrature(out) - 1.0) <= 1e-12
    fine = from_function(Grid.interval(-2.0, 2.0, 256), lambda x: np.exp(-(x**2)))
    # the 4x grid integral agrees with the coarse one to midpoint accuracy
    assert abs(quadrature(f) - quadrature(fine)) < 1e-3


def test_normalize_zero_mass():
    with pytest.raises(ZeroMass):
        normalize(DensityField(Grid.interval(0, 1, 4), np.zeros(4)))


def test_gradient_constant_and_linear():
    g = Grid.interval(0.0, 1.0, 32)
    assert np.all(gradient(ScalarField(g, np.full(32, 3.0))).values == 0.0)
    lin = gradient(from_function(g, lambda x: x, ScalarField)).values[..., 0]
    assert np.allclose(lin[1:-1], 1.0, atol=1e-12, rtol=0)


def test_gradient_sine_taylor_bound():
    g = Grid.interval(0.0, 1.0, 128)
    x = g.axis_centers(0)
    d = gradient(from_function(g, lambda x: np.sin(np.pi * x), ScalarField)).values[..., 0]
    err = np.max(np.abs(d[1:-1] - np.pi * np.cos(np.pi * x[1:-1])))
    assert err <= (np.pi * g.h[0]) ** 2


def test_gradient_2d_shape():
    g = Grid.rectangle((0, 0), (1, 1), (6, 5))
    v = gradient(from_function(g, lambda x, y: 2 * x + 3 * y, ScalarField)).values
    assert v.shape == (6, 5, 2)
    assert np.allclose(v[..., 0], 2.0) and np.allclose(v[..., 1], 3.0)


def test_quadrature_examples():
    assert np.isclose(quadrature(ScalarField(Grid.interval(0, 2, 10), np.ones(10))), 2.0)
    g = Grid.interval(0.0, 1.0, 50)
    x = from_function(g, lambda x: x, ScalarField)
    assert abs(quadrature(x, weight=uniform(g)) - 0.5) <= g.h[0] ** 2
    rho = step_density()
    ent = ScalarField(rho.grid, np.where(rho.values > 0, rho.values * np.log(np.where(rho.values > 0, rho.values, 1)), 0))
    assert abs(quadrature(ent) - np.log(2.0)) <= 1e-10


def test_quadrature_grid_mismatch():
    with pytest.raises(GridMismatch):
        quadrature(uniform(Grid.interval(0, 1, 4)), weight=uniform(Grid.interval(0, 1, 5)))


def test_lp_norm_examples():
    assert np.isclose(lp_norm(uniform(Grid.interval(0, 1, 8)), 3.0), 1.0)
    rho = step_density()
    assert np.isclose(lp_norm(rho, 2.0), np.sqrt(2.0), rtol=1e-14)
    assert lp_norm(rho, np.inf) == 2.0
    with pytest.raises(BadExponent):
        lp_norm(rho, 0.5)


def test_snapshot_roundtrip(tmp_path):
    g = Grid.rectangle((0, -1), (1, 1), (3, 4))
    f = ScalarField(g, np.arange(12.0) / 7.0)
    write_snapshot(f, tmp_path / "f.txt")
    assert (tmp_path / "f.txt").read_text().startswith("# grid dim=2 n=3,4")
    back = read_snapshot(tmp_path / "f.txt")
    assert back.grid == g and np.array_equal(back.values, f.values)


positive = st.lists(st.floats(0.01, 10.0), min_size=4, max_size=32)


@settings(max_examples=50, deadline=None)
@given(positive)
def test_normalize_idempotent(vals):
    f = DensityField(Grid.interval(0.0, 1.0, len(vals)), vals)
    once = normalize(f)
    assert np.allclose(normalize(once).values, once.values, rtol=1e-15, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(positive, st.floats(-3, 3), st.floats(-3, 3))
def test_quadrature_linear(vals, a, b):
    g = Grid.interval(0.0, 1.0, len(vals))
    f = ScalarField(g, vals)
    h = ScalarField(g, np.cos(np.arange(len(vals))))
    lhs = quadrature(ScalarField(g, a * f.values + b * h.values))
    assert abs(lhs - (a * quadrature(f) + b * quadrature(h))) <= 1e-12 * (1 + abs(a) + abs(b)) * 10


@settings(max_examples=50, deadline=None)
@given(positive)
def test_lp_norm_tends_to_sup(vals):
    f = normalize(DensityField(Grid.interval(0.0, 1.0, len(vals)), vals))
    sup = lp_norm(f, np.inf)
    gaps = [abs(sup - lp_norm(f, p)) for p in (2, 4, 8, 16, 32)]
    assert all(b <= a + 1e-12 for a, b in zip(gaps, gaps[1:]))
