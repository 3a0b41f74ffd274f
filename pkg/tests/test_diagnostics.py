import csv

import numpy as np
import pytest

from jkoflow.diagnostics import (
    CheckId,
    CheckParams,
    EnergyDissipation,
    FiveGradients,
    JpSemiconvex,
    LpLipschitzW,
    Verdict,
    WeightedSupFP,
    H_catalog,
    check_step,
    csv_header,
    five_gradients_residual,
    j_H,
    j_p,
    log_lipschitz,
    parse_check,
    power_H,
    rho_floor,
    total_variation,
    write_csv,
    z_field,
)
from jkoflow.errors import NonPositiveDensity, WrongModelClass
from jkoflow.functionals import Entropy, Functional, Interaction, KellerSegel, Potential, potential_field
from jkoflow.grid import DensityField, Grid, ScalarField, from_function, normalize, uniform
from jkoflow.jko import JkoConfig, run
from jkoflow.ot import exact_ot_1d


def line(n=128, lo=0.0, hi=1.0):
    return Grid.interval(lo, hi, n)


def cos_density(g, eps=0.1):
    return normalize(from_function(g, lambda x: 1 + eps * np.cos(np.pi * x)))


def zero(g):
    return ScalarField(g, np.zeros(g.shape))


def gibbs(V):
    return normalize(DensityField(V.grid, np.exp(-V.values)))


def test_z_field_steady_state_and_uniform():
    g = line(128, -1, 1)
    V = potential_field(g, "quadratic", {"a": 2.0})
    assert np.max(z_field(gibbs(V), V).norm().values) <= 10 * g.h[0]
    z = z_field(uniform(g), zero(g)).values[1:-1]
    assert np.all(z == 0.0)


def test_z_field_pointwise_formula():
    g = line(128)
    x = g.axis_centers(0)
    rho = from_function(g, lambda x: 1 + 0.1 * np.cos(np.pi * x))
    z = z_field(rho, zero(g)).values[1:-1, 0]
    exact = -0.1 * np.pi * np.sin(np.pi * x) / (1 + 0.1 * np.cos(np.pi * x))
    assert np.max(np.abs(z - exact[1:-1])) <= 2 * (np.pi * g.h[0]) ** 2


def test_j_p_steady_state():
    g = line(128, -1, 1)
    V = potential_field(g, "quadratic", {"a": 2.0})
    for p in (1.5, 2.0, 3.0):
        assert j_p(gibbs(V), V, p) <= (10 * g.h[0]) ** p


def test_j_p_heat_case():
    eps = 0.01
    g = line(256)
    rho = from_function(g, lambda x: 1 + eps * np.cos(np.pi * x))
    # quadrature of rho'^2 / rho on a 4x finer grid
    fine = line(1024).axis_centers(0)
    oracle = np.sum((eps * np.pi * np.sin(np.pi * fine)) ** 2 / (1 + eps * np.cos(np.pi * fine))) / 1024
    assert j_p(rho, zero(g), 2.0) == pytest.approx(oracle, rel=1e-2)
    assert oracle == pytest.approx(eps**2 * np.pi**2 / 2, rel=eps)


def test_j_p_reflection_invariant():
    g = line(100, -1, 1)
    rho = normalize(from_function(g, lambda x: 1 + 0.3 * x + 0.2 * np.sin(3 * x)))
    flipped = DensityField(g, rho.values[::-1])
    assert j_p(flipped, zero(g), 2.5) == pytest.approx(j_p(rho, zero(g), 2.5), rel=1e-12)


def test_rho_floor():
    assert rho_floor(uniform(line(8, 0, 2))) == 0.5e-12


def test_five_gradients_identity_pair():
    rho = cos_density(line(64), 0.3)
    tr = exact_ot_1d(rho, rho)
    assert five_gradients_residual(rho, rho, tr, "square") == pytest.approx(0.0, abs=1e-12)


def test_five_gradients_translation_pair():
    g = line(200, 0, 2)
    bump = lambda c: normalize(from_function(g, lambda x: 1e-8 + np.exp(-((x - c) ** 2) / 0.01)))
    rho, eta = bump(0.7), bump(1.1)
    res = five_gradients_residual(rho, eta, exact_ot_1d(rho, eta), "square")
    assert res >= -1e-6


def test_log_lipschitz_examples():
    g = line(200, -1, 1)
    V = potential_field(g, "quadratic", {"a": 2.0})
    assert log_lipschitz(gibbs(V), V) <= 10 * g.h[0]
    assert log_lipschitz(uniform(g), potential_field(g, "linear", {"slope": 3.0})) == pytest.approx(3.0)
    g1 = line(400)
    rho = from_function(g1, lambda x: 1 + 0.1 * np.cos(np.pi * x))
    # max of |rho'/rho| = 0.1 pi sin / (1 + 0.1 cos), found by dense sampling
    t = np.linspace(0, 1, 200001)
    oracle = np.max(0.1 * np.pi * np.sin(np.pi * t) / (1 + 0.1 * np.cos(np.pi * t)))
    assert log_lipschitz(rho, zero(g1)) == pytest.approx(oracle, abs=(np.pi * g1.h[0]) ** 2)
    with pytest.raises(NonPositiveDensity):
        log_lipschitz(DensityField(g1, np.zeros(400)), zero(g1))


def test_growth_constant_power():
    # h'(r) r / (h(r) + 1) = p r^p / (r^p + 1) < p
    H = power_H(3.0)
    assert H.growth_constant(1.0) == pytest.approx(1.5)
    assert H.growth_constant(1e3) < 3.0
    for fn in H_catalog().values():
        z = np.array([[0.0], [0.5], [-2.0]])
        assert np.all(fn.grad(z)[0] == 0.0)


def test_verdict_semantics():
    assert Verdict.from_margin(0.0, 1e-6).status == "pass"
    assert Verdict.from_margin(-1e-7, 1e-6).status == "slack-pass"
    assert not Verdict.from_margin(-1e-5, 1e-6).ok
    assert not Verdict.from_margin(float("nan"), 1e-6).ok


def test_parse_check_roundtrip():
    cid = parse_check("JpSemiconvex(2)")
    assert cid == JpSemiconvex(2.0) and str(cid) == "JpSemiconvex(2)" and cid.column == "JpSemiconvex_2"
    assert parse_check("JpInteraction(0,1)") == CheckId("JpInteraction", (0.0, 1.0))
    with pytest.raises(ValueError):
        parse_check("JpSemiconvex")
    with pytest.raises(KeyError):
        parse_check("Nope")


def test_energy_dissipation_degenerate_step():
    g = line(32)
    rho = cos_density(g)
    F = Functional((Entropy(),))
    v = check_step(rho, rho, exact_ot_1d(rho, rho), F, 0.1, EnergyDissipation)
    assert v.status == "pass" and v.margin == 0.0


def test_model_class_guards():
    g = line(16)
    rho = uniform(g)
    tr = exact_ot_1d(rho, rho)
    ks = Functional((Entropy(), KellerSegel(1.0)))
    with pytest.raises(WrongModelClass):
        check_step(rho, rho, tr, ks, 0.1, WeightedSupFP)
    fp = Functional((Entropy(), Potential(potential_field(g, "linear", {}))))
    with pytest.raises(WrongModelClass):
        check_step(rho, rho, tr, fp, 0.1, LpLipschitzW, CheckParams(lip_W=1.0))
    inter = Functional((Entropy(), Interaction.from_function(g, lambda z: z**2)))
    with pytest.raises(WrongModelClass):
        check_step(rho, rho, tr, inter, 0.1, LpLipschitzW)  # lip_W missing
    with pytest.raises(WrongModelClass):
        check_step(rho, rho, tr, Functional((Potential(potential_field(g, "linear", {})),)), 0.1, WeightedSupFP)


@pytest.fixture(scope="module")
def fp_run():
    g = line(128, -1, 1)
    V = potential_field(g, "quadratic", {"a": 2.0})
    F = Functional((Entropy(), Potential(V, lipschitz_V=4.0, lambda_V=4.0)))
    rho0 = normalize(from_function(g, lambda x: 0.2 + np.exp(-((x - 0.4) ** 2) / 0.02)))
    checks = [WeightedSupFP, JpSemiconvex(4.0), FiveGradients, EnergyDissipation]
    return run(rho0, F, JkoConfig(tau=1e-3, steps=200), checks=checks, params=CheckParams(tol=1e-4)), V


def test_weighted_sup_fp_every_step(fp_run):
    traj, _ = fp_run
    assert min(r.verdicts[WeightedSupFP].margin for r in traj.reports[1:]) >= -1e-8


def test_jp_semiconvex_ratio(fp_run):
    traj, _ = fp_run
    tau = traj.config.tau
    assert all(r.verdicts[JpSemiconvex(4.0)].detail["ratio"] <= 1 / (1 + 4 * tau) + 1e-3 for r in traj.reports[1:])


def test_catalog_monotone_and_bv_surrogate(fp_run):
    traj, V = fp_run
    for H in H_catalog().values():
        seq = [j_H(r, V, H) for r in traj.densities]
        assert all(b <= a + 1e-4 for a, b in zip(seq, seq[1:])), H.name
    # || grad rho + rho grad V ||_1
    h = V.grid.h[0]
    flux = [np.sum(np.abs(np.gradient(r.values, h) + r.values * np.gradient(V.values, h))) * h for r in traj.densities]
    assert all(b <= a + 1e-4 for a, b in zip(flux, flux[1:]))


def test_exponential_decay(fp_run):
    traj, V = fp_run
    tau = traj.config.tau
    j0 = j_p(traj.densities[0], V, 2.0)
    for n, r in enumerate(traj.densities):
        assert np.log(j_p(r, V, 2.0)) <= np.log(j0) - n * np.log(1 + 4 * tau) + n * 1e-3


def test_csv_header_and_write(tmp_path, fp_run):
    traj, _ = fp_run
    checks = [WeightedSupFP, JpSemiconvex(4.0)]
    write_csv(tmp_path / "r.csv", traj.reports[:3], (2.0,), (2.0,), checks)
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == csv_header((2.0,), (2.0,), checks)
    assert "lp_inf" in csv_header((2.0, np.inf), (), ()) and "verdict_JpSemiconvex_4" in rows[0]
    assert rows[1][rows[0].index("verdict_WeightedSupFP")] == ""
    assert rows[2][rows[0].index("verdict_WeightedSupFP")] == "1"


def test_total_variation():
    g = line(50)
    assert total_variation(from_function(g, lambda x: 3 * x, ScalarField)) == pytest.approx(3.0)
    step = ScalarField(g, np.where(g.axis_centers(0) < 0.5, 2.0, 0.0))
    assert total_variation(step) == pytest.approx(2.0)
