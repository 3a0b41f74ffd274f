"""
Per-step quantities and inequality checks for JKO trajectories.

Every check compares a new density ``rho`` with the previous one ``eta``
and returns a :class:`Verdict`. A failed inequality is data, not an
exception. The only error raised is :class:`WrongModelClass`, when a check
is applied to an energy it was not written for.

Margins are ``rhs - lhs``, so a nonnegative margin means the inequality
holds. A margin in ``[-tol, 0)`` is reported as ``slack-pass``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import BadExponent, NonPositiveDensity, WrongModelClass
from .functionals import (
    Entropy,
    FpK,
    Functional,
    Interaction,
    KellerSegel,
    LqSmoothing,
    Potential,
    entropy,
    evaluate,
    f_pk_integral,
    first_variation,
)
from .grid import DensityField, Field, ScalarField, VectorField, gradient, lp_norm, quadrature
from .ot import GibbsKernel, SinkhornOptions, TransportResult, sinkhorn


# ---------------------------------------------------------------------------
# radial convex functions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RadialConvexFn:
    """``H(z) = h(|z|)`` with ``h`` convex, nondecreasing and ``h(0) = 0``."""

    name: str
    h: Callable = field(repr=False)
    dh: Callable = field(repr=False)

    def __call__(self, z: np.ndarray) -> np.ndarray:
        return self.h(np.linalg.norm(z, axis=-1))

    def grad(self, z: np.ndarray) -> np.ndarray:
        """``h'(|z|) z / |z|``, with ``grad H(0) = 0``."""
        r = np.linalg.norm(z, axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(r > 0, self.dh(r) / np.where(r > 0, r, 1.0), 0.0)
        return z * scale[..., None]

    def growth_constant(self, rmax: float, samples: int = 2001) -> float:
        """Smallest ``C`` with ``grad H(z) . z <= C (H(z) + 1)`` for ``|z| <= rmax``."""
        r = np.linspace(0.0, max(rmax, 0.0), samples)
        return float(np.max(self.dh(r) * r / (self.h(r) + 1.0)))


def power_H(p: float) -> RadialConvexFn:
    if p < 1:
        raise BadExponent(f"|z|^p needs p >= 1, got {p}")
    return RadialConvexFn(f"power{p:g}", lambda r: r**p, lambda r: p * r ** (p - 1.0))


def smoothed_ball_H(radius: float = 1.0) -> RadialConvexFn:
    """Quadratic penalty outside a ball: ``(|z| - R)_+^2``."""
    return RadialConvexFn(
        f"ball{radius:g}",
        lambda r: np.maximum(r - radius, 0.0) ** 2,
        lambda r: 2.0 * np.maximum(r - radius, 0.0),
    )


def cosh_H() -> RadialConvexFn:
    return RadialConvexFn("cosh", lambda r: np.cosh(r) - 1.0, np.sinh)


def H_catalog() -> dict[str, RadialConvexFn]:
    return {
        "abs": power_H(1.0),
        "square": power_H(2.0),
        "cube": power_H(3.0),
        "quartic": power_H(4.0),
        "ball": smoothed_ball_H(1.0),
        "cosh": cosh_H(),
    }


def resolve_H(spec) -> RadialConvexFn:
    if isinstance(spec, RadialConvexFn):
        return spec
    if isinstance(spec, (int, float)):
        return power_H(float(spec))
    cat = H_catalog()
    if spec not in cat:
        raise KeyError(f"unknown H {spec!r}; choose from {sorted(cat)}")
    return cat[spec]


# ---------------------------------------------------------------------------
# scalar quantities
# ---------------------------------------------------------------------------


def rho_floor(rho: Field) -> float:
    return 1e-12 / rho.grid.volume


def z_field(rho: DensityField, u: ScalarField) -> VectorField:
    """``grad rho / max(rho, rho_min) + grad u``."""
    if u.grid != rho.grid:
        from .errors import GridMismatch

        raise GridMismatch("rho and u live on different grids")
    floor = np.maximum(np.asarray(rho.values), rho_floor(rho))
    z = gradient(rho).values / floor[..., None] + gradient(u).values
    return VectorField(rho.grid, z)


def j_H(rho: DensityField, u: ScalarField, H: RadialConvexFn) -> float:
    """``int H(Z_rho) drho``."""
    z = z_field(rho, u)
    return quadrature(ScalarField(rho.grid, H(z.values)), weight=rho)


def j_p(rho: DensityField, u: ScalarField, p: float) -> float:
    """``int |Z_rho|^p drho``."""
    if p < 1:
        raise BadExponent(f"p must be >= 1, got {p}")
    z = z_field(rho, u).norm()
    return quadrature(ScalarField(rho.grid, z.values**p), weight=rho)


def five_gradients_residual(rho: DensityField, eta: DensityField, tr: TransportResult, H) -> float:
    """``int grad rho . grad H(grad phi) + grad eta . grad H(grad psi) dx``.

    ``tr`` is the transport from ``rho`` to ``eta``: ``grad phi = x - T(x)``
    on the source cells and ``grad psi = y - S(y)`` on the target cells.
    """
    H = resolve_H(H)
    g = rho.grid
    pts = np.stack(g.coords, axis=-1)
    gphi = pts - tr.map.values
    gpsi = pts - tr.inverse_map.values
    a = np.sum(gradient(rho).values * H.grad(gphi), axis=-1)
    b = np.sum(gradient(eta).values * H.grad(gpsi), axis=-1)
    return float(np.sum(a + b) * g.cell_volume)


def log_lipschitz(rho: DensityField, V: ScalarField) -> float:
    """``max |grad(log rho + V)|`` over cells."""
    v = np.asarray(rho.values)
    if np.any(v <= 0):
        raise NonPositiveDensity("log_lipschitz needs a strictly positive density")
    w = ScalarField(rho.grid, np.log(v) + np.asarray(V.values))
    return float(np.max(gradient(w).norm().values))


def total_variation(f: Field) -> float:
    """``||grad f||_{L^1}`` with the grid gradient."""
    return quadrature(gradient(f).norm())


# ---------------------------------------------------------------------------
# checks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CheckId:
    name: str
    args: tuple = ()

    def __str__(self):
        if not self.args:
            return self.name
        return f"{self.name}({','.join(f'{a:g}' for a in self.args)})"

    @property
    def column(self) -> str:
        return str(self).replace("(", "_").replace(")", "").replace(",", "_")


CHECK_NAMES = (
    "LpLipschitzV",
    "LpLaplacianV",
    "LinfFPGeometric",
    "WeightedSupFP",
    "LpLipschitzW",
    "WeightedSupInteraction",
    "FpKKellerSegel",
    "FiveGradients",
    "JpSemiconvex",
    "JpInteraction",
    "JpKellerSegel",
    "EnergyDissipation",
    "LogLipschitz",
)

LpLipschitzV = CheckId("LpLipschitzV")
LpLaplacianV = CheckId("LpLaplacianV")
LinfFPGeometric = CheckId("LinfFPGeometric")
WeightedSupFP = CheckId("WeightedSupFP")
LpLipschitzW = CheckId("LpLipschitzW")
WeightedSupInteraction = CheckId("WeightedSupInteraction")
FpKKellerSegel = CheckId("FpKKellerSegel")
FiveGradients = CheckId("FiveGradients")
JpKellerSegel = CheckId("JpKellerSegel")
EnergyDissipation = CheckId("EnergyDissipation")
LogLipschitz = CheckId("LogLipschitz")


def JpSemiconvex(lam: float) -> CheckId:
    return CheckId("JpSemiconvex", (float(lam),))


def JpInteraction(lam: float, mu: float) -> CheckId:
    return CheckId("JpInteraction", (float(lam), float(mu)))


def parse_check(text: str) -> CheckId:
    """``"JpSemiconvex(2)"`` -> ``CheckId("JpSemiconvex", (2.0,))``."""
    text = text.strip()
    name, _, rest = text.partition("(")
    if name not in CHECK_NAMES:
        raise KeyError(f"unknown check {name!r}")
    args = tuple(float(a) for a in rest.rstrip(")").split(",") if a.strip()) if rest else ()
    expected = {"JpSemiconvex": 1, "JpInteraction": 2}.get(name, 0)
    if len(args) != expected:
        raise ValueError(f"{name} takes {expected} argument(s), got {len(args)}")
    return CheckId(name, args)


@dataclass(frozen=True)
class CheckParams:
    """Constants the inequalities need. ``nan`` means "not supplied"."""

    p_list: tuple = (2.0,)
    lip_V: float = float("nan")
    A: float = float("nan")  # upper bound on Laplace V
    lip_W: float = float("nan")
    jp_p: float = 2.0
    H: object = None  # None -> |z|^jp_p
    fpk_p: float = 2.0
    fpk_K: float = 1.0
    D1_cap: float = float("inf")
    C_cap: float = float("inf")
    tol: float = 1e-6
    growth_rmax: float | None = None
    eps_self_cost: float | None = None  # OT_eps(eta, eta), computed when missing


@dataclass(frozen=True)
class Verdict:
    status: str  # "pass" | "fail" | "slack-pass"
    margin: float
    detail: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status != "fail"

    @classmethod
    def from_margin(cls, margin: float, tol: float, **detail) -> "Verdict":
        if not np.isfinite(margin):
            return cls("fail", float(margin), detail)
        if margin >= 0:
            return cls("pass", float(margin), detail)
        if margin >= -tol:
            return cls("slack-pass", float(margin), detail)
        return cls("fail", float(margin), detail)


_FP_CHECKS = {"LpLipschitzV", "LpLaplacianV", "LinfFPGeometric", "WeightedSupFP", "JpSemiconvex", "LogLipschitz"}
_INTERACTION_ONLY = {"LpLipschitzW", "WeightedSupInteraction"}
_KS_CHECKS = {"FpKKellerSegel", "JpKellerSegel"}


def _require_model(F: Functional, cid: CheckId) -> None:
    has_smoothing = any(t.delta > 0 for t in F.of_type(LqSmoothing))
    if not F.has(Entropy):
        raise WrongModelClass(f"{cid} needs the entropy term")
    if cid.name in _FP_CHECKS:
        if F.has(Interaction) or F.has(KellerSegel) or has_smoothing:
            raise WrongModelClass(f"{cid} applies to entropy + potential energies only")
    elif cid.name in _INTERACTION_ONLY:
        if not F.has(Interaction) or F.has(Potential) or F.has(KellerSegel) or has_smoothing:
            raise WrongModelClass(f"{cid} applies to entropy + interaction energies only")
    elif cid.name == "JpInteraction":
        if not F.has(Interaction) or F.has(KellerSegel) or has_smoothing:
            raise WrongModelClass(f"{cid} needs an interaction term and no Keller-Segel term")
    elif cid.name in _KS_CHECKS:
        if not F.has(KellerSegel):
            raise WrongModelClass(f"{cid} needs a Keller-Segel term")


def _need(value: float, what: str, cid: CheckId) -> float:
    if value is None or not np.isfinite(value):
        raise WrongModelClass(f"{cid} needs the constant {what}")
    return float(value)


def _lp_power(rho: Field, p: float) -> float:
    return float(np.sum(np.asarray(rho.values) ** p) * rho.grid.cell_volume)


def _lp_factor_check(eta, rho, params: CheckParams, factor_of: Callable[[float], float]) -> Verdict:
    margins, detail = [], {}
    for p in params.p_list:
        fac = factor_of(p)
        if fac <= 0:
            detail[f"p{p:g}"] = "vacuous"
            continue
        m = _lp_power(eta, p) / fac - _lp_power(rho, p)
        margins.append(m)
        detail[f"p{p:g}"] = m
    return Verdict.from_margin(min(margins) if margins else 0.0, params.tol, **detail)


def _sup_weighted(rho: Field, w: np.ndarray) -> float:
    return float(np.max(np.asarray(rho.values) * np.exp(w)))


def _entropic_self_cost(eta: DensityField, eps: float) -> float:
    tr = sinkhorn(eta, eta, eps, SinkhornOptions(marginal_tol=1e-10), kernel=GibbsKernel(eta.grid, eps))
    return float(tr.reg_cost)


def dissipation_margin(eta, rho, tr: TransportResult, F: Functional, tau: float, self_cost: float | None = None) -> float:
    """``F(eta) - F(rho) - cost/tau``.

    For exact transport ``cost = W2^2/2``. For entropic transport the cost is
    ``OT_eps(rho, eta) - OT_eps(eta, eta)``, the quantity the entropic
    proximal step actually decreases.
    """
    if tr.method == "entropic":
        if self_cost is None:
            self_cost = _entropic_self_cost(eta, tr.eps)
        cost = tr.reg_cost - self_cost
    else:
        cost = 0.5 * tr.w2_squared
    return evaluate(F, eta) - evaluate(F, rho) - cost / tau


def check_step(eta: DensityField, rho: DensityField, tr: TransportResult, F: Functional, tau: float, cid: CheckId, params: CheckParams | None = None) -> Verdict:
    """Evaluate one inequality between consecutive iterates ``eta -> rho``."""
    params = params or CheckParams()
    _require_model(F, cid)
    g = rho.grid
    d = g.dim
    tol = params.tol
    V = F.potential_values(g)
    name = cid.name

    if name == "LpLipschitzV":
        L = _need(params.lip_V, "lip_V", cid)
        return _lp_factor_check(eta, rho, params, lambda p: 1.0 - tau * p * (p - 1.0) / 4.0 * L * L)
    if name == "LpLaplacianV":
        A = _need(params.A, "A", cid)
        return _lp_factor_check(eta, rho, params, lambda p: 1.0 - tau * (p - 1.0) * A)
    if name == "LinfFPGeometric":
        A = _need(params.A, "A", cid)
        rhs = lp_norm(eta, np.inf) * (1.0 + tau * A / d) ** d
        return Verdict.from_margin(rhs - lp_norm(rho, np.inf), tol)
    if name == "WeightedSupFP":
        return Verdict.from_margin(_sup_weighted(eta, V) - _sup_weighted(rho, V), tol)
    if name == "LpLipschitzW":
        L = _need(params.lip_W, "lip_W", cid)
        return _lp_factor_check(eta, rho, params, lambda p: 1.0 - tau * p * (p - 1.0) / 4.0 * L * L)
    if name == "WeightedSupInteraction":
        L = _need(params.lip_W, "lip_W", cid)
        lhs = math.log(_sup_weighted(rho, first_variation(F, rho).values)) + evaluate(F, rho)
        rhs = math.log(_sup_weighted(eta, first_variation(F, eta).values)) + evaluate(F, eta) + tau * L * L / 2.0
        return Verdict.from_margin(rhs - lhs, tol, log_lhs=lhs, log_rhs=rhs)
    if name == "FpKKellerSegel":
        fn = FpK(params.fpk_p, params.fpk_K, d)
        inc = f_pk_integral(fn, rho) - f_pk_integral(fn, eta)
        return Verdict.from_margin(params.D1_cap * tau - inc, tol, D1=inc / tau)
    if name == "FiveGradients":
        H = resolve_H(params.H if params.H is not None else params.jp_p)
        res = five_gradients_residual(rho, eta, tr, H)
        return Verdict.from_margin(res, tol, residual=res)
    if name == "JpSemiconvex":
        (lam,) = cid.args
        H = resolve_H(params.H if params.H is not None else params.jp_p)
        u = ScalarField(g, V)
        j_new, j_old = j_H(rho, u, H), j_H(eta, u, H)
        if lam >= 0:
            margin = j_old - (1.0 + lam * tau) * j_new
            return Verdict.from_margin(margin, tol, ratio=j_new / j_old if j_old > 0 else float("nan"))
        rmax = params.growth_rmax
        if rmax is None:
            rmax = max(float(np.max(z_field(r, u).norm().values)) for r in (rho, eta))
        C = H.growth_constant(rmax)
        margin = j_old + C * tau - (1.0 - abs(lam) * C * tau) * j_new
        return Verdict.from_margin(margin, tol, C=C)
    if name == "JpInteraction":
        lam, mu = cid.args
        p = params.jp_p
        j_new = j_p(rho, first_variation(F, rho), p)
        j_old = j_p(eta, first_variation(F, eta), p)
        margin = j_old - (1.0 + p * (lam - 2.0 * mu) * tau) * j_new
        return Verdict.from_margin(margin, tol)
    if name == "JpKellerSegel":
        p = params.jp_p
        if not 1 < p < 2:
            raise BadExponent(f"JpKellerSegel needs 1 < p < 2, got {p}")
        r = (4.0 - p) / (2.0 - p)
        inc = (j_p(rho, first_variation(F, rho), p) + evaluate(F, rho)) - (j_p(eta, first_variation(F, eta), p) + evaluate(F, eta))
        scale = tau * max(_lp_power(eta, r), _lp_power(rho, r))
        return Verdict.from_margin(params.C_cap * scale - inc, tol, C=inc / scale, r=r)
    if name == "EnergyDissipation":
        margin = dissipation_margin(eta, rho, tr, F, tau, params.eps_self_cost)
        return Verdict.from_margin(margin, tol)
    if name == "LogLipschitz":
        Vf = ScalarField(g, V)
        margin = log_lipschitz(eta, Vf) - log_lipschitz(rho, Vf)
        return Verdict.from_margin(margin, tol)
    raise KeyError(f"unknown check {cid}")


# ---------------------------------------------------------------------------
# step reports and CSV
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StepReport:
    n: int
    t: float
    lp_norms: dict
    sup_weighted: float
    bv: float
    energy: float
    entropy: float
    jp: dict
    w2_step: float
    verdicts: dict = field(default_factory=dict)
    residual: float = float("nan")  # optimality residual, 1D only


def measure(n: int, t: float, rho: DensityField, F: Functional, lp_list=(2.0,), jp_list=(2.0,), w2_step: float = 0.0, verdicts=None, residual=float("nan")) -> StepReport:
    g = rho.grid
    V = F.potential_values(g)
    u = first_variation(F, rho)
    return StepReport(
        n=n,
        t=t,
        lp_norms={p: lp_norm(rho, p) for p in lp_list},
        sup_weighted=_sup_weighted(rho, V),
        bv=total_variation(rho),
        energy=evaluate(F, rho),
        entropy=entropy(rho),
        jp={p: j_p(rho, u, p) for p in jp_list},
        w2_step=float(w2_step),
        verdicts=dict(verdicts or {}),
        residual=float(residual),
    )


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return repr(float(x))


def _p_label(p) -> str:
    return "inf" if p == np.inf else f"{float(p):g}"


def csv_header(lp_list, jp_list, checks) -> list[str]:
    cols = ["n", "t", "energy", "entropy", "w2_step"]
    cols += [f"lp_{_p_label(p)}" for p in lp_list]
    cols += ["sup_weighted", "bv"]
    cols += [f"jp_{_p_label(p)}" for p in jp_list]
    for c in checks:
        cols += [f"verdict_{c.column}", f"margin_{c.column}"]
    return cols


def csv_row(rep: StepReport, lp_list, jp_list, checks) -> list[str]:
    row = [_fmt(rep.n), _fmt(rep.t), _fmt(rep.energy), _fmt(rep.entropy), _fmt(rep.w2_step)]
    row += [_fmt(rep.lp_norms[p]) for p in lp_list]
    row += [_fmt(rep.sup_weighted), _fmt(rep.bv)]
    row += [_fmt(rep.jp[p]) for p in jp_list]
    for c in checks:
        v = rep.verdicts.get(c)
        if v is None:
            row += ["", ""]
        else:
            row += ["1" if v.ok else "0", _fmt(v.margin)]
    return row


def write_csv(path, reports, lp_list, jp_list, checks) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(csv_header(lp_list, jp_list, checks))
        for rep in reports:
            w.writerow(csv_row(rep, lp_list, jp_list, checks))
