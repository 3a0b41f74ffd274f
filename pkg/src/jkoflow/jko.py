"""
The JKO proximal step and the iterated scheme.

``jko_step`` approximately solves::

    min_rho  F(rho) + W2(rho, eta)^2 / (2 tau)

The nonlocal part of the first variation (interaction and Keller-Segel) is
frozen at the current outer iterate and refreshed by a damped fixed point.
The remaining local problem is solved

* in 1D by damped Newton iterations on the cell masses with the exact W2
  gradient (the monotone map is recomputed from scratch every iteration);
* in 2D by entropic scaling iterations whose target-side update is the
  pointwise KL proximal map of ``s log s + s U + delta s^q / q``.

``oracle_step`` is a slow, independent brute-force minimizer over the
simplex, used to validate the stepper on small grids.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BadParameter, FunctionalUnbounded, GridTooLarge, JkoFlowError, NoConvergence
from .functionals import Functional, LqSmoothing, evaluate, first_variation, nonlocal_variation
from .grid import DensityField, Grid
from .ot import (
    GibbsKernel,
    SinkhornOptions,
    TransportResult,
    default_eps,
    exact_ot_1d,
    potential_gradient_1d,
    sinkhorn,
)

logger = logging.getLogger(__name__)

UNBOUNDED_DROP = 1e6
ORACLE_MAX_CELLS = 64
ORACLE_SEEDS = (11, 23, 37, 41, 53, 67, 79, 83, 97, 101, 113, 127, 131, 149, 151, 163, 173, 181, 191, 199)
ORACLE_FLOOR = 1e-14


@dataclass(frozen=True)
class JkoConfig:
    tau: float
    steps: int = 1
    eps: float | None = None  # entropic regularization, 2D only; None -> 2 h^2
    inner_tol: float = 1e-9
    fixed_point_max: int = 100
    fixed_point_damping: float = 1.0
    newton_max: int = 200
    sinkhorn_max_iter: int = 200_000

    def __post_init__(self):
        if not self.tau > 0:
            raise BadParameter(f"tau must be positive, got {self.tau}")
        if self.steps < 0:
            raise BadParameter("steps must be nonnegative")
        if self.eps is not None and not self.eps > 0:
            raise BadParameter("eps must be positive")
        if not self.inner_tol > 0:
            raise BadParameter("inner_tol must be positive")
        if self.fixed_point_max < 1:
            raise BadParameter("fixed_point_max must be at least 1")
        if not 0 < self.fixed_point_damping <= 1:
            raise BadParameter("fixed_point_damping must lie in (0, 1]")

    def eps_for(self, grid: Grid) -> float:
        return self.eps if self.eps is not None else default_eps(grid)


def _smoothing(F: Functional) -> tuple[float, float]:
    """Combined ``(delta, q)`` of the L^q terms (at most one active exponent)."""
    terms = [t for t in F.of_type(LqSmoothing) if t.delta > 0]
    if not terms:
        return 0.0, 2.0
    qs = {t.q for t in terms}
    if len(qs) > 1:
        raise BadParameter("L^q smoothing terms with different exponents are not supported")
    return float(sum(t.delta for t in terms)), terms[0].q


def objective(rho: DensityField, eta: DensityField, F: Functional, tau: float, tr: TransportResult | None = None) -> float:
    """``F(rho) + W2^2 / (2 tau)``; exact W2 in 1D, plan cost otherwise."""
    if tr is None:
        tr = exact_ot_1d(rho, eta) if rho.grid.dim == 1 else None
    if tr is None:
        raise BadParameter("pass a TransportResult for 2D objectives")
    return evaluate(F, rho) + tr.w2_squared / (2.0 * tau)


def optimality_residual(rho: DensityField, F: Functional, tr: TransportResult, tau: float, floor: float = 1e-6) -> float:
    """Standard deviation of ``log rho + u[rho] + phi / tau`` over cells with ``rho > floor``."""
    v = np.asarray(rho.values)
    mask = v > floor
    if not np.any(mask):
        return float("nan")
    r = np.log(v[mask]) + first_variation(F, rho).values[mask] + tr.phi.values[mask] / tau
    return float(np.std(r))


# ---------------------------------------------------------------------------
# 1D: Newton on cell masses
# ---------------------------------------------------------------------------


class _Local1D:
    """``Phi(m) = sum m log(m/h) + m U + delta h (m/h)^q / q + W2^2(m, b) / (2 tau)``."""

    def __init__(self, grid: Grid, b: np.ndarray, U: np.ndarray, tau: float, delta: float, q: float):
        self.h = grid.h[0]
        self.edges = grid.axis_edges(0)
        self.b = b
        self.U = U
        self.tau = tau
        self.delta = delta
        self.q = q
        n = len(b)
        self.L = np.tril(np.ones((n - 1, n)), 0)  # row k sums cells 0..k

    def value(self, m):
        h = self.h
        w2sq, phibar = potential_gradient_1d(m, self.b, self.edges)
        with np.errstate(divide="ignore", invalid="ignore"):
            ent = np.sum(np.where(m > 0, m * np.log(m / h), 0.0))
        val = ent + np.dot(m, self.U) + w2sq / (2.0 * self.tau)
        if self.delta:
            val += self.delta / self.q * h * np.sum((m / h) ** self.q)
        return float(val), phibar

    def gradient(self, m, phibar):
        g = np.log(m / self.h) + 1.0 + self.U + phibar / self.tau
        if self.delta:
            g = g + self.delta * (m / self.h) ** (self.q - 1.0)
        return g

    def hessian(self, m):
        h = self.h
        with np.errstate(over="ignore", divide="ignore"):
            diag = 1.0 / m
        if self.delta:
            diag = diag + self.delta * (self.q - 1.0) * (m / h) ** (self.q - 2.0) / h
        # second variation of W2^2/2 is int dF^2 / eta(T(x)) dx; sample it at interior edges
        cum = np.cumsum(m)[:-1]
        bcum = np.cumsum(self.b)
        j = np.clip(np.searchsorted(bcum, cum, side="left"), 0, len(self.b) - 1)
        w = h * h / np.maximum(self.b[j], 1e-300)
        H = (self.L.T * w) @ self.L / self.tau
        H[np.diag_indices_from(H)] += diag
        return H


def _kkt_direction(H: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = len(g)
    K = np.zeros((n + 1, n + 1))
    K[:n, :n] = H
    K[:n, n] = 1.0
    K[n, :n] = 1.0
    rhs = np.concatenate([-g, [0.0]])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    return sol[:n]


def _residual_std(g: np.ndarray, m: np.ndarray, h: float) -> float:
    mask = m / h > 1e-6
    return float(np.std(g[mask])) if np.any(mask) else float(np.std(g))


def _newton_1d(prob: _Local1D, m0: np.ndarray, tol: float, max_iter: int) -> np.ndarray:
    m = m0.copy()
    val, phibar = prob.value(m)
    res = np.inf
    for it in range(max_iter):
        g = prob.gradient(m, phibar)
        res = _residual_std(g, m, prob.h)
        if res <= tol:
            return m
        dm = _kkt_direction(prob.hessian(m), g)
        slope = float(np.dot(g, dm))
        if np.all(np.isfinite(dm)) and abs(slope) <= 1e-13 * max(1.0, abs(val)):
            # predicted decrease is below the resolution of the objective; judge by the residual
            neg = dm < 0
            alpha = min(1.0, 0.99 * float(np.min(-m[neg] / dm[neg]))) if np.any(neg) else 1.0
            trial = m + alpha * dm
            trial = trial / trial.sum()
            tval, tphi = prob.value(trial)
            if _residual_std(prob.gradient(trial, tphi), trial, prob.h) < res:
                m, val, phibar = trial, tval, tphi
                continue
            break
        if slope >= 0 or not np.all(np.isfinite(dm)):
            dm = -(g - np.dot(m, g)) * m  # mass-weighted steepest descent, sums to zero
            slope = float(np.dot(g, dm))
        neg = dm < 0
        alpha = 1.0
        if np.any(neg):
            alpha = min(1.0, 0.99 * float(np.min(-m[neg] / dm[neg])))
        accepted = False
        for _ in range(60):
            trial = m + alpha * dm
            if np.all(trial > 0):
                tval, tphi = prob.value(trial)
                if tval <= val + 1e-4 * alpha * slope + 1e-15 * abs(val):
                    accepted = True
                    break
            alpha *= 0.5
        if not accepted:
            break
        m = trial / trial.sum()
        val, phibar = prob.value(m)
    g = prob.gradient(m, phibar)
    res = _residual_std(g, m, prob.h)
    if res <= 10 * tol:
        return m
    raise NoConvergence(f"1D Newton stopped with optimality residual {res:.3e}", violation=res, iterations=max_iter)


def _start_point(b: np.ndarray) -> np.ndarray:
    if np.all(b > 0):
        return b.copy()
    m = 0.999999 * b + 1e-6 / len(b)
    return m / m.sum()


def _step_1d(eta: DensityField, F: Functional, cfg: JkoConfig):
    g = eta.grid
    h = g.h[0]
    b = eta.masses / eta.masses.sum()
    V = F.potential_values(g)
    delta, q = _smoothing(F)
    newton_tol = 0.1 * cfg.inner_tol

    m = _start_point(b)
    rho = DensityField(g, m / h)
    base = objective(rho, eta, F, cfg.tau)
    omega = cfg.fixed_point_damping
    nonlocal_ = F.nonlocal_terms
    change = np.inf
    for k in range(cfg.fixed_point_max):
        u = nonlocal_variation(F, rho) if nonlocal_ else 0.0
        prob = _Local1D(g, b, np.ravel(V + u), cfg.tau, delta, q)
        m_new = _newton_1d(prob, m, newton_tol, cfg.newton_max)
        m_next = (1.0 - omega) * m + omega * m_new
        m_next /= m_next.sum()
        rho_next = DensityField(g, m_next / h)
        if not nonlocal_:
            if np.array_equal(m_next, b):
                return eta, 1  # eta itself is optimal
            return rho_next, 1
        change = exact_ot_1d(rho_next, rho).w2
        m, rho = m_next, rho_next
        obj = objective(rho, eta, F, cfg.tau)
        if not np.isfinite(obj) or obj < base - UNBOUNDED_DROP:
            raise FunctionalUnbounded(f"objective fell from {base:.6g} to {obj:.6g} during the fixed point")
        if change <= cfg.inner_tol:
            return rho, k + 1
    raise NoConvergence(
        f"fixed point did not settle in {cfg.fixed_point_max} iterations (last W2 change {change:.3e})",
        violation=change,
        iterations=cfg.fixed_point_max,
    )


# ---------------------------------------------------------------------------
# 2D: entropic proximal scaling
# ---------------------------------------------------------------------------


def _kl_prox_log(logp, sigma, U, logvol, delta, q, x0=None):
    """Solve ``(1+s) x + s delta (e^x/vol)^(q-1) = log p - s (1 + U - log vol)`` for ``x``."""
    rhs = logp - sigma * (1.0 + U - logvol)
    x = rhs / (1.0 + sigma)
    if not delta:
        return x
    # the delta term is positive, so the root lies below x; Newton from the right decreases monotonically
    c = sigma * delta
    for _ in range(100):
        e = np.exp((q - 1.0) * (x - logvol))
        fval = (1.0 + sigma) * x + c * e - rhs
        dval = (1.0 + sigma) + c * (q - 1.0) * e
        step = np.where(np.isfinite(fval), fval / dval, 0.0)
        x = x - step
        if np.max(np.abs(step[np.isfinite(step)]), initial=0.0) < 1e-14:
            break
    return x


class _EntropicProx:
    def __init__(self, eta: DensityField, eps: float, tau: float, delta: float, q: float, max_iter: int):
        g = eta.grid
        self.grid = g
        self.eps = eps
        self.kern = GibbsKernel(g, eps)
        a = eta.masses.ravel()
        self.a = a / a.sum()
        with np.errstate(divide="ignore"):
            self.la = np.log(self.a)
        self.sigma = tau / eps
        self.logvol = math.log(g.cell_volume)
        self.delta = delta
        self.q = q
        self.max_iter = max_iter
        self.f = np.zeros(g.size)
        self.gp = np.zeros(g.size)

    def solve(self, U: np.ndarray, tol: float) -> np.ndarray:
        eps, kern = self.eps, self.kern
        pos = self.a > 0
        f, gp = self.f, self.gp
        logb = None
        change = viol = np.inf
        for it in range(1, self.max_iter + 1):
            f_new = eps * self.la - kern.softmin(gp)
            with np.errstate(invalid="ignore", over="ignore"):
                rows = self.a[pos] * np.exp((f[pos] - f_new[pos]) / eps)
            viol = float(np.sum(np.abs(rows - self.a[pos])))
            f = f_new
            S = kern.softmin(f)
            logb_new = _kl_prox_log(S / eps, self.sigma, U, self.logvol, self.delta, self.q, logb)
            gp = eps * logb_new - S
            if np.any(np.isnan(gp)):
                raise NoConvergence("NaN in entropic proximal iterations", iterations=it)
            if logb is not None:
                change = float(np.sum(np.abs(np.exp(logb_new) - np.exp(logb))))
            logb = logb_new
            if change <= tol and viol <= tol:
                break
        else:
            raise NoConvergence(
                f"entropic prox stopped after {self.max_iter} iterations (change {change:.3e}, marginal {viol:.3e})",
                violation=max(change, viol),
                iterations=self.max_iter,
            )
        self.f, self.gp = f, gp
        b = np.exp(logb)
        return b / b.sum()


def _step_2d(eta: DensityField, F: Functional, cfg: JkoConfig):
    g = eta.grid
    eps = cfg.eps_for(g)
    delta, q = _smoothing(F)
    V = F.potential_values(g).ravel()
    prox = _EntropicProx(eta, eps, cfg.tau, delta, q, cfg.sinkhorn_max_iter)
    vol = g.cell_volume
    m = prox.a.copy()
    rho = eta
    omega = cfg.fixed_point_damping
    nonlocal_ = F.nonlocal_terms
    base = evaluate(F, eta)
    change = np.inf
    for k in range(cfg.fixed_point_max):
        u = nonlocal_variation(F, rho).ravel() if nonlocal_ else 0.0
        m_new = prox.solve(V + u, cfg.inner_tol)
        m_next = (1.0 - omega) * m + omega * m_new
        m_next /= m_next.sum()
        change = float(np.sum(np.abs(m_next - m)))
        m = m_next
        rho = DensityField(g, (m / vol).reshape(g.shape))
        if not nonlocal_:
            return rho, 1
        val = evaluate(F, rho)
        if not np.isfinite(val) or val < base - UNBOUNDED_DROP:
            raise FunctionalUnbounded(f"energy fell from {base:.6g} to {val:.6g} during the fixed point")
        if change <= cfg.inner_tol:
            return rho, k + 1
    raise NoConvergence(
        f"fixed point did not settle in {cfg.fixed_point_max} iterations (last L1 change {change:.3e})",
        violation=change,
        iterations=cfg.fixed_point_max,
    )


def transport_for(rho: DensityField, eta: DensityField, cfg: JkoConfig, tol: float | None = None) -> TransportResult:
    """Transport from ``rho`` back to ``eta`` as used by the stepper."""
    if rho.grid.dim == 1:
        return exact_ot_1d(rho, eta)
    opts = SinkhornOptions(marginal_tol=tol or cfg.inner_tol, max_iter=cfg.sinkhorn_max_iter)
    return sinkhorn(rho, eta, cfg.eps_for(rho.grid), opts)


def jko_step(eta: DensityField, F: Functional, cfg: JkoConfig) -> tuple[DensityField, TransportResult]:
    """One proximal step from ``eta``; returns the new density and the transport back to ``eta``."""
    F.validate(eta.grid)
    if eta.grid.dim == 1:
        rho, _ = _step_1d(eta, F, cfg)
    else:
        rho, _ = _step_2d(eta, F, cfg)
    return rho, transport_for(rho, eta, cfg)


# ---------------------------------------------------------------------------
# brute-force oracle
# ---------------------------------------------------------------------------


def project_simplex(y: np.ndarray, floor: float = 0.0) -> np.ndarray:
    """Euclidean projection onto ``{m >= floor, sum m = 1}`` (sort-based)."""
    n = len(y)
    budget = 1.0 - n * floor
    if budget < 0:
        raise BadParameter("floor too large for the simplex")
    z = y - floor
    u = np.sort(z)[::-1]
    css = np.cumsum(u) - budget
    idx = np.arange(1, n + 1)
    k = np.nonzero(u - css / idx > 0)[0][-1]
    theta = css[k] / (k + 1)
    return np.maximum(z - theta, 0.0) + floor


def _oracle_objective(m, eta: DensityField, F: Functional, tau: float, ot_fn):
    g = eta.grid
    rho = DensityField(g, (m / g.cell_volume).reshape(g.shape))
    cost, dual = ot_fn(m)
    cache: dict = {}
    val = evaluate(F, rho, cache) + cost / tau
    u = first_variation(F, rho, cache).values.ravel()
    with np.errstate(divide="ignore"):
        grad = np.log(m / g.cell_volume) + 1.0 + u + dual / tau
    return val, grad


def oracle_step(eta: DensityField, F: Functional, tau: float, max_iter: int = 20000, tol: float = 1e-12) -> DensityField:
    """Minimize ``F(rho) + W2^2(rho, eta)/(2 tau)`` by projected gradient over the simplex.

    Barzilai-Borwein steps with a nonmonotone-free Armijo safeguard, run from
    ``eta``, the uniform density and 18 Dirichlet-random starts drawn from a
    fixed seed list. Exact W2 in 1D; entropic W2 with ``eps = 1e-4`` in 2D.
    """
    g = eta.grid
    if g.size > ORACLE_MAX_CELLS:
        raise GridTooLarge(f"oracle_step is limited to {ORACLE_MAX_CELLS} cells, grid has {g.size}")
    if not tau > 0:
        raise BadParameter("tau must be positive")
    F.validate(g)
    b = eta.masses.ravel() / eta.masses.sum()

    if g.dim == 1:
        edges = g.axis_edges(0)

        def ot_fn(m):
            w2sq, phibar = potential_gradient_1d(m, b, edges)
            return 0.5 * w2sq, phibar

    else:
        kern = GibbsKernel(g, 1e-4)
        state = {}

        def ot_fn(m):
            rho = DensityField(g, (m / g.cell_volume).reshape(g.shape))
            tr = sinkhorn(rho, eta, 1e-4, SinkhornOptions(marginal_tol=1e-11), init=state.get("duals"), kernel=kern)
            state["duals"] = tr.duals
            return tr.reg_cost, tr.duals[0]

    n = g.size
    starts = [project_simplex(b, ORACLE_FLOOR), np.full(n, 1.0 / n)]
    for seed in ORACLE_SEEDS[: 20 - len(starts)]:
        rng = np.random.default_rng(seed)
        starts.append(project_simplex(rng.dirichlet(np.ones(n)), ORACLE_FLOOR))

    best_val, best_m = np.inf, None
    for m in starts:
        val, grad = _oracle_objective(m, eta, F, tau, ot_fn)
        step = 1e-3
        for it in range(max_iter):
            cand = None
            for _ in range(50):
                trial = project_simplex(m - step * grad, ORACLE_FLOOR)
                tval, tgrad = _oracle_objective(trial, eta, F, tau, ot_fn)
                if tval <= val + 1e-4 * float(np.dot(grad, trial - m)) + 1e-15 * abs(val):
                    cand = (trial, tval, tgrad)
                    break
                step *= 0.5
            if cand is None:
                break
            trial, tval, tgrad = cand
            s, y = trial - m, tgrad - grad
            done = float(np.max(np.abs(s))) < tol
            m, val, grad = trial, tval, tgrad
            if done:
                break
            sy = float(np.dot(s, y))
            step = float(np.dot(s, s)) / sy if sy > 0 else 2.0 * step
        if val < best_val:
            best_val, best_m = val, m.copy()
    # keep eta itself unless a candidate beats it by more than roundoff
    eta_val = _oracle_objective(b, eta, F, tau, ot_fn)[0]
    if best_val >= eta_val - 1e-14 * max(1.0, abs(eta_val)):
        return eta
    return DensityField(g, (best_m / g.cell_volume).reshape(g.shape))


# ---------------------------------------------------------------------------
# iterated scheme
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    densities: list
    reports: list
    config: JkoConfig
    functional: Functional
    transports: list = field(default_factory=list, repr=False)
    error: JkoFlowError | None = None
    failed_step: int | None = None

    @property
    def final(self) -> DensityField:
        return self.densities[-1]

    @property
    def complete(self) -> bool:
        return self.error is None and len(self.densities) == self.config.steps + 1


def run(
    rho0: DensityField,
    F: Functional,
    cfg: JkoConfig,
    checks=(),
    params=None,
    lp_list=(2.0,),
    jp_list=(2.0,),
    on_step=None,
) -> Trajectory:
    """Apply ``jko_step`` ``cfg.steps`` times, checking every step.

    A solver error stops the run and is stored on the returned (partial)
    trajectory instead of propagating. ``on_step(n, rho)`` is called after
    every accepted density, including ``rho0``. ``params`` is one
    ``CheckParams`` for all checks or a dict keyed by check id.
    """
    from .diagnostics import CheckParams, check_step, measure

    checks = tuple(checks)
    if isinstance(params, dict):
        per_check = {c: params.get(c, CheckParams()) for c in checks}
    else:
        per_check = {c: params or CheckParams() for c in checks}
    F.validate(rho0.grid)
    traj = Trajectory([rho0], [measure(0, 0.0, rho0, F, lp_list, jp_list)], cfg, F)
    if on_step is not None:
        on_step(0, rho0)
    eta = rho0
    for n in range(1, cfg.steps + 1):
        try:
            rho, tr = jko_step(eta, F, cfg)
            verdicts = {c: check_step(eta, rho, tr, F, cfg.tau, c, per_check[c]) for c in checks}
            residual = optimality_residual(rho, F, tr, cfg.tau) if rho.grid.dim == 1 else float("nan")
            rep = measure(n, n * cfg.tau, rho, F, lp_list, jp_list, tr.w2, verdicts, residual)
        except JkoFlowError as exc:
            logger.error("step %d failed: %s", n, exc)
            traj.error = exc
            traj.failed_step = n
            return traj
        traj.densities.append(rho)
        traj.transports.append(tr)
        traj.reports.append(rep)
        if on_step is not None:
            on_step(n, rho)
        eta = rho
    return traj
