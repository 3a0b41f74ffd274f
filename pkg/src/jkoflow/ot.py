"""
Discrete optimal transport for the quadratic cost ``c(x, y) = |x - y|^2 / 2``.

Two solvers share one result type:

* :func:`exact_ot_1d` treats both densities as piecewise constant on the
  cells, so their CDFs are piecewise linear and the monotone rearrangement
  ``T = G_eta^{-1} o G_rho`` is computed exactly in quantile space.
* :func:`sinkhorn` solves the entropic problem with log-domain dual updates.
  On large 2D grids the Gibbs kernel is applied one axis at a time.

Potentials follow the convention ``grad phi = id - T`` and are anchored so
that ``phi`` vanishes on the first cell.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import BadParameter, DimensionError, GridMismatch, NoConvergence, NumericalOverflow
from .grid import DensityField, Grid, ScalarField, VectorField, normalize

logger = logging.getLogger(__name__)

# Grids with at most this many cells use a dense cost matrix in Sinkhorn.
DENSE_LIMIT = 1024


@dataclass(frozen=True)
class TransportResult:
    """Optimal (or entropic) transport from a source density to a target.

    ``phi`` lives on the source cells and ``psi`` on the target cells. For the
    exact 1D solver ``phi`` holds cell averages of the continuous potential,
    which makes ``phi`` the exact first variation of ``W2^2 / 2`` with respect
    to the source cell masses. ``map`` is the Monge map sampled at source cell
    centres and ``inverse_map`` the map from target back to source.
    """

    w2: float
    phi: ScalarField
    psi: ScalarField
    map: VectorField
    inverse_map: VectorField
    method: str
    eps: float | None = None
    plan: np.ndarray | None = field(default=None, repr=False)
    reg_cost: float | None = None
    marginal_violation: float = 0.0
    iterations: int = 0
    duals: tuple[np.ndarray, np.ndarray] | None = field(default=None, repr=False)

    @property
    def w2_squared(self) -> float:
        return self.w2 ** 2


def _masses(f: DensityField) -> np.ndarray:
    m = np.asarray(f.values, dtype=float).ravel() * f.grid.cell_volume
    total = m.sum()
    if not total > 0:
        raise BadParameter("density has zero mass")
    return m / total


def _same_grid(rho: DensityField, eta: DensityField) -> Grid:
    if rho.grid != eta.grid:
        raise GridMismatch("source and target densities live on different grids")
    return rho.grid


# ---------------------------------------------------------------------------
# exact 1D transport
# ---------------------------------------------------------------------------


class _Quantile:
    """Left-continuous quantile function of a piecewise-constant 1D density."""

    def __init__(self, masses: np.ndarray, edges: np.ndarray):
        self.m = masses
        self.e = edges
        self.h = edges[1] - edges[0]
        cum = np.concatenate([[0.0], np.cumsum(masses)])
        cum[-1] = 1.0
        self.cum = cum

    def cell_of(self, s: np.ndarray) -> np.ndarray:
        """Index j with ``cum[j] < s <= cum[j+1]``; -1 for ``s <= 0``."""
        j = np.searchsorted(self.cum, s, side="left") - 1
        return np.clip(j, -1, len(self.m) - 1)

    def __call__(self, s) -> np.ndarray:
        s = np.clip(np.asarray(s, dtype=float), 0.0, 1.0)
        j = self.cell_of(s)
        jj = np.maximum(j, 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            q = self.e[jj] + self.h * (s - self.cum[jj]) / self.m[jj]
        return np.where(j < 0, self.e[0], np.minimum(q, self.e[jj + 1]))

    def centre_levels(self) -> np.ndarray:
        """CDF level reached at each cell centre."""
        return self.cum[:-1] + 0.5 * self.m


def _exact_1d_core(a: np.ndarray, b: np.ndarray, edges: np.ndarray):
    """Squared distance and cell-averaged potential for masses ``a -> b``."""
    qa = _Quantile(a, edges)
    qb = _Quantile(b, edges)
    n = len(a)
    h = qa.h

    s = np.union1d(qa.cum, qb.cum)
    sl, sr = s[:-1], s[1:]
    ds = sr - sl
    keep = ds > 0
    sl, sr, ds = sl[keep], sr[keep], ds[keep]
    mid = 0.5 * (sl + sr)
    i = np.clip(qa.cell_of(mid), 0, n - 1)
    j = np.clip(qb.cell_of(mid), 0, n - 1)

    # positions are clipped to their cells: near the top of the CDF, levels
    # lose the masses of tiny tail cells to roundoff
    with np.errstate(divide="ignore", invalid="ignore"):
        slope_a = h / a[i]
        slope_b = h / b[j]
    xl = np.clip(edges[i] + slope_a * (sl - qa.cum[i]), edges[i], edges[i + 1])
    xr = np.clip(edges[i] + slope_a * (sr - qa.cum[i]), edges[i], edges[i + 1])
    yl = np.clip(edges[j] + slope_b * (sl - qb.cum[j]), edges[j], edges[j + 1])
    yr = np.clip(edges[j] + slope_b * (sr - qb.cum[j]), edges[j], edges[j + 1])
    dl, dr = xl - yl, xr - yr
    dx = xr - xl

    w2sq = float(np.sum(ds * (dl * dl + dl * dr + dr * dr) / 3.0))

    # Phi(s) = phi(Q_a(s)) grows by int (Q_a - Q_b) dQ_a on each piece.
    inc = dx * 0.5 * (dl + dr)
    csum = np.concatenate([[0.0], np.cumsum(inc)])[:-1]
    first = np.searchsorted(i, i, side="left")
    phi_start = csum - csum[first]
    integral = ds * phi_start + ds * dx * (2.0 * dl + dr) / 6.0

    cell_inc = np.bincount(i, weights=inc, minlength=n)
    cell_int = np.bincount(i, weights=integral, minlength=n)
    cell_ds = np.bincount(i, weights=ds, minlength=n)

    left = edges[:-1]
    # cells with no mass, or mass below the resolution of the levels, take the
    # zero-mass limit of the averaged potential
    empty = (a <= 0) | (cell_ds <= 0)
    if np.any(empty):
        t_empty = qb(qa.cum[:-1][empty])
        cell_inc[empty] = h * (left[empty] + 0.5 * h - t_empty)
    phi_edge = np.concatenate([[0.0], np.cumsum(cell_inc)])
    avg = cell_int / np.where(empty, 1.0, cell_ds)
    if np.any(empty):
        avg[empty] = (left[empty] - t_empty) * 0.5 * h + h * h / 6.0
    phibar = phi_edge[:-1] + avg
    return w2sq, phibar - phibar[0], qa, qb


def w2_squared_1d(rho: DensityField, eta: DensityField) -> float:
    """Exact squared W2 between two piecewise-constant 1D densities."""
    g = _same_grid(rho, eta)
    if g.dim != 1:
        raise DimensionError("w2_squared_1d needs a 1D grid")
    w2sq, _, _, _ = _exact_1d_core(_masses(rho), _masses(eta), g.axis_edges(0))
    return w2sq


def potential_gradient_1d(rho_masses: np.ndarray, eta_masses: np.ndarray, edges: np.ndarray):
    """``(W2^2, phi)`` where ``phi`` is d(W2^2/2)/d(source cell mass).

    Used by the JKO stepper and the simplex oracle.
    """
    w2sq, phibar, _, _ = _exact_1d_core(rho_masses, eta_masses, edges)
    return w2sq, phibar


def _c_transform(phi: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    cost = 0.5 * (x[:, None] - y[None, :]) ** 2
    return np.min(cost - phi[:, None], axis=0)


def exact_ot_1d(rho: DensityField, eta: DensityField) -> TransportResult:
    """Monotone rearrangement between two 1D densities on a common grid."""
    g = _same_grid(rho, eta)
    if g.dim != 1:
        raise DimensionError(f"exact_ot_1d needs a 1D grid, got dim={g.dim}")
    a, b = _masses(rho), _masses(eta)
    edges = g.axis_edges(0)
    x = g.axis_centers(0)
    w2sq, phibar, qa, qb = _exact_1d_core(a, b, edges)
    tmap = qb(qa.centre_levels())
    tinv = qa(qb.centre_levels())
    psi = _c_transform(phibar, x, x)
    return TransportResult(
        w2=float(np.sqrt(max(w2sq, 0.0))),
        phi=ScalarField(g, phibar),
        psi=ScalarField(g, psi),
        map=VectorField(g, tmap[:, None]),
        inverse_map=VectorField(g, tinv[:, None]),
        method="exact1d",
    )


# ---------------------------------------------------------------------------
# entropic transport
# ---------------------------------------------------------------------------


class GibbsKernel:
    """Applies ``K_ij = exp(-|x_i - y_j|^2 / (2 eps))`` in the log domain.

    ``softmin(pot)[i] = eps * log sum_j exp(pot_j / eps) K_ij``. Large 2D grids
    use per-axis matrix products with max-shifts; if a shifted sum underflows
    the step is redone with exact per-axis log-sum-exp.
    """

    def __init__(self, grid: Grid, eps: float, dense: bool | None = None):
        if not eps > 0:
            raise BadParameter("eps must be positive")
        self.grid = grid
        self.eps = float(eps)
        self.dense = grid.size <= DENSE_LIMIT if dense is None else dense
        self.axis_x = [grid.axis_centers(k) for k in range(grid.dim)]
        self.axis_cost = [0.5 * (x[:, None] - x[None, :]) ** 2 for x in self.axis_x]
        if self.dense:
            pts = grid.points
            diff = pts[:, None, :] - pts[None, :, :]
            self.cost = 0.5 * np.sum(diff * diff, axis=-1)
        self.fallbacks = 0

    # log-kernels along each axis, optionally multiplied by a nonnegative weight
    def _axis_logk(self, axis: int, weight: np.ndarray | None = None) -> np.ndarray:
        logk = -self.axis_cost[axis] / self.eps
        if weight is not None:
            with np.errstate(divide="ignore"):
                logk = logk + np.log(weight)
        return logk

    def softmin(self, pot: np.ndarray, weights: dict[int, np.ndarray] | None = None) -> np.ndarray:
        """``eps * log sum_j exp(pot_j/eps) K_ij w(i, j)`` for separable weights."""
        eps = self.eps
        weights = weights or {}
        if self.dense:
            logk = -self.cost / eps
            if weights:
                logw = 0.0
                shape = self.grid.shape
                for axis, w in weights.items():
                    idx_i = np.unravel_index(np.arange(self.grid.size), shape)[axis]
                    with np.errstate(divide="ignore"):
                        logw = logw + np.log(w[idx_i[:, None], idx_i[None, :]])
                logk = logk + logw
            return eps * logsumexp(pot.ravel()[None, :] / eps + logk, axis=1)
        return self._softmin_separable(pot.reshape(self.grid.shape), weights).ravel()

    def _softmin_separable(self, pot: np.ndarray, weights) -> np.ndarray:
        eps = self.eps
        out = pot / eps
        # contract the last axis first, then the first: out[j1, j2] -> [j1, i2] -> [i1, i2]
        for axis in (1, 0):
            logk = self._axis_logk(axis, weights.get(axis))
            moved = np.moveaxis(out, axis, -1)  # (..., j)
            res = self._contract_fast(moved, logk)
            if res is None:
                self.fallbacks += 1
                res = logsumexp(moved[..., None, :] + logk[None, :, :], axis=-1)
            out = np.moveaxis(res, -1, axis)
        return eps * out

    @staticmethod
    def _contract_fast(vals: np.ndarray, logk: np.ndarray):
        # vals: (rows, j) log-values; returns log sum_j exp(vals[r, j] + logk[i, j]) -> (rows, i)
        shift = np.max(vals, axis=-1, keepdims=True)
        finite = np.isfinite(shift)
        safe_shift = np.where(finite, shift, 0.0)
        e = np.exp(vals - safe_shift)
        k = np.exp(logk)
        s = e @ k.T
        rows_ok = finite[..., 0]
        if np.any(s[rows_ok] < 1e-250):
            return None
        with np.errstate(divide="ignore"):
            res = np.log(s) + safe_shift
        res[~rows_ok] = -np.inf
        return res


@dataclass
class SinkhornOptions:
    marginal_tol: float = 1e-8
    max_iter: int = 50_000
    check_every: int = 1


def _log_masses(m: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(m)


def sinkhorn(
    rho: DensityField,
    eta: DensityField,
    eps: float,
    opts: SinkhornOptions | None = None,
    *,
    init: tuple[np.ndarray, np.ndarray] | None = None,
    kernel: GibbsKernel | None = None,
) -> TransportResult:
    """Entropic transport from ``rho`` to ``eta`` with regularization ``eps``.

    The regularized objective is ``<C, gamma> + eps * sum gamma (log gamma - 1)``
    with ``C = |x - y|^2 / 2``. Iterates until the L1 violation of the source
    marginal drops below ``opts.marginal_tol``.
    """
    opts = opts or SinkhornOptions()
    g = _same_grid(rho, eta)
    if not eps > 0:
        raise BadParameter("eps must be positive")
    kern = kernel if kernel is not None and kernel.eps == eps and kernel.grid == g else GibbsKernel(g, eps)
    a, b = _masses(rho), _masses(eta)
    la, lb = _log_masses(a), _log_masses(b)

    if init is not None:
        f, gpot = (np.array(v, dtype=float).ravel() for v in init)
        gpot = np.where(np.isfinite(gpot), gpot, 0.0)
    else:
        f = np.zeros(a.size)
        gpot = np.zeros(b.size)

    pos = a > 0
    violation = np.inf
    it = 0
    for it in range(1, opts.max_iter + 1):
        f_new = eps * la - kern.softmin(gpot)
        with np.errstate(invalid="ignore", over="ignore"):
            rows = a[pos] * np.exp((f[pos] - f_new[pos]) / eps)
        violation = float(np.sum(np.abs(rows - a[pos])))
        if not np.isfinite(violation):
            violation = np.inf
        f = f_new
        gpot = eps * lb - kern.softmin(f)
        if np.any(np.isnan(f)) or np.any(np.isnan(gpot)):
            raise NumericalOverflow("NaN in Sinkhorn potentials")
        if violation <= opts.marginal_tol:
            break
    else:
        raise NoConvergence(
            f"Sinkhorn stopped after {opts.max_iter} iterations, marginal violation {violation:.3e}",
            violation=violation,
            iterations=opts.max_iter,
        )
    return _entropic_result(g, kern, f, gpot, a, b, violation, it)


def _entropic_result(g: Grid, kern: GibbsKernel, f, gpot, a, b, violation, iterations) -> TransportResult:
    eps = kern.eps
    lse_g = kern.softmin(gpot)
    lse_f = kern.softmin(f)
    rows = np.exp((f + lse_g) / eps)
    cols = np.exp((gpot + lse_f) / eps)

    plan = None
    if kern.dense:
        plan = np.exp((f[:, None] + gpot[None, :] - kern.cost) / eps)
        cost2 = 2.0 * float(np.sum(plan * kern.cost))
        pts = g.points
        with np.errstate(invalid="ignore", divide="ignore"):
            tmap = (plan @ pts) / rows[:, None]
            tinv = (plan.T @ pts) / cols[:, None]
    else:
        cost2 = 0.0
        tmap = np.empty((g.size, g.dim))
        tinv = np.empty((g.size, g.dim))
        for axis in range(g.dim):
            x = kern.axis_x[axis]
            sq = (x[:, None] - x[None, :]) ** 2
            cost2 += float(np.sum(np.exp((f + kern.softmin(gpot, {axis: sq})) / eps)))
            shifted = x - g.lo[axis]
            wy = np.broadcast_to(shifted[None, :], sq.shape)
            wx = np.broadcast_to(shifted[None, :], sq.shape)
            tmap[:, axis] = np.exp((f + kern.softmin(gpot, {axis: wy})) / eps) / rows + g.lo[axis]
            tinv[:, axis] = np.exp((gpot + kern.softmin(f, {axis: wx})) / eps) / cols + g.lo[axis]
    centres = g.points
    tmap = np.where(np.isfinite(tmap), tmap, centres)
    tinv = np.where(np.isfinite(tinv), tinv, centres)
    with np.errstate(invalid="ignore"):
        reg_cost = float(
            np.sum(np.where(rows > 0, f * rows, 0.0))
            + np.sum(np.where(cols > 0, gpot * cols, 0.0))
            - eps * np.sum(rows)
        )

    # extend potentials onto zero-mass cells by the soft c-transform (keeps f + g <= C)
    f_ext = np.where(np.isfinite(f), f, -lse_g)
    g_ext = np.where(np.isfinite(gpot), gpot, -kern.softmin(f_ext))
    anchor = f_ext[0]
    phi = f_ext - anchor
    psi = g_ext + anchor
    return TransportResult(
        w2=float(np.sqrt(max(cost2, 0.0))),
        phi=ScalarField(g, phi.reshape(g.shape)),
        psi=ScalarField(g, psi.reshape(g.shape)),
        map=VectorField(g, tmap.reshape(g.shape + (g.dim,))),
        inverse_map=VectorField(g, tinv.reshape(g.shape + (g.dim,))),
        method="entropic",
        eps=eps,
        plan=plan,
        reg_cost=reg_cost,
        marginal_violation=violation,
        iterations=iterations,
        duals=(f_ext.copy(), g_ext.copy()),
    )


def default_eps(grid: Grid) -> float:
    """``2 h^2`` with ``h`` the largest spacing."""
    return 2.0 * max(grid.h) ** 2


# ---------------------------------------------------------------------------
# geodesics
# ---------------------------------------------------------------------------


def splat(grid: Grid, positions: np.ndarray, masses: np.ndarray) -> np.ndarray:
    """Deposit point masses onto cell centres by multilinear weights."""
    out = np.zeros(grid.shape)
    corners = [(np.zeros(len(masses), dtype=int), np.ones(len(masses)))]
    for axis in range(grid.dim):
        u = (positions[:, axis] - grid.lo[axis]) / grid.h[axis] - 0.5
        n = grid.n[axis]
        i0 = np.floor(u).astype(int)
        w = u - i0
        lo_i = np.clip(i0, 0, n - 1)
        hi_i = np.clip(i0 + 1, 0, n - 1)
        w = np.where(i0 < 0, 0.0, np.where(i0 >= n - 1, 0.0, w))
        new = []
        for idx, wt in corners:
            new.append((idx * n + lo_i, wt * (1.0 - w)))
            new.append((idx * n + hi_i, wt * w))
        corners = new
    flat = out.ravel()
    for idx, wt in corners:
        np.add.at(flat, idx, masses * wt)
    return flat.reshape(grid.shape)


def displacement_interpolate(rho: DensityField, result: TransportResult, t: float) -> DensityField:
    """Push ``rho`` forward by ``x -> x - t grad phi(x) = (1 - t) x + t T(x)``."""
    if not 0.0 <= t <= 1.0:
        raise BadParameter(f"t must lie in [0, 1], got {t}")
    g = rho.grid
    if t == 0.0:
        return normalize(rho)
    x = g.points
    tx = result.map.values.reshape(-1, g.dim)
    pos = (1.0 - t) * x + t * tx
    masses = np.asarray(rho.values).ravel() * g.cell_volume
    out = splat(g, pos, masses)
    return normalize(DensityField(g, out / g.cell_volume))
