"""
Dirichlet Poisson problem ``-Laplace h = rho`` on a box, ``h = 0`` on the boundary.

Cell-centred finite differences with antisymmetric ghost values
(``h_ghost = -h_boundary_cell``) place the zero Dirichlet value on the
domain faces. The resulting symmetric positive definite system is solved by
plain conjugate gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BadParameter, NoConvergence
from .grid import DensityField, Field, Grid, ScalarField, VectorField, quadrature


@dataclass(frozen=True)
class PoissonSolution:
    h: ScalarField
    grad_h: VectorField
    residual: float
    iterations: int


def _pad_dirichlet(u: np.ndarray, axis: int) -> np.ndarray:
    first = -np.take(u, [0], axis=axis)
    last = -np.take(u, [-1], axis=axis)
    return np.concatenate([first, u, last], axis=axis)


def neg_laplacian(u: np.ndarray, grid: Grid) -> np.ndarray:
    """Apply ``-Laplace_h`` with homogeneous Dirichlet ghost cells."""
    out = np.zeros_like(u)
    for axis, h in enumerate(grid.h):
        p = _pad_dirichlet(u, axis)
        n = u.shape[axis]
        lo = np.take(p, range(0, n), axis=axis)
        hi = np.take(p, range(2, n + 2), axis=axis)
        out += (2.0 * u - lo - hi) / (h * h)
    return out


def dirichlet_gradient(u: np.ndarray, grid: Grid) -> np.ndarray:
    """Centred differences; boundary cells use the ghost value ``-u``."""
    parts = []
    for axis, h in enumerate(grid.h):
        p = _pad_dirichlet(u, axis)
        n = u.shape[axis]
        lo = np.take(p, range(0, n), axis=axis)
        hi = np.take(p, range(2, n + 2), axis=axis)
        parts.append((hi - lo) / (2.0 * h))
    return np.stack(parts, axis=-1)


def outward_normal_derivative(sol: PoissonSolution) -> np.ndarray:
    """One-sided ``dh/dn`` on every boundary face: ``(0 - h_cell) / (h/2)``."""
    u = np.asarray(sol.h.values)
    grid = sol.h.grid
    vals = []
    for axis, h in enumerate(grid.h):
        for idx in (0, -1):
            vals.append((-2.0 / h) * np.take(u, idx, axis=axis).ravel())
    return np.concatenate(vals)


def conjugate_gradient(apply, b: np.ndarray, tol: float, max_iter: int, x0: np.ndarray | None = None):
    """Unpreconditioned CG to relative residual ``||r|| <= tol * ||b||``."""
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b), 0
    r = b - apply(x)
    p = r.copy()
    rr = float(np.vdot(r, r))
    target = (tol * bnorm) ** 2
    for it in range(max_iter + 1):
        if rr <= target:
            return x, it
        if it == max_iter:
            break
        ap = apply(p)
        alpha = rr / float(np.vdot(p, ap))
        x += alpha * p
        r -= alpha * ap
        rr_new = float(np.vdot(r, r))
        p = r + (rr_new / rr) * p
        rr = rr_new
    raise NoConvergence(
        f"CG did not reach relative residual {tol:g} in {max_iter} iterations",
        violation=float(np.sqrt(rr) / bnorm),
        iterations=max_iter,
    )


def solve_poisson(rho: Field, tol: float = 1e-10, x0: np.ndarray | None = None) -> PoissonSolution:
    """Solve ``-Laplace h = rho`` with ``h = 0`` on the boundary."""
    if not tol > 0:
        raise BadParameter("tol must be positive")
    grid = rho.grid
    b = np.asarray(rho.values, dtype=float)
    h, iters = conjugate_gradient(lambda u: neg_laplacian(u, grid), b, tol, 10 * grid.size, x0=x0)
    residual = float(np.max(np.abs(neg_laplacian(h, grid) - b))) if b.size else 0.0
    return PoissonSolution(
        h=ScalarField(grid, h),
        grad_h=VectorField(grid, dirichlet_gradient(h, grid)),
        residual=residual,
        iterations=iters,
    )


@dataclass(frozen=True)
class KSEnergyForms:
    value: float  # -(chi/2) int h drho
    gradient_form: float  # -(chi/2) int |grad h|^2 dx
    discrepancy: float


def ks_energy_forms(rho: DensityField, chi: float, tol: float = 1e-10, sol: PoissonSolution | None = None) -> KSEnergyForms:
    sol = sol or solve_poisson(rho, tol)
    value = -0.5 * chi * quadrature(sol.h, weight=rho)
    grad_sq = ScalarField(rho.grid, np.sum(sol.grad_h.values ** 2, axis=-1))
    gform = -0.5 * chi * quadrature(grad_sq)
    return KSEnergyForms(value, gform, abs(value - gform))


def ks_energy(rho: DensityField, chi: float, tol: float = 1e-10) -> float:
    """Keller-Segel interaction energy ``-(chi/2) int h[rho] drho``."""
    if not chi > 0:
        raise BadParameter("chi must be positive")
    return ks_energy_forms(rho, chi, tol).value
