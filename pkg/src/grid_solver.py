"""Primal-dual solver for the space-time transport problems on a staggered grid.

Minimizes Σ f_2(ρ̄, m̄)·Δx·Δt + α·KL(ρ(·,T)‖ρ1) (or the hard terminal
constraint for α = inf) subject to ∂_t ρ + ∇·m = 0 with zero-flux walls.

Layout: ρ lives at cell centers and time nodes, component k of m on the
faces normal to axis k at time midpoints, the continuity multiplier at cell
centers and time midpoints. The splitting carries centered copies (ρ̄, m̄)
tied to the staggered variables by a consensus constraint, so the f_2 prox
acts cellwise:

    min_x G(x) + ι_0(Kx),  x = (ρ, m, ρ̄, m̄),
    Kx = c·(D_t ρ + div m,  I(ρ, m) − (ρ̄, m̄)),  c = Δx·Δt.

By default the continuity multiplier ascends along (D_t D_tᵀ + div divᵀ)⁻¹
applied to the continuity residual, a separable space-time Poisson solve;
preconditioner="scalar" (or explicit steps) runs the plain τ = σ = 0.9/‖K‖
iteration. The iterate starts from the linear interpolation of the
marginals together with the time-constant flux that carries it.
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from src.errors import NumericalError, ParameterError
from src.functionals import action_density, default_terminal_tol, kl_divergence
from src.measures import DensityField, DensitySlice, MomentumField, require_same_grid

logger = logging.getLogger(__name__)

NEWTON_MAX_ITERS = 100
NEWTON_TOL = 1e-12
DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 100
ZERO_DENSITY = 1e-14
# shares of the unit step budget given to the continuity and consensus rows
CONTINUITY_SHARE = 0.49
CONSENSUS_SHARE = 0.49
PRECONDITIONERS = ("poisson", "scalar")
EIGEN_FLOOR = 1e-12


# --- cellwise proximal primitives ---------------------------------------

def project_cone_K2(a, b):
    """Euclidean projection onto K_2 = {(a, b): a + |b|²/2 <= 0}.

    a has shape S and b shape S + (d,); scalars and plain d-vectors work too.
    Outside points move to (a − λ, b/(1 + λ)) where λ > 0 is the root of
    g(λ) = a − λ + |b|²/(2(1 + λ)²). g is decreasing and convex, so Newton
    from λ = 0 increases monotonically to the root.
    """
    a_in = np.asarray(a, dtype=float)
    b_in = np.asarray(b, dtype=float)
    scalar_input = b_in.ndim == a_in.ndim
    if scalar_input:
        b_in = b_in[..., None]
    a_arr = np.atleast_1d(a_in)
    b_arr = b_in.reshape(a_arr.shape + (b_in.shape[-1],))

    sq = np.sum(b_arr ** 2, axis=-1)
    outside = a_arr + 0.5 * sq > 0.0
    a_out = a_arr.copy()
    b_out = b_arr.copy()

    if np.any(outside):
        a_o, sq_o = a_arr[outside], sq[outside]
        scale = np.maximum(1.0, np.abs(a_o) + sq_o)
        lam = np.zeros_like(a_o)
        for _ in range(NEWTON_MAX_ITERS):
            inv = 1.0 / (1.0 + lam)
            g = a_o - lam + 0.5 * sq_o * inv ** 2
            if np.all(np.abs(g) <= NEWTON_TOL * scale):
                break
            lam = lam + g / (1.0 + sq_o * inv ** 3)
        else:
            bad = int(np.argmax(np.abs(g) / scale))
            raise NumericalError(
                f"Cone projection did not converge in {NEWTON_MAX_ITERS} Newton steps "
                f"for input a={a_o[bad]!r}, |b|²={sq_o[bad]!r}"
            )
        b_new = b_arr[outside] / (1.0 + lam)[:, None]
        # pin the result onto the paraboloid so round-off cannot leave the cone
        a_new = np.minimum(a_o - lam, -0.5 * np.sum(b_new ** 2, axis=-1))
        a_out[outside] = a_new
        b_out[outside] = b_new

    a_out = a_out.reshape(a_in.shape)
    b_out = b_out.reshape(a_in.shape + (b_arr.shape[-1],))
    if scalar_input:
        b_out = b_out[..., 0]
    if a_in.ndim == 0:
        return float(a_out), b_out
    return a_out, b_out


def prox_bb(rho_cell, m_cell, step):
    """prox of step·f_2 through the Moreau identity for the support function of K_2.

    The subtraction can leave ρ̄ a few ulps below zero, or at zero with a
    nonzero m̄; such cells are pinned to (0, 0), the only point of dom f_2
    with vanishing density.
    """
    if not step > 0.0:
        raise ParameterError(f"prox step must be positive, got {step}")
    rho_cell = np.asarray(rho_cell, dtype=float)
    m_cell = np.asarray(m_cell, dtype=float)
    a, b = project_cone_K2(rho_cell / step, m_cell / step)
    r = rho_cell - step * np.asarray(a)
    x = m_cell - step * np.asarray(b)
    vanishing = r <= ZERO_DENSITY
    r = np.where(vanishing, 0.0, r)
    x = np.where(vanishing[..., None] if x.ndim > r.ndim else vanishing, 0.0, x)
    return r, x


def solve_terminal_cells(u, q, s):
    """Per-cell root r > 0 of r + s·(log(r/q) + 1) = u, found in y = log r.

    φ(y) = e^y + s·y − c is increasing and convex, so Newton started to the
    right of the root decreases monotonically onto it. Cells with q <= 0 get 0.
    """
    u = np.asarray(u, dtype=float)
    q = np.asarray(q, dtype=float)
    s = float(s)
    out = np.zeros(np.broadcast(u, q).shape)
    live = np.broadcast_to(q > 0.0, out.shape)
    u_l = np.broadcast_to(u, out.shape)[live]
    q_l = np.broadcast_to(q, out.shape)[live]
    c = u_l - s + s * np.log(q_l)
    y = np.maximum(np.log(np.abs(c) + 1.0), 0.0)
    scale = np.maximum(1.0, np.abs(c))
    for _ in range(NEWTON_MAX_ITERS):
        ey = np.exp(y)
        phi = ey + s * y - c
        if np.all(np.abs(phi) <= NEWTON_TOL * scale):
            break
        y = y - phi / (ey + s)
    else:
        bad = int(np.argmax(np.abs(phi) / scale))
        raise NumericalError(
            f"Terminal prox did not converge for u={u_l[bad]!r}, q={q_l[bad]!r}, s={s!r}"
        )
    out[live] = np.exp(y)
    return out


def _renormalizing_shift(u, q, s, cell_volume):
    """Cells r(ν) solving r + s·log(r/q) = u + ν, with ν chosen so Σ r·Δx = 1.

    Mass is increasing in ν with slope Σ r/(r + s)·Δx; Newton on ν is kept
    inside a bracket and falls back to bisection.
    """
    lo, hi = -math.inf, math.inf
    nu = 0.0
    for _ in range(NEWTON_MAX_ITERS):
        r = solve_terminal_cells(u + nu + s, q, s)
        excess = float(r.sum()) * cell_volume - 1.0
        if abs(excess) <= NEWTON_TOL:
            return r
        if excess > 0.0:
            hi = nu
        else:
            lo = nu
        slope = float((r / (r + s)).sum()) * cell_volume
        candidate = nu - excess / slope if slope > 0.0 else math.nan
        if lo < candidate < hi:
            nu = candidate
        elif math.isfinite(lo) and math.isfinite(hi):
            nu = 0.5 * (lo + hi)
        else:
            nu = nu - math.copysign(max(1.0, abs(nu)), excess)
    raise NumericalError(f"Terminal mass multiplier did not converge (s={s!r}, last excess {excess!r})")


def prox_terminal(rho_T, rho1, alpha, step, cell_volume=None):
    """prox of step·α·KL(·‖ρ1) over unit-mass slices; α = inf projects onto ρ1.

    The per-cell equation r + step·α·(log(r/ρ1) + 1) = ρ_T + μ is solved by
    Newton; the multiplier μ renormalizes the result to unit mass, which
    makes ρ1 a fixed point. Accepts DensitySlice arguments (returns a
    DensitySlice) or raw arrays together with cell_volume (returns an array).
    """
    as_slice = isinstance(rho_T, DensitySlice)
    if as_slice:
        grid = require_same_grid(rho_T.grid, rho1.grid)
        cell_volume = grid.cell_volume
    u = np.asarray(getattr(rho_T, "values", rho_T), dtype=float)
    q = np.asarray(getattr(rho1, "values", rho1), dtype=float)
    cell_volume = 1.0 if cell_volume is None else float(cell_volume)
    alpha = float(alpha)
    if abs(float(q.sum()) * cell_volume - 1.0) > 1e-8:
        raise ParameterError("prox_terminal needs a unit-mass target")

    if math.isinf(alpha):
        r = q.copy()
    else:
        if not (alpha > 0.0 and step > 0.0):
            raise ParameterError(f"alpha and step must be positive, got {alpha}, {step}")
        r = _renormalizing_shift(u, q, step * alpha, cell_volume)
        r = r / (r.sum() * cell_volume)
    return DensitySlice(rho_T.grid, r) if as_slice else r


def project_unit_mass(v, total):
    """Row-wise Euclidean projection onto {r >= 0, Σ r = total}."""
    v = np.asarray(v, dtype=float)
    rows, width = v.shape
    u = -np.sort(-v, axis=1)
    css = np.cumsum(u, axis=1) - total
    ranks = np.arange(1, width + 1)
    active = u - css / ranks > 0.0
    last = width - 1 - np.argmax(active[:, ::-1], axis=1)
    theta = css[np.arange(rows), last] / (last + 1)
    return np.maximum(v - theta[:, None], 0.0)


# --- staggered operators --------------------------------------------------

def _along(ndim, axis, sl):
    index = [slice(None)] * ndim
    index[axis] = sl
    return tuple(index)


class StaggeredOperator:
    """The stacked constraint operator K and its adjoint on a grid."""

    def __init__(self, grid):
        self.grid = grid
        self.weight = grid.cell_volume * grid.dt
        self.dt = grid.dt
        self.h = grid.cell_widths

    def divergence(self, m):
        out = 0.0
        for k, comp in enumerate(m):
            nd = comp.ndim
            out = out + (comp[_along(nd, k + 1, slice(1, None))] - comp[_along(nd, k + 1, slice(None, -1))]) / self.h[k]
        return out

    def continuity(self, rho, m):
        return (rho[1:] - rho[:-1]) / self.dt + self.divergence(m)

    @staticmethod
    def center_momentum(m):
        return np.stack(
            [0.5 * (c[_along(c.ndim, k + 1, slice(1, None))] + c[_along(c.ndim, k + 1, slice(None, -1))])
             for k, c in enumerate(m)],
            axis=-1,
        )

    def apply(self, x):
        rho, m, w_rho, w_m = x
        c = self.weight
        return (
            c * self.continuity(rho, m),
            c * (0.5 * (rho[1:] + rho[:-1]) - w_rho),
            c * (self.center_momentum(m) - w_m),
        )

    def adjoint(self, y):
        phi, lam_rho, lam_m = y
        c = self.weight
        n_t = phi.shape[0]
        rho_adj = np.zeros((n_t + 1,) + phi.shape[1:])
        rho_adj[:-1] += c * (-phi / self.dt + 0.5 * lam_rho)
        rho_adj[1:] += c * (phi / self.dt + 0.5 * lam_rho)
        m_adj = []
        for k in range(self.grid.dim):
            comp = np.zeros((n_t,) + self.grid.face_shape(k))
            nd = comp.ndim
            comp[_along(nd, k + 1, slice(None, -1))] += c * (-phi / self.h[k] + 0.5 * lam_m[..., k])
            comp[_along(nd, k + 1, slice(1, None))] += c * (phi / self.h[k] + 0.5 * lam_m[..., k])
            m_adj.append(comp)
        return rho_adj, m_adj, -c * lam_rho, -c * lam_m

    def zeros_primal(self):
        g = self.grid
        return (
            np.zeros((g.n_time + 1,) + g.shape),
            [np.zeros((g.n_time,) + g.face_shape(k)) for k in range(g.dim)],
            np.zeros((g.n_time,) + g.shape),
            np.zeros((g.n_time,) + g.shape + (g.dim,)),
        )

    def zeros_dual(self):
        g = self.grid
        return (
            np.zeros((g.n_time,) + g.shape),
            np.zeros((g.n_time,) + g.shape),
            np.zeros((g.n_time,) + g.shape + (g.dim,)),
        )


def _primal_norm_sq(x):
    rho, m, w_rho, w_m = x
    return float(np.sum(rho ** 2) + sum(np.sum(c ** 2) for c in m) + np.sum(w_rho ** 2) + np.sum(w_m ** 2))


def estimate_operator_norm(grid, iterations=50, seed=0):
    """‖K‖ by power iteration on KᵀK from a seeded random start."""
    op = StaggeredOperator(grid)
    rng = np.random.default_rng(seed)
    rho, m, w_rho, w_m = op.zeros_primal()
    x = (
        rng.standard_normal(rho.shape),
        [rng.standard_normal(c.shape) for c in m],
        rng.standard_normal(w_rho.shape),
        rng.standard_normal(w_m.shape),
    )
    estimate = 0.0
    for _ in range(max(1, int(iterations))):
        norm = math.sqrt(_primal_norm_sq(x))
        x = (x[0] / norm, [c / norm for c in x[1]], x[2] / norm, x[3] / norm)
        x = op.adjoint(op.apply(x))
        estimate = math.sqrt(math.sqrt(_primal_norm_sq(x)))
    return estimate


def _second_difference(n, spacing, first, last):
    """-1, 2, -1 stencil over spacing², with the end diagonals set to first and last."""
    if n == 1:
        return np.array([[first + last - 2.0]]) / spacing ** 2
    a = 2.0 * np.eye(n) - np.eye(n, k=1) - np.eye(n, k=-1)
    a[-1, -1] = last
    a[0, 0] = first
    return a / spacing ** 2


class SeparableLaplacian:
    """(Σ_axis A_axis) z = r for symmetric per-axis matrices, solved in their eigenbases.

    Eigenvalue sums below EIGEN_FLOOR times the largest are treated as a
    null space: the solve is then the least-norm one.
    """

    def __init__(self, matrices):
        self.bases = []
        total = 0.0
        ndim = len(matrices)
        for axis, a in enumerate(matrices):
            values, vectors = np.linalg.eigh(a)
            shape = [1] * ndim
            shape[axis] = -1
            total = total + values.reshape(shape)
            self.bases.append(vectors)
        total = np.asarray(total, dtype=float)
        null = total <= EIGEN_FLOOR * float(total.max())
        self.inverse = np.where(null, 0.0, 1.0 / np.where(null, 1.0, total))

    def _rotate(self, z, transpose):
        for axis, q in enumerate(self.bases):
            z = np.moveaxis(np.tensordot(q.T if transpose else q, z, axes=(1, axis)), 0, axis)
        return z

    def solve(self, r):
        return self._rotate(self._rotate(np.asarray(r, dtype=float), True) * self.inverse, False)


def neumann_matrices(grid):
    """div·divᵀ over the interior faces, one matrix per space axis."""
    return [_second_difference(grid.shape[k], grid.cell_widths[k], 1.0, 1.0) for k in range(grid.dim)]


def space_time_laplacian(grid):
    """D_t·D_tᵀ + div·divᵀ restricted to the free unknowns: ρ after the first node, interior faces."""
    return SeparableLaplacian([_second_difference(grid.n_time, grid.dt, 1.0, 2.0)] + neumann_matrices(grid))


def interpolating_flux(grid, rho0, rho1):
    """Time-constant face momentum carrying the linear interpolation of rho0 and rho1.

    Solves div m = −(ρ1 − ρ0)/T with zero wall flux as m = divᵀψ.
    """
    op = StaggeredOperator(grid)
    horizon = grid.n_time * grid.dt
    psi = SeparableLaplacian(neumann_matrices(grid)).solve(-(np.asarray(rho1) - np.asarray(rho0)) / horizon)
    m = []
    for k in range(grid.dim):
        comp = np.zeros(grid.face_shape(k))
        inner = (psi[_along(grid.dim, k, slice(None, -1))] - psi[_along(grid.dim, k, slice(1, None))]) / op.h[k]
        comp[_along(grid.dim, k, slice(1, -1))] = inner
        m.append(np.broadcast_to(comp, (grid.n_time,) + comp.shape).copy())
    return m


# --- solver types ---------------------------------------------------------

@dataclass(frozen=True)
class PdhgParams:
    alpha: float
    max_iters: int = 50000
    residual_tol: float = 1e-5
    primal_step: float | None = None
    dual_step: float | None = None
    preconditioner: str = "poisson"
    terminal_tol: float | None = None
    log_interval: int = 10
    power_iterations: int = 50
    floor: float = 1e-12
    seed: int = 0

    def __post_init__(self):
        alpha = float(self.alpha)
        if not alpha > 0.0:
            raise ParameterError(f"alpha must be positive or inf, got {self.alpha}")
        object.__setattr__(self, "alpha", alpha)
        if int(self.max_iters) < 1:
            raise ParameterError(f"max_iters must be >= 1, got {self.max_iters}")
        if not self.residual_tol > 0.0:
            raise ParameterError(f"residual_tol must be positive, got {self.residual_tol}")
        if int(self.log_interval) < 1:
            raise ParameterError(f"log_interval must be >= 1, got {self.log_interval}")
        for name in ("primal_step", "dual_step"):
            value = getattr(self, name)
            if value is not None and not value > 0.0:
                raise ParameterError(f"{name} must be positive, got {value}")
        if self.preconditioner not in PRECONDITIONERS:
            raise ParameterError(f"preconditioner must be one of {PRECONDITIONERS}, got {self.preconditioner!r}")
        if math.isinf(alpha) and self.terminal_tol is not None and not self.terminal_tol > 0.0:
            raise ParameterError(f"terminal_tol must be positive, got {self.terminal_tol}")

    @property
    def hard_constraint(self):
        return math.isinf(self.alpha)

    @property
    def scalar_steps(self):
        """Explicit steps always run the plain scheme under the tau*sigma*|K|^2 check."""
        return self.preconditioner == "scalar" or self.primal_step is not None or self.dual_step is not None


@dataclass(frozen=True)
class HistoryRow:
    iteration: int
    action: float
    kl_or_gap: float
    residual: float
    objective: float


@dataclass(eq=False)
class StaggeredVars:
    rho: DensityField
    m: MomentumField
    dual: np.ndarray
    rho_mid: np.ndarray | None = None
    m_mid: np.ndarray | None = None

    @property
    def grid(self):
        return self.rho.grid


@dataclass(eq=False)
class SolveReport:
    iterations: int
    action: float
    kl: float | None
    terminal_gap: float
    residual: float
    consensus_gap: float
    converged: bool
    alpha: float
    terminal_tol: float
    floor: float
    operator_norm: float
    primal_step: float
    dual_step: float
    history: list = field(default_factory=list)
    preconditioner: str = "scalar"

    @property
    def kl_or_gap(self):
        return self.terminal_gap if math.isinf(self.alpha) else self.kl

    @property
    def w2_estimate(self):
        """2·action: f_2 carries the factor ½, so the minimal action is ½·W2²."""
        return 2.0 * self.action


def _residual_norm(residual, grid):
    return math.sqrt(float(np.sum(residual ** 2)) * grid.cell_volume * grid.dt)


def continuity_residual(vars):
    """L² norm of (ρ_{k+1} − ρ_k)/Δt + div m_k over cells and time midpoints."""
    grid = require_same_grid(vars.rho.grid, vars.m.grid)
    op = StaggeredOperator(grid)
    res = op.continuity(np.asarray(vars.rho.values), [np.asarray(c) for c in vars.m.components])
    return _residual_norm(res, grid)


def floor_marginal(slice_, floor):
    values = np.maximum(np.asarray(slice_.values), floor)
    return DensitySlice(slice_.grid, values / (values.sum() * slice_.grid.cell_volume))


class OtflowGridSolver:
    """One solve at a time: the iterate arrays are owned by the instance."""

    def __init__(self, grid, params):
        self.grid = grid
        self.params = params
        self.operator = StaggeredOperator(grid)
        self.terminal_tol = params.terminal_tol if params.terminal_tol is not None else default_terminal_tol(grid)
        self.operator_norm = None
        self.tau = None
        self.sigma = None
        self.continuity_step = None
        self.poisson = None

    def _configure_steps(self):
        self.operator_norm = estimate_operator_norm(self.grid, self.params.power_iterations, self.params.seed)
        if not self.params.scalar_steps:
            # uniform primal step with prox_bb step 1; dual steps take CONTINUITY_SHARE of
            # (K_c T K_cᵀ)⁻¹ and CONSENSUS_SHARE of a row-sum bound on K_w T K_wᵀ
            c = self.operator.weight
            self.tau = 1.0 / c
            self.poisson = space_time_laplacian(self.grid)
            self.continuity_step = CONTINUITY_SHARE / (self.tau * c ** 2)
            self.sigma = CONSENSUS_SHARE / (2.0 * self.tau * c ** 2)
            logger.info(
                f"Operator norm {self.operator_norm:.6g}; poisson-preconditioned steps "
                f"tau={self.tau:.6g}, consensus sigma={self.sigma:.6g}"
            )
            return
        default = 0.9 / self.operator_norm
        self.tau = self.params.primal_step if self.params.primal_step is not None else default
        self.sigma = self.params.dual_step if self.params.dual_step is not None else default
        product = self.tau * self.sigma * self.operator_norm ** 2
        if product > 1.0 + 1e-12:
            raise ParameterError(
                f"Step sizes violate tau*sigma*|K|^2 <= 1: {self.tau:.4g}*{self.sigma:.4g}*{self.operator_norm:.4g}^2 = {product:.4g}"
            )
        logger.info(f"Operator norm {self.operator_norm:.6g}; tau={self.tau:.6g}, sigma={self.sigma:.6g}")

    def _dual_update(self, y, k_bar):
        if self.poisson is None:
            return tuple(yi + self.sigma * ki for yi, ki in zip(y, k_bar))
        return (
            y[0] + self.continuity_step * self.poisson.solve(k_bar[0]),
            y[1] + self.sigma * k_bar[1],
            y[2] + self.sigma * k_bar[2],
        )

    def _prox_g(self, x, rho0, rho1):
        rho, m, w_rho, w_m = x
        grid = self.grid
        rho = rho.copy()
        rho[0] = rho0
        interior = rho[1:-1].reshape(grid.n_time - 1, -1)
        rho[1:-1] = project_unit_mass(interior, 1.0 / grid.cell_volume).reshape(rho[1:-1].shape)
        rho[-1] = prox_terminal(rho[-1], rho1, self.params.alpha, self.tau * grid.cell_volume, grid.cell_volume)
        m = [c.copy() for c in m]
        for k, comp in enumerate(m):
            comp[_along(comp.ndim, k + 1, [0, -1])] = 0.0
        w_rho, w_m = prox_bb(w_rho, w_m, self.tau * self.operator.weight)
        return rho, m, w_rho, w_m

    def _objective(self, x, rho1):
        rho, _, w_rho, w_m = x
        grid = self.grid
        action = action_density(w_rho, w_m, grid.cell_volume, grid.dt)
        terminal = rho[-1]
        if self.params.hard_constraint:
            gap = float(np.abs(terminal - rho1).sum()) * grid.cell_volume
            return action, gap, action
        support = terminal > 0.0
        kl = float(np.sum(terminal[support] * np.log(terminal[support] / rho1[support]))) * grid.cell_volume
        return action, kl, action + self.params.alpha * kl

    def solve(self, rho0, rho1):
        grid = require_same_grid(self.grid, rho0.grid, rho1.grid)
        params = self.params
        self._configure_steps()

        rho0 = floor_marginal(rho0, params.floor)
        rho1 = floor_marginal(rho1, params.floor)
        r0, r1 = np.asarray(rho0.values), np.asarray(rho1.values)

        op = self.operator
        rho_init = np.asarray(DensityField.linear_interpolation(rho0, rho1).values).copy()
        m_init = interpolating_flux(grid, r0, r1)
        x = (rho_init, m_init, 0.5 * (rho_init[1:] + rho_init[:-1]), op.center_momentum(m_init))
        y = op.zeros_dual()

        reference = max(self._objective(x, r1)[2], max(grid.box.widths) ** 2 * grid.dim)
        history = []
        above = 0
        converged = False
        iteration = 0
        residual = consensus = math.inf

        for iteration in range(1, params.max_iters + 1):
            g = op.adjoint(y)
            trial = (
                x[0] - self.tau * g[0],
                [c - self.tau * gc for c, gc in zip(x[1], g[1])],
                x[2] - self.tau * g[2],
                x[3] - self.tau * g[3],
            )
            try:
                x_new = self._prox_g(trial, r0, r1)
            except NumericalError as e:
                raise NumericalError(f"{e} (iteration {iteration})", history) from e
            x_bar = (
                2.0 * x_new[0] - x[0],
                [2.0 * a - b for a, b in zip(x_new[1], x[1])],
                2.0 * x_new[2] - x[2],
                2.0 * x_new[3] - x[3],
            )
            k_bar = op.apply(x_bar)
            y = self._dual_update(y, k_bar)
            change = float(np.max(np.abs(x_new[0] - x[0])))
            x = x_new

            if iteration % params.log_interval and iteration != params.max_iters:
                continue

            if not all(np.all(np.isfinite(a)) for a in (x[0], x[2], x[3], *x[1])):
                raise NumericalError(f"Non-finite iterate at iteration {iteration}", history)
            residual = _residual_norm(op.continuity(x[0], x[1]), grid)
            _, cons_rho, cons_m = op.apply(x)
            consensus = math.sqrt(
                (float(np.sum(cons_rho ** 2)) + float(np.sum(cons_m ** 2))) / op.weight
            )
            action, kl_or_gap, objective = self._objective(x, r1)
            history.append(HistoryRow(iteration, action, kl_or_gap, residual, objective))
            logger.debug(
                f"iter {iteration}: action={action:.6g} kl_or_gap={kl_or_gap:.3e} "
                f"residual={residual:.3e} consensus={consensus:.3e}"
            )

            above = above + 1 if objective > DIVERGENCE_FACTOR * reference else 0
            if above >= DIVERGENCE_PATIENCE:
                raise NumericalError(
                    f"Solver diverging: objective {objective:.4g} above {DIVERGENCE_FACTOR}x reference "
                    f"{reference:.4g} for {DIVERGENCE_PATIENCE} consecutive logs (iteration {iteration})",
                    history,
                )
            if residual <= params.residual_tol and consensus <= params.residual_tol and change <= params.residual_tol:
                converged = True
                break

        rho_field = DensityField(grid, x[0])
        momentum = MomentumField(grid, tuple(x[1]))
        action, kl_or_gap, _ = self._objective(x, r1)
        gap = float(np.abs(x[0][-1] - r1).sum()) * grid.cell_volume
        kl = None if params.hard_constraint else kl_divergence(rho_field.slice(grid.n_time), rho1)

        if converged:
            logger.info(f"Converged in {iteration} iterations: action={action:.6g}, residual={residual:.3e}")
        else:
            logger.warning(f"Stopped at max_iters={params.max_iters}: residual={residual:.3e}, consensus={consensus:.3e}")

        report = SolveReport(
            iterations=iteration,
            action=action,
            kl=kl,
            terminal_gap=gap,
            residual=residual,
            consensus_gap=consensus,
            converged=converged,
            alpha=params.alpha,
            terminal_tol=self.terminal_tol,
            floor=params.floor,
            operator_norm=self.operator_norm,
            primal_step=self.tau,
            dual_step=self.sigma,
            history=history,
            preconditioner="scalar" if params.scalar_steps else params.preconditioner,
        )
        return StaggeredVars(rho_field, momentum, y[0].copy(), x[2].copy(), x[3].copy()), report


def solve_otflow_grid(rho0, rho1, grid, params):
    return OtflowGridSolver(grid, params).solve(rho0, rho1)


def write_report_csv(report, path, comments=()):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        for line in comments:
            f.write(f"# {line}\n")
        writer = csv.writer(f)
        writer.writerow(["iter", "action", "kl_or_gap", "residual"])
        for row in getattr(report, "history", report):
            writer.writerow([row.iteration, repr(row.action), repr(row.kl_or_gap), repr(row.residual)])
    return path
