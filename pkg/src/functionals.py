"""Variational quantities: perspective function, Benamou-Brenier action,
KL divergence and its Fenchel dual, and the penalized / constrained objectives.

Extended reals are plain floats; +inf is the infinity marker and NaN never
escapes these functions.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from src.errors import ParameterError
from src.measures import require_same_grid

logger = logging.getLogger(__name__)

ZERO_DENSITY = 1e-300
INF = math.inf


@dataclass(frozen=True)
class ConeParams:
    p: float = 2.0

    def __post_init__(self):
        if not self.p > 1.0:
            raise ParameterError(f"Cone exponent p must exceed 1, got {self.p}")
        object.__setattr__(self, "p", float(self.p))

    @property
    def q(self):
        return self.p / (self.p - 1.0)


QUADRATIC = ConeParams(2.0)


def perspective_f(cone, t, x):
    """(1/p)|x|^p / t^(p-1) for t > 0; 0 at the origin; +inf otherwise."""
    norm_x = float(np.linalg.norm(np.atleast_1d(np.asarray(x, dtype=float))))
    t = float(t)
    if t > ZERO_DENSITY:
        return norm_x ** cone.p / (cone.p * t ** (cone.p - 1.0))
    if t >= 0.0 and norm_x == 0.0:
        return 0.0
    return INF


def perspective_f2_array(t, x):
    """Vectorized f_2. t has shape S, x has shape S + (d,). Returns shape S."""
    t = np.asarray(t, dtype=float)
    sq = np.sum(np.asarray(x, dtype=float) ** 2, axis=-1)
    out = np.full(t.shape, INF)
    positive = t > ZERO_DENSITY
    out[positive] = 0.5 * sq[positive] / t[positive]
    origin = ~positive & (t >= 0.0) & (sq == 0.0)
    out[origin] = 0.0
    return out


def _sum_extended(values):
    if np.any(np.isinf(values)):
        return INF
    return float(values.sum())


def action_density(rho_mid, m_mid, cell_volume, dt):
    """Σ f_2(ρ̄, m̄)·Δx·Δt over centered space-time values."""
    return _sum_extended(perspective_f2_array(rho_mid, m_mid)) * cell_volume * dt


def time_midpoints(rho_values):
    return 0.5 * (rho_values[1:] + rho_values[:-1])


def bb_action(rho, m):
    """Benamou-Brenier action of a staggered (DensityField, MomentumField) pair."""
    grid = require_same_grid(rho.grid, m.grid)
    return action_density(time_midpoints(np.asarray(rho.values)), m.centered(), grid.cell_volume, grid.dt)


def kl_divergence(p, q):
    """Σ p·log(p/q)·Δx over cells with p > 0; +inf when p is not absolutely continuous wrt q."""
    grid = require_same_grid(p.grid, q.grid)
    pv, qv = np.asarray(p.values), np.asarray(q.values)
    support = pv > 0.0
    if np.any(qv[support] <= 0.0):
        return INF
    ratio = pv[support] / qv[support]
    return float(np.sum(pv[support] * np.log(ratio))) * grid.cell_volume


def kl_dual_objective(p, q, h):
    """1 + Σ h·p·Δx − Σ e^h·q·Δx, a lower bound on KL(p‖q) for every finite h."""
    grid = require_same_grid(p.grid, q.grid)
    h = np.asarray(h, dtype=float).reshape(grid.shape)
    if not np.all(np.isfinite(h)):
        raise ParameterError("KL dual test function must be finite on every cell")
    return 1.0 + float(np.sum(h * p.values)) * grid.cell_volume - float(np.sum(np.exp(h) * q.values)) * grid.cell_volume


def terminal_l1_gap(rho_T, rho1):
    return rho_T.l1_distance(rho1)


def default_terminal_tol(grid):
    return 1e-6 * grid.n_cells * grid.cell_volume


def objective_F(rho, m, rho1, alpha, terminal_tol=None):
    """B_2 + α·KL(ρ(·,T)‖ρ1) for finite α; B_2 on the terminal L¹ ball for α = inf."""
    grid = require_same_grid(rho.grid, m.grid, rho1.grid)
    alpha = float(alpha)
    if not alpha > 0.0:
        raise ParameterError(f"alpha must be positive, got {alpha}")
    rho_T = rho.slice(grid.n_time)
    action = bb_action(rho, m)

    if math.isinf(alpha):
        tol = default_terminal_tol(grid) if terminal_tol is None else float(terminal_tol)
        if not tol > 0.0:
            raise ParameterError(f"terminal_tol must be positive when alpha is infinite, got {tol}")
        if terminal_l1_gap(rho_T, rho1) > tol:
            return INF
        return action

    kl = kl_divergence(rho_T, rho1)
    if math.isinf(action) or math.isinf(kl):
        return INF
    return action + alpha * kl


def recover_velocity(rho, m, floor):
    """v = m̄/ρ̄ on cells where ρ̄ > floor, 0 elsewhere. Shape (n_time, *grid.shape, dim)."""
    grid = require_same_grid(rho.grid, m.grid)
    if not floor > 0.0:
        raise ParameterError(f"Velocity floor must be positive, got {floor}")
    rho_mid = time_midpoints(np.asarray(rho.values))
    m_mid = m.centered()
    v = np.zeros_like(m_mid)
    mask = rho_mid > floor
    v[mask] = m_mid[mask] / rho_mid[mask][:, None]
    return v
