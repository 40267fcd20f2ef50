"""Exact transport oracles used as ground truth for both solvers.

1-D quantile transport on cell densities, Gaussian closed forms, and exact
discrete OT (assignment for equal uniform sets, network simplex otherwise).
"""

import logging
from dataclasses import dataclass

import numpy as np
import ot
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from src.errors import NumericalError, ScaleGuardError, StructuralError
from src.measures import DensitySlice, require_same_grid

logger = logging.getLogger(__name__)

LP_SCALE_GUARD = 10 ** 6
ASSIGNMENT_MAX_SIZE = 2 ** 13
MARGINAL_TOL = 1e-9
# network simplex pivots allowed per coupling entry, with a floor for tiny problems
EMD_ITERS_PER_ENTRY = 100
EMD_MIN_ITERS = 100_000


@dataclass(frozen=True, eq=False)
class TransportPlan:
    coupling: np.ndarray
    cost: float
    source_weights: np.ndarray
    target_weights: np.ndarray

    def __post_init__(self):
        rows = self.coupling.sum(axis=1)
        cols = self.coupling.sum(axis=0)
        if np.any(self.coupling < -MARGINAL_TOL):
            raise StructuralError("Transport plan has negative entries")
        if np.max(np.abs(rows - self.source_weights)) > MARGINAL_TOL or \
                np.max(np.abs(cols - self.target_weights)) > MARGINAL_TOL:
            raise StructuralError("Transport plan violates its marginal constraints")

    @property
    def source_size(self):
        return self.coupling.shape[0]

    @property
    def target_size(self):
        return self.coupling.shape[1]


# --- 1-D quantile transport ----------------------------------------------

def _require_1d_unit(slice_):
    if slice_.grid.dim != 1:
        raise StructuralError(f"1-D oracle needs a 1-D grid, got dim {slice_.grid.dim}")
    if abs(slice_.mass - 1.0) > 1e-8:
        raise StructuralError(f"1-D oracle needs unit mass, got {slice_.mass!r}")


def _quantile_segments(slice_):
    """Linear pieces (u_lo, u_hi, x_lo, x_hi) of the quantile function, one per charged cell."""
    edges = slice_.grid.edges(0)
    masses = np.asarray(slice_.values) * slice_.grid.cell_volume
    cdf = np.concatenate([[0.0], np.cumsum(masses)])
    cdf /= cdf[-1]
    charged = masses > 0.0
    return cdf[:-1][charged], cdf[1:][charged], edges[:-1][charged], edges[1:][charged]


def _evaluate_quantile(segments, u, u_mid):
    """Evaluate Q at u using the piece selected by u_mid (keeps one piece per subinterval)."""
    u_lo, u_hi, x_lo, x_hi = segments
    idx = np.clip(np.searchsorted(u_hi, u_mid, side="left"), 0, len(u_hi) - 1)
    span = u_hi[idx] - u_lo[idx]
    frac = np.where(span > 0.0, (u - u_lo[idx]) / np.where(span > 0.0, span, 1.0), 0.0)
    return x_lo[idx] + frac * (x_hi[idx] - x_lo[idx])


def _common_breakpoints(*segment_sets):
    knots = np.unique(np.concatenate([np.concatenate([s[0], s[1]]) for s in segment_sets] + [np.array([0.0, 1.0])]))
    return knots[(knots >= 0.0) & (knots <= 1.0)]


def w2_squared_1d(rho_a, rho_b):
    """∫₀¹ |Q_a(u) − Q_b(u)|² du with piecewise-linear quantiles, integrated exactly."""
    require_same_grid(rho_a.grid, rho_b.grid)
    _require_1d_unit(rho_a)
    _require_1d_unit(rho_b)
    seg_a, seg_b = _quantile_segments(rho_a), _quantile_segments(rho_b)
    knots = _common_breakpoints(seg_a, seg_b)
    left, right = knots[:-1], knots[1:]
    mid = 0.5 * (left + right)
    diff = [
        _evaluate_quantile(seg_a, u, mid) - _evaluate_quantile(seg_b, u, mid)
        for u in (left, mid, right)
    ]
    # Simpson is exact for the quadratic integrand on each piece
    return float(np.sum((right - left) / 6.0 * (diff[0] ** 2 + 4.0 * diff[1] ** 2 + diff[2] ** 2)))


def displacement_interpolation_1d(rho_a, rho_b, t):
    """Push rho_a forward by x ↦ (1−t)x + t·T(x), T the monotone map, rebinned on the grid."""
    grid = require_same_grid(rho_a.grid, rho_b.grid)
    _require_1d_unit(rho_a)
    _require_1d_unit(rho_b)
    if not 0.0 <= t <= 1.0:
        raise StructuralError(f"Interpolation time must lie in [0, 1], got {t}")
    seg_a, seg_b = _quantile_segments(rho_a), _quantile_segments(rho_b)
    knots = _common_breakpoints(seg_a, seg_b)
    left, right = knots[:-1], knots[1:]
    mid = 0.5 * (left + right)

    def x_t(u):
        return (1.0 - t) * _evaluate_quantile(seg_a, u, mid) + t * _evaluate_quantile(seg_b, u, mid)

    # both ends of every piece, so jumps of the map become vertical steps of the CDF
    xs = np.column_stack([x_t(left), x_t(right)]).ravel()
    us = np.column_stack([left, right]).ravel()
    xs = np.maximum.accumulate(xs)
    edges = grid.edges(0)
    cdf = np.interp(edges, xs, us, left=0.0, right=1.0)
    cdf[0], cdf[-1] = 0.0, 1.0
    masses = np.maximum(np.diff(cdf), 0.0)
    values = masses / (masses.sum() * grid.cell_volume)
    return DensitySlice(grid, values)


# --- discrete OT -----------------------------------------------------------

def _check_scale(n, m, equal_assignment):
    if equal_assignment:
        if n > ASSIGNMENT_MAX_SIZE:
            raise ScaleGuardError(
                f"Exact assignment refused for {n} points (limit {ASSIGNMENT_MAX_SIZE}); subsample the sets"
            )
    elif n * m > LP_SCALE_GUARD:
        raise ScaleGuardError(
            f"Exact transport LP refused for {n}x{m} = {n * m} couplings (limit {LP_SCALE_GUARD}); subsample the sets"
        )


def discrete_ot_exact(a, b, cost_exponent=2):
    """Optimal coupling between two weighted particle sets for cost |x−y|^p, p in {1, 2}."""
    if cost_exponent not in (1, 2):
        raise StructuralError(f"cost_exponent must be 1 or 2, got {cost_exponent}")
    if a.dim != b.dim:
        raise StructuralError(f"Particle sets disagree in dimension: {a.dim} vs {b.dim}")
    n, m = len(a), len(b)
    equal_assignment = n == m and a.is_uniform and b.is_uniform
    _check_scale(n, m, equal_assignment)

    costs = cdist(a.points, b.points, metric="euclidean") ** cost_exponent
    if equal_assignment:
        rows, cols = linear_sum_assignment(costs)
        coupling = np.zeros((n, m))
        coupling[rows, cols] = 1.0 / n
    else:
        coupling = _network_simplex(np.asarray(a.weights), np.asarray(b.weights), costs)

    cost = float(np.sum(coupling * costs))
    logger.debug(f"Exact OT {n}x{m} (p={cost_exponent}): cost {cost:.6g}")
    return TransportPlan(coupling, cost, np.asarray(a.weights), np.asarray(b.weights))


def _network_simplex(wa, wb, costs):
    """ot.emd with a pivot budget scaled to the problem; any solver warning is a failure."""
    budget = max(EMD_MIN_ITERS, EMD_ITERS_PER_ENTRY * costs.size)
    coupling, log = ot.emd(wa, wb, costs, numItermax=budget, log=True)
    if log.get("warning"):
        raise NumericalError(
            f"Network simplex failed on a {costs.shape[0]}x{costs.shape[1]} problem "
            f"(budget {budget} pivots): {log['warning']}"
        )
    return coupling


def sorted_pairing_cost(a, b, cost_exponent=1):
    """Monotone coupling cost for equal-size uniform 1-D sets."""
    xa = np.sort(a.points[:, 0])
    xb = np.sort(b.points[:, 0])
    return float(np.mean(np.abs(xa - xb) ** cost_exponent))


def w1_empirical(a, b):
    """Exact W1 between particle sets; sorted pairing in 1-D when sizes and weights allow it."""
    if a.dim != b.dim:
        raise StructuralError(f"Particle sets disagree in dimension: {a.dim} vs {b.dim}")
    if a.dim == 1 and len(a) == len(b) and a.is_uniform and b.is_uniform:
        return sorted_pairing_cost(a, b, 1)
    return discrete_ot_exact(a, b, cost_exponent=1).cost


def gaussian_w2_closed_form(a, b):
    """W2² between untruncated isotropic Gaussians: |Δmean|² + d·(Δstd)²."""
    if a.dim != b.dim:
        raise StructuralError(f"Gaussian specs disagree in dimension: {a.dim} vs {b.dim}")
    shift = np.asarray(a.mean) - np.asarray(b.mean)
    return float(shift @ shift + a.dim * (a.stddev - b.stddev) ** 2)
