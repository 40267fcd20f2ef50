"""Fast built-in checks run by `otflow selftest`; each mirrors an exact identity."""

import logging
import math

import numpy as np
import torch

from src.experiments import straightness_metric
from src.functionals import QUADRATIC, kl_divergence, perspective_f
from src.grid_solver import project_cone_K2, prox_terminal
from src.measures import Box, GaussianSpec, GridSpec, ParticleSet, discretize_gaussian
from src.neural_flow import (
    MlpParams,
    TrajectoryBatch,
    clip_params,
    init_params,
    integrate_flow,
    loss_terms,
    mlp_velocity,
    parameter_count,
)
from src.transport_oracles import discrete_ot_exact, w2_squared_1d

logger = logging.getLogger(__name__)


def _reference_slices():
    grid = GridSpec.from_bounds([0.0], [1.0], 64, 32)
    rho0 = discretize_gaussian(GaussianSpec([0.35], 0.08, grid.box), grid)
    rho1 = discretize_gaussian(GaussianSpec([0.65], 0.08, grid.box), grid)
    return grid, rho0, rho1


def _zero_net(d=2, hidden=(8,)):
    box = Box([-4.0] * d, [4.0] * d)
    widths = (d + 1, *hidden, d)
    return MlpParams(widths, torch.zeros(parameter_count(widths), dtype=torch.float64), 10.0, box)


def check_perspective_extension():
    assert perspective_f(QUADRATIC, 0.0, [0.0]) == 0.0
    assert math.isinf(perspective_f(QUADRATIC, 0.0, [1.0]))
    assert math.isinf(perspective_f(QUADRATIC, -1.0, [0.0]))


def check_kl_self_is_zero():
    _, rho0, _ = _reference_slices()
    assert kl_divergence(rho0, rho0) == 0.0


def check_cone_interior_fixed():
    a, b = project_cone_K2(-1.0, np.array([0.5]))
    assert a == -1.0 and b[0] == 0.5


def check_terminal_prox_hard_constraint():
    _, rho0, rho1 = _reference_slices()
    out = prox_terminal(rho0, rho1, math.inf, 1.0)
    assert np.array_equal(out.values, rho1.values)


def check_w2_self_is_zero():
    _, rho0, _ = _reference_slices()
    assert w2_squared_1d(rho0, rho0) < 1e-14


def check_assignment_identical_sets():
    points = np.random.default_rng(0).random((16, 2))
    plan = discrete_ot_exact(ParticleSet(points), ParticleSet(points))
    assert plan.cost < 1e-14


def check_zero_net_is_still():
    params = _zero_net()
    assert np.all(mlp_velocity([0.3, -1.2], 0.5, params) == 0.0)
    points = ParticleSet(np.random.default_rng(1).uniform(-3.0, 3.0, (32, 2)))
    traj = integrate_flow(points, params, 8)
    assert torch.equal(traj.states[-1], traj.states[0])
    assert torch.all(traj.log_dets[-1] == 0.0) and torch.all(traj.kinetic[-1] == 0.0)


def check_boundary_mask():
    params = init_params((3, 8, 2), 10.0, Box([-4.0, -4.0], [4.0, 4.0]), seed=3)
    assert np.all(mlp_velocity([4.0, 1.0], 0.2, params) == 0.0)


def check_clip():
    params = init_params((2, 8, 1), 100.0, Box([-4.0], [4.0]), seed=0)
    doubled = params.with_theta(params.theta / params.norm * 2.0)
    small = MlpParams(doubled.widths, doubled.theta, 1.0, doubled.box)
    clipped = clip_params(small)
    assert abs(clipped.norm - 1.0) < 1e-12
    assert torch.equal(clip_params(clipped).theta, clipped.theta)


def check_loss_at_origin():
    traj = integrate_flow(ParticleSet(np.zeros((1, 2))), _zero_net(), 4)
    loss = loss_terms(traj, 1.0)
    assert abs(loss.c_mean - math.log(2.0 * math.pi)) < 1e-12 and loss.l_mean == 0.0


def check_straight_lines():
    t = torch.linspace(0.0, 1.0, 9, dtype=torch.float64)[:, None, None]
    states = torch.tensor([[0.0, 0.0]], dtype=torch.float64) + t * torch.tensor([[1.0, 2.0]], dtype=torch.float64)
    traj = TrajectoryBatch(np.zeros((1, 2)), states, torch.zeros(9, 1), torch.zeros(9, 1), 8)
    assert straightness_metric(traj) < 1e-10


CHECKS = [
    check_perspective_extension,
    check_kl_self_is_zero,
    check_cone_interior_fixed,
    check_terminal_prox_hard_constraint,
    check_w2_self_is_zero,
    check_assignment_identical_sets,
    check_zero_net_is_still,
    check_boundary_mask,
    check_clip,
    check_loss_at_origin,
    check_straight_lines,
]


def run_selftest():
    """Run every check; returns the number of failures."""
    failures = 0
    for check in CHECKS:
        try:
            check()
            logger.info(f"PASS {check.__name__}")
        except Exception as e:
            failures += 1
            logger.error(f"FAIL {check.__name__}: {e!r}")
    logger.info(f"Selftest: {len(CHECKS) - failures}/{len(CHECKS)} checks passed")
    return failures
