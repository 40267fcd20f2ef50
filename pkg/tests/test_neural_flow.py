import math

import numpy as np
import pytest
import torch

from src.errors import DomainError, ParameterError, StructuralError
from src.measures import Box, GaussianSpec, ParticleSet, sample_distribution
from src.neural_flow import (
    DTYPE,
    MlpParams,
    TrainingSchedule,
    clip_params,
    evaluate_loss,
    generate,
    grad_loss,
    init_params,
    integrate_flow,
    lipschitz_probe,
    load_checkpoint,
    log_density,
    loss_jn,
    loss_terms,
    mlp_velocity,
    parameter_count,
    save_checkpoint,
    train,
    value_and_grad,
    write_history_csv,
)

LOG_2PI = math.log(2.0 * math.pi)


def _zero_params(box, hidden=(8,)):
    widths = (box.dim + 1, *hidden, box.dim)
    return MlpParams(widths, torch.zeros(parameter_count(widths), dtype=DTYPE), 10.0, box)


def _linear_field(z, t):
    return z, torch.full((z.shape[0],), float(z.shape[1]), dtype=DTYPE)


@pytest.fixture
def square_box():
    return Box([-4.0, -4.0], [4.0, 4.0])


@pytest.fixture
def small_net(neural_box):
    return init_params((2, 6, 1), 10.0, neural_box, seed=4)


class TestParams:
    def test_flat_layout(self):
        assert parameter_count((3, 16, 2)) == 3 * 16 + 16 + 16 * 2 + 2

    def test_rejects_wrong_input_width(self, neural_box):
        with pytest.raises(StructuralError):
            MlpParams((1, 4, 1), torch.zeros(parameter_count((1, 4, 1))), 1.0, neural_box)

    def test_rejects_wrong_theta_length(self, neural_box):
        with pytest.raises(StructuralError):
            MlpParams((2, 4, 1), torch.zeros(3), 1.0, neural_box)

    def test_init_is_seeded(self, neural_box):
        a = init_params((2, 8, 1), 10.0, neural_box, seed=9)
        b = init_params((2, 8, 1), 10.0, neural_box, seed=9)
        assert torch.equal(a.theta, b.theta)
        assert a.norm <= 10.0


class TestVelocity:
    def test_zero_weights_give_zero_field(self, square_box):
        params = _zero_params(square_box)
        assert np.all(mlp_velocity([0.3, -1.0], 0.4, params) == 0.0)

    def test_boundary_faces_are_still(self, square_box):
        params = init_params((3, 8, 2), 10.0, square_box, seed=2)
        faces = np.array([[-4.0, 1.0], [4.0, -2.5], [0.7, 4.0], [3.1, -4.0]])
        assert np.all(mlp_velocity(faces, 0.5, params) == 0.0)

    def test_hand_evaluated_tiny_net(self, neural_box):
        w_x, w_t, b1, c, b2 = 0.7, -0.3, 0.2, 1.5, -0.1
        params = MlpParams((2, 1, 1), torch.tensor([w_x, w_t, b1, c, b2], dtype=DTYPE), 10.0, neural_box)
        x, t = 1.3, 0.25
        mask = (x + 4.0) * (4.0 - x) / 16.0
        expected = mask * (c * math.tanh(w_x * x + w_t * t + b1) + b2)
        assert mlp_velocity([x], t, params)[0] == pytest.approx(expected, abs=1e-12)

    def test_outside_box(self, small_net):
        with pytest.raises(DomainError):
            mlp_velocity([4.5], 0.0, small_net)

    def test_continuous_in_parameters(self, small_net, rng):
        grid = np.linspace(-4.0, 4.0, 1000)[:, None]
        base = mlp_velocity(grid, 0.5, small_net)
        direction = torch.as_tensor(rng.normal(size=small_net.n_params), dtype=DTYPE)
        ratios = []
        for n in range(1, 6):
            delta = direction * 2.0 ** -n * 1e-2
            moved = mlp_velocity(grid, 0.5, small_net.with_theta(small_net.theta + delta))
            sup = float(np.max(np.abs(moved - base)))
            ratios.append(sup / float(torch.linalg.vector_norm(delta)))
        assert max(ratios) <= 2.0 * ratios[0]


class TestClip:
    def test_inside_ball_is_identity(self, small_net):
        params = small_net.with_theta(small_net.theta / small_net.norm * 5.0)
        assert clip_params(params) is params

    def test_outside_ball_lands_on_sphere(self, small_net):
        params = small_net.with_theta(small_net.theta / small_net.norm * 20.0)
        clipped = clip_params(params)
        assert clipped.norm == pytest.approx(10.0, abs=1e-12)
        assert clipped.norm <= 10.0

    def test_idempotent_bitwise(self, small_net):
        clipped = clip_params(small_net.with_theta(small_net.theta * 1e3))
        assert torch.equal(clip_params(clipped).theta, clipped.theta)


class TestIntegration:
    def test_zero_params_do_not_move(self, square_box, rng):
        x0 = ParticleSet(rng.uniform(-3.0, 3.0, (16, 2)))
        traj = integrate_flow(x0, _zero_params(square_box), 8)
        assert torch.equal(traj.states[-1], traj.states[0])
        assert torch.all(traj.log_dets[-1] == 0.0)
        assert torch.all(traj.kinetic[-1] == 0.0)

    def test_initial_conditions(self, small_net):
        traj = integrate_flow(ParticleSet([[0.5], [-1.0]]), small_net, 4)
        np.testing.assert_array_equal(traj.states[0].numpy(), [[0.5], [-1.0]])
        assert torch.all(traj.log_dets[0] == 0.0)
        assert traj.states.shape == (5, 2, 1)

    def test_linear_field_exponential_flow(self):
        x = 0.5
        traj = integrate_flow([[x]], None, 16, velocity_fn=_linear_field)
        assert float(traj.states[-1, 0, 0]) == pytest.approx(x * math.e, abs=1e-6)
        assert float(traj.log_dets[-1, 0]) == pytest.approx(1.0, abs=1e-12)
        assert float(traj.kinetic[-1, 0]) == pytest.approx(0.25 * x * x * (math.e ** 2 - 1.0), abs=1e-6)

    def test_rk4_order(self):
        errors = []
        for n_steps in (8, 16):
            traj = integrate_flow([[1.0]], None, n_steps, velocity_fn=_linear_field)
            errors.append(abs(float(traj.states[-1, 0, 0]) - math.e))
        assert 12.0 <= errors[0] / errors[1] <= 20.0

    def test_trajectories_stay_in_box(self, square_box, rng):
        params = init_params((3, 16, 2), 50.0, square_box, seed=1, scale=4.0)
        x0 = ParticleSet(rng.uniform(-3.9, 3.9, (200, 2)))
        traj = integrate_flow(x0, params, 16)
        assert traj.exits == 0
        assert torch.all(traj.states.abs() <= 4.0 + 1e-9)

    def test_rejects_zero_steps(self, small_net):
        with pytest.raises(ParameterError):
            integrate_flow([[0.0]], small_net, 0)


class TestLoss:
    def test_standard_normal_at_origin(self, square_box):
        traj = integrate_flow(ParticleSet(np.zeros((1, 2))), _zero_params(square_box), 4)
        loss = loss_terms(traj, 1.0)
        assert loss.c_mean == pytest.approx(1.83788, abs=1e-5)
        assert loss.l_mean == 0.0

    def test_still_flow_gives_gaussian_cost(self, square_box, rng):
        points = rng.uniform(-3.0, 3.0, (10, 2))
        traj = integrate_flow(ParticleSet(points), _zero_params(square_box), 4)
        loss = loss_terms(traj, 1.0, keep_samples=True)
        np.testing.assert_allclose(loss.c_samples, 0.5 * np.sum(points ** 2, axis=1) + LOG_2PI, atol=1e-12)

    def test_doubling_alpha(self, small_net, rng):
        traj = integrate_flow(ParticleSet(rng.uniform(-2.0, 2.0, (20, 1))), small_net, 8)
        alpha = 3.0
        one, two = loss_terms(traj, alpha), loss_terms(traj, 2.0 * alpha)
        assert one.l_mean > 0.0
        assert two.j - one.j == pytest.approx(-one.l_mean / alpha, abs=1e-12)
        assert one.j == one.c_mean + (2.0 / alpha) * one.l_mean

    def test_single_sample_batch(self, small_net):
        batch = ParticleSet([[0.7]])
        expected = loss_terms(integrate_flow(batch, small_net, 8), 5.0)
        assert loss_jn(batch, small_net, 5.0, 8).j == expected.j

    def test_duplicated_batch(self, small_net, rng):
        points = rng.uniform(-3.0, 3.0, (25, 1))
        once = loss_jn(ParticleSet(points), small_net, 5.0, 8).j
        twice = loss_jn(ParticleSet(np.vstack([points, points])), small_net, 5.0, 8).j
        assert twice == pytest.approx(once, rel=1e-12)

    def test_chunked_evaluation_matches(self, small_net, rng):
        points = rng.uniform(-3.0, 3.0, (50, 1))
        direct = loss_jn(ParticleSet(points), small_net, 5.0, 8).j
        assert evaluate_loss(points, small_net, 5.0, 8, chunk=7) == pytest.approx(direct, rel=1e-12)

    def test_log_density_of_still_flow(self, neural_box):
        points = np.array([[0.0], [1.0], [-2.0]])
        expected = -(0.5 * points[:, 0] ** 2 + 0.5 * LOG_2PI)
        np.testing.assert_allclose(log_density(points, _zero_params(neural_box), 4), expected, atol=1e-12)

    def test_rejects_nonpositive_alpha(self, small_net):
        traj = integrate_flow([[0.0]], small_net, 2)
        with pytest.raises(ParameterError):
            loss_terms(traj, 0.0)

    @pytest.mark.slow
    def test_monte_carlo_rate(self, small_net, neural_box):
        spec = GaussianSpec([1.0], 0.5, neural_box)
        reference = evaluate_loss(sample_distribution(spec, 10 ** 6, seed=999), small_net, 10.0, 8)
        sizes = [100, 1000, 10000]
        rms = []
        for n in sizes:
            errs = [loss_jn(sample_distribution(spec, n, seed=s), small_net, 10.0, 8).j - reference for s in range(10)]
            rms.append(math.sqrt(np.mean(np.square(errs))))
        assert rms[0] > rms[1] > rms[2]
        slope = np.polyfit(np.log(sizes), np.log(rms), 1)[0]
        assert -0.7 <= slope <= -0.3


class TestGradient:
    def test_matches_finite_differences(self, neural_box, rng):
        params = init_params((2, 3, 1), 10.0, neural_box, seed=7)
        batch = ParticleSet(rng.uniform(-3.0, 3.0, (5, 1)))
        alpha, n_steps, h = 10.0, 4, 1e-5
        grad = grad_loss(batch, params, alpha, n_steps).numpy()
        fd = np.empty_like(grad)
        for i in range(params.n_params):
            step = torch.zeros(params.n_params, dtype=DTYPE)
            step[i] = h
            up = loss_jn(batch, params.with_theta(params.theta + step), alpha, n_steps).j
            down = loss_jn(batch, params.with_theta(params.theta - step), alpha, n_steps).j
            fd[i] = (up - down) / (2.0 * h)
        np.testing.assert_allclose(grad, fd, rtol=1e-6, atol=1e-8)

    def test_symmetric_batch_cancels_output_bias(self, neural_box):
        batch = ParticleSet([[-1.5], [1.5], [-0.5], [0.5]])
        grad = grad_loss(batch, _zero_params(neural_box), 10.0, 8)
        assert abs(float(grad[-1])) < 1e-10

    def test_projected_step_from_the_sphere_descends(self, neural_box, rng):
        params = init_params((2, 6, 1), 100.0, neural_box, seed=5, scale=9.0)
        on_sphere = MlpParams(params.widths, params.theta / params.norm * 2.0, 2.0, neural_box)
        batch = ParticleSet(rng.uniform(-3.0, 3.0, (32, 1)))
        j0, grad = value_and_grad(batch, on_sphere, 10.0, 8)
        stepped = clip_params(on_sphere.with_theta(on_sphere.theta - 1e-4 * grad))
        assert stepped.norm <= 2.0
        assert loss_jn(batch, stepped, 10.0, 8).j < j0


class TestTraining:
    @staticmethod
    def _run(neural_box, **overrides):
        settings = dict(
            batch_size=64, alpha=10.0, clip_radius=10.0, n_steps=4,
            schedule=TrainingSchedule(epochs=3, learning_rate=0.05), seed=11,
            hidden=(4,), heldout_size=128,
        )
        settings.update(overrides)
        return train(GaussianSpec([1.0], 0.5, neural_box), **settings)

    def test_same_seed_same_history(self, neural_box):
        assert self._run(neural_box).history == self._run(neural_box).history

    def test_zero_learning_rate(self, neural_box):
        result = self._run(neural_box, schedule=TrainingSchedule(epochs=3, learning_rate=0.0))
        initial = init_params((2, 4, 1), 10.0, neural_box, seed=11)
        assert torch.equal(result.params.theta, initial.theta)
        assert len({row.j_train for row in result.history}) == 1
        assert [row.epoch for row in result.history] == [0, 1, 2, 3]

    def test_parameters_stay_in_ball(self, neural_box):
        result = self._run(neural_box, clip_radius=1.0, schedule=TrainingSchedule(epochs=5, learning_rate=5.0))
        assert all(row.param_norm <= 1.0 + 1e-12 for row in result.history)
        assert not result.aborted

    def test_rejects_bad_decay(self):
        with pytest.raises(ParameterError):
            TrainingSchedule(decay=1.5)

    def test_steps_follow_the_decayed_rate(self, neural_box):
        schedule = TrainingSchedule(epochs=2, learning_rate=0.05, decay=0.5)
        result = self._run(neural_box, schedule=schedule)
        rho0 = GaussianSpec([1.0], 0.5, neural_box)
        batch = sample_distribution(rho0, 64, 11, box=neural_box)
        theta = init_params((2, 4, 1), 10.0, neural_box, seed=11)
        for epoch in (1, 2):
            _, grad = value_and_grad(batch, theta, 10.0, 4)
            theta = clip_params(theta.with_theta(theta.theta - schedule.step_size(epoch) * grad))
        torch.testing.assert_close(result.params.theta, theta.theta, rtol=1e-12, atol=1e-14)

    @pytest.mark.slow
    def test_training_lowers_heldout_loss(self, neural_box):
        result = self._run(
            neural_box, batch_size=512, n_steps=16, hidden=(16,), heldout_size=4096,
            schedule=TrainingSchedule(epochs=100),
        )
        assert result.final.j_heldout < result.history[0].j_heldout


class TestOutputs:
    def test_checkpoint_round_trip(self, tmp_path, small_net):
        back = load_checkpoint(save_checkpoint(tmp_path / "ckpt.txt", small_net))
        assert back.widths == small_net.widths
        assert back.box == small_net.box
        assert back.seed == small_net.seed
        assert torch.equal(back.theta, small_net.theta)

    def test_checkpoint_without_parameters(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("format: otflow-checkpoint\n")
        with pytest.raises(StructuralError):
            load_checkpoint(path)

    def test_history_csv(self, tmp_path, neural_box):
        result = TestTraining._run(neural_box, schedule=TrainingSchedule(epochs=1))
        lines = write_history_csv(result.history, tmp_path / "h.csv", ["seed: 11"]).read_text().splitlines()
        assert lines[1] == "epoch,J_train,J_heldout,grad_norm,param_norm"
        assert len(lines) == 2 + 2

    def test_generate_with_still_flow_returns_latent_draws(self, neural_box):
        params = _zero_params(neural_box)
        samples = generate(100, params, n_steps=4, seed=3)
        latent = sample_distribution(GaussianSpec([0.0], 1.0, neural_box), 100, 3, box=neural_box)
        np.testing.assert_array_equal(samples.points, latent.points)

    def test_lipschitz_probe_is_finite(self, neural_box):
        report = lipschitz_probe((2, 4, 1), 5.0, neural_box, alpha=10.0, draws=5, pairs=8, n_steps=4)
        assert math.isfinite(report.max_ratio) and report.max_ratio > 0.0
        assert math.isfinite(report.max_abs)

    @pytest.mark.slow
    def test_lipschitz_ratio_is_uniform_over_draws(self, neural_box):
        first = lipschitz_probe((2, 4, 1), 5.0, neural_box, alpha=10.0, draws=1000, pairs=8, n_steps=4, seed=0)
        second = lipschitz_probe((2, 4, 1), 5.0, neural_box, alpha=10.0, draws=1000, pairs=8, n_steps=4, seed=1)
        bound = max(first.max_ratio, second.max_ratio)
        assert math.isfinite(bound)
        assert min(first.max_ratio, second.max_ratio) >= 0.5 * bound
