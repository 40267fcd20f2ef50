"""Neural velocity field, flow-map integration and the kinetic-regularized flow loss.

The velocity is v(x, t) = M(x)·u(x, t; θ) with u a tanh MLP on (x, t) and M a
polynomial mask vanishing on the box boundary. The divergence tr ∇v is
computed by forward-mode layer products, exact for the network. Gradients
with respect to θ come from reverse-mode autograd through the RK4 steps.
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml

from src.errors import DomainError, NumericalError, ParameterError, StructuralError
from src.measures import Box, GaussianSpec, ParticleSet, sample_distribution

logger = logging.getLogger(__name__)

DTYPE = torch.float64
BOX_EXIT_TOL = 1e-9
DEFAULT_STEPS = 32
EVAL_CHUNK = 8192
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class MlpParams:
    """Flat parameter vector θ and the fixed architecture it parameterizes.

    widths = (d + 1, h_1, ..., h_k, d); layer k holds W_k of shape
    (widths[k+1], widths[k]) followed by b_k, concatenated row-major.
    """
    widths: tuple
    theta: torch.Tensor
    clip_radius: float
    box: Box
    seed: int | None = None

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise StructuralError(f"Invalid layer widths {self.widths}")
        d = widths[-1]
        if widths[0] != d + 1:
            raise StructuralError(f"Input width must be d + 1 = {d + 1}, got {widths[0]}")
        if self.box.dim != d:
            raise StructuralError(f"Box dimension {self.box.dim} does not match output width {d}")
        if not self.clip_radius > 0.0:
            raise ParameterError(f"clip_radius must be positive, got {self.clip_radius}")
        theta = torch.as_tensor(self.theta, dtype=DTYPE).detach().clone().reshape(-1)
        if theta.numel() != parameter_count(widths):
            raise StructuralError(
                f"theta has {theta.numel()} entries, architecture {widths} needs {parameter_count(widths)}"
            )
        object.__setattr__(self, "widths", widths)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "clip_radius", float(self.clip_radius))

    @property
    def dim(self):
        return self.widths[-1]

    @property
    def n_params(self):
        return self.theta.numel()

    @property
    def norm(self):
        return float(torch.linalg.vector_norm(self.theta))

    def with_theta(self, theta):
        return MlpParams(self.widths, theta, self.clip_radius, self.box, self.seed)


def parameter_count(widths):
    return sum(widths[k + 1] * widths[k] + widths[k + 1] for k in range(len(widths) - 1))


def _unpack(theta, widths):
    layers = []
    offset = 0
    for k in range(len(widths) - 1):
        n_in, n_out = widths[k], widths[k + 1]
        w = theta[offset:offset + n_out * n_in].reshape(n_out, n_in)
        offset += n_out * n_in
        b = theta[offset:offset + n_out]
        offset += n_out
        layers.append((w, b))
    return layers


def clip_params(params):
    """Project θ onto the ball of radius R; identity (same object) inside the ball."""
    norm = params.norm
    radius = params.clip_radius
    if norm <= radius:
        return params
    theta = params.theta * (radius / norm)
    while float(torch.linalg.vector_norm(theta)) > radius:
        theta = theta * math.nextafter(1.0, 0.0)
    return params.with_theta(theta)


def init_params(widths, clip_radius, box, seed, scale=1.0):
    """Gaussian weights with variance scale/fan_in, zero biases, clipped into the ball."""
    widths = tuple(int(w) for w in widths)
    generator = torch.Generator().manual_seed(int(seed))
    chunks = []
    for k in range(len(widths) - 1):
        n_in, n_out = widths[k], widths[k + 1]
        w = torch.randn(n_out * n_in, generator=generator, dtype=DTYPE) * math.sqrt(scale / n_in)
        chunks.extend([w, torch.zeros(n_out, dtype=DTYPE)])
    params = MlpParams(widths, torch.cat(chunks), clip_radius, box, seed=int(seed))
    return clip_params(params)


def _box_tensors(box):
    lower = torch.as_tensor(np.asarray(box.lower), dtype=DTYPE)
    upper = torch.as_tensor(np.asarray(box.upper), dtype=DTYPE)
    return lower, upper


def _mask_and_gradient(z, box):
    lower, upper = _box_tensors(box)
    half_sq = ((upper - lower) / 2.0) ** 2
    factors = (z - lower) * (upper - z) / half_sq
    slopes = (lower + upper - 2.0 * z) / half_sq
    mask = torch.prod(factors, dim=-1)
    d = z.shape[-1]
    grad = []
    for i in range(d):
        others = [factors[:, k] for k in range(d) if k != i]
        rest = torch.prod(torch.stack(others, dim=-1), dim=-1) if others else torch.ones_like(mask)
        grad.append(rest * slopes[:, i])
    return mask, torch.stack(grad, dim=-1)


def velocity_and_divergence(z, t, params, theta=None):
    """Masked velocity v(z, t) and tr ∇_z v for a batch z of shape (B, d)."""
    theta = params.theta if theta is None else theta
    layers = _unpack(theta, params.widths)
    batch, d = z.shape
    t_col = torch.full((batch, 1), float(t), dtype=DTYPE)
    h = torch.cat([z, t_col], dim=1)
    jac = torch.cat([torch.eye(d, dtype=DTYPE), torch.zeros(1, d, dtype=DTYPE)], dim=0).expand(batch, d + 1, d)
    for w, b in layers[:-1]:
        h = torch.tanh(h @ w.T + b)
        jac = (1.0 - h ** 2).unsqueeze(-1) * torch.einsum("ij,bjk->bik", w, jac)
    w_out, b_out = layers[-1]
    u = h @ w_out.T + b_out
    jac_u = torch.einsum("ij,bjk->bik", w_out, jac)

    mask, mask_grad = _mask_and_gradient(z, params.box)
    v = mask.unsqueeze(-1) * u
    divergence = mask * torch.diagonal(jac_u, dim1=1, dim2=2).sum(dim=-1) + (u * mask_grad).sum(dim=-1)
    return v, divergence


def mlp_velocity(x, t, params):
    """v(x, t) at one point (d-vector) or a batch (B, d); returns a numpy array."""
    points = np.atleast_2d(np.asarray(x, dtype=float))
    if not params.box.contains(points).all():
        raise DomainError(f"Velocity queried outside the box at {points[~params.box.contains(points)][0]}")
    with torch.no_grad():
        v, _ = velocity_and_divergence(torch.as_tensor(points, dtype=DTYPE), t, params)
    out = v.numpy()
    return out[0] if np.ndim(x) == 1 else out


@dataclass(eq=False)
class TrajectoryBatch:
    """States z, log-determinants ℓ and running kinetic integrals L at every step.

    Tensors have leading dimension n_steps + 1; they keep the autograd graph
    when θ requires grad.
    """
    initial: np.ndarray
    states: torch.Tensor
    log_dets: torch.Tensor
    kinetic: torch.Tensor
    n_steps: int
    horizon: float = 1.0
    exits: int = 0

    @property
    def final_states(self):
        return self.states[-1]

    @property
    def dim(self):
        return self.states.shape[-1]

    def __len__(self):
        return self.states.shape[1]


def _check_finite(step, *tensors):
    for tensor in tensors:
        if not torch.isfinite(tensor).all():
            raise NumericalError(f"Non-finite flow state at RK4 step {step}")


def _rk4(z0, field_fn, n_steps, t0, t1, box):
    h = (t1 - t0) / n_steps
    lower, upper = _box_tensors(box)
    z = z0
    ell = torch.zeros(z0.shape[0], dtype=DTYPE)
    kin = torch.zeros(z0.shape[0], dtype=DTYPE)
    states, log_dets, kinetic = [z], [ell], [kin]
    exits = 0

    def rhs(state, t):
        v, div = field_fn(state, t)
        return v, div, 0.5 * (v ** 2).sum(dim=-1)

    for step in range(n_steps):
        t = t0 + step * h
        k1 = rhs(z, t)
        k2 = rhs(z + 0.5 * h * k1[0], t + 0.5 * h)
        k3 = rhs(z + 0.5 * h * k2[0], t + 0.5 * h)
        k4 = rhs(z + h * k3[0], t + h)
        z = z + (h / 6.0) * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0])
        ell = ell + (h / 6.0) * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1])
        kin = kin + (abs(h) / 6.0) * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2])
        _check_finite(step + 1, z, ell, kin)

        outside = (z < lower - BOX_EXIT_TOL) | (z > upper + BOX_EXIT_TOL)
        if outside.any():
            exits += int(outside.any(dim=-1).sum())
            z = torch.clamp(z, lower, upper)
        states.append(z)
        log_dets.append(ell)
        kinetic.append(kin)

    if exits:
        logger.warning(f"{exits} state(s) left the box and were clamped")
    return torch.stack(states), torch.stack(log_dets), torch.stack(kinetic), exits


def integrate_flow(x0, params, n_steps=DEFAULT_STEPS, horizon=1.0, theta=None, velocity_fn=None):
    """RK4 on the coupled (z, ℓ, L) system from t = 0 to t = horizon.

    velocity_fn(z, t) -> (v, tr ∇v), if given, replaces the network.
    """
    if int(n_steps) < 1:
        raise ParameterError(f"n_steps must be >= 1, got {n_steps}")
    points = x0.points if isinstance(x0, ParticleSet) else np.atleast_2d(np.asarray(x0, dtype=float))
    z0 = torch.as_tensor(points, dtype=DTYPE)
    if velocity_fn is None:
        field_fn = lambda z, t: velocity_and_divergence(z, t, params, theta)  # noqa: E731
        box = params.box
    else:
        field_fn = velocity_fn
        box = params.box if params is not None else Box(points.min(axis=0) - 1e6, points.max(axis=0) + 1e6)
    states, log_dets, kinetic, exits = _rk4(z0, field_fn, int(n_steps), 0.0, float(horizon), box)
    return TrajectoryBatch(np.array(points), states, log_dets, kinetic, int(n_steps), float(horizon), exits)


@dataclass(eq=False)
class LossBreakdown:
    c_mean: float
    l_mean: float
    j: float
    alpha: float
    c_samples: np.ndarray | None = None
    l_samples: np.ndarray | None = None

    @property
    def kinetic_weight(self):
        return 2.0 / self.alpha


def _per_sample_tensors(traj):
    z_final = traj.states[-1]
    d = traj.dim
    c = -traj.log_dets[-1] + 0.5 * (z_final ** 2).sum(dim=-1) + 0.5 * d * LOG_2PI
    return c, traj.kinetic[-1]


def _kinetic_weight(alpha):
    alpha = float(alpha)
    if not alpha > 0.0:
        raise ParameterError(f"alpha must be positive, got {alpha}")
    return 2.0 / alpha


def _objective_tensor(traj, alpha):
    c, kin = _per_sample_tensors(traj)
    return c.mean() + _kinetic_weight(alpha) * kin.mean()


def loss_terms(traj, alpha, keep_samples=False):
    """C = −ℓ(x,T) + ½|z(x,T)|² + (d/2)log 2π and J = mean C + (2/α)·mean L."""
    weight = _kinetic_weight(alpha)
    c, kin = _per_sample_tensors(traj)
    c_np = c.detach().numpy()
    l_np = kin.detach().numpy()
    c_mean = float(c_np.mean())
    l_mean = float(l_np.mean())
    return LossBreakdown(
        c_mean=c_mean,
        l_mean=l_mean,
        j=c_mean + weight * l_mean,
        alpha=float(alpha),
        c_samples=c_np.copy() if keep_samples else None,
        l_samples=l_np.copy() if keep_samples else None,
    )


def _require_batch(batch):
    if len(batch) == 0:
        raise ParameterError("Loss needs a nonempty batch")


def loss_jn(batch, params, alpha, n_steps=DEFAULT_STEPS):
    """Empirical mean of the per-sample flow loss over a particle batch."""
    _require_batch(batch)
    with torch.no_grad():
        traj = integrate_flow(batch, params, n_steps)
    return loss_terms(traj, alpha)


def per_sample_loss(points, params, alpha, n_steps=DEFAULT_STEPS):
    weight = _kinetic_weight(alpha)
    with torch.no_grad():
        traj = integrate_flow(points, params, n_steps)
        c, kin = _per_sample_tensors(traj)
    return (c + weight * kin).numpy()


def log_density(points, params, n_steps=DEFAULT_STEPS):
    """log ρ_0(x) ≈ log N(z(x,T); 0, I) + ℓ(x,T)."""
    with torch.no_grad():
        traj = integrate_flow(points, params, n_steps)
        c, _ = _per_sample_tensors(traj)
    return (-c).numpy()


def value_and_grad(batch, params, alpha, n_steps=DEFAULT_STEPS):
    _require_batch(batch)
    theta = params.theta.clone().requires_grad_(True)
    traj = integrate_flow(batch, params, n_steps, theta=theta)
    objective = _objective_tensor(traj, alpha)
    (grad,) = torch.autograd.grad(objective, theta)
    return float(objective.detach()), grad.detach()


def grad_loss(batch, params, alpha, n_steps=DEFAULT_STEPS):
    """Gradient of the discrete loss_jn with respect to the flat θ."""
    return value_and_grad(batch, params, alpha, n_steps)[1]


def evaluate_loss(points, params, alpha, n_steps=DEFAULT_STEPS, chunk=EVAL_CHUNK):
    """J over a large set, integrated in chunks; equals loss_jn up to summation order."""
    pts = points.points if isinstance(points, ParticleSet) else np.atleast_2d(points)
    total = 0.0
    for start in range(0, len(pts), chunk):
        total += float(per_sample_loss(pts[start:start + chunk], params, alpha, n_steps).sum())
    return total / len(pts)


def generate(n, params, n_steps=DEFAULT_STEPS, seed=0, horizon=1.0):
    """Draw from the box-truncated standard normal and run the flow backward to t = 0."""
    d = params.dim
    spec = GaussianSpec(np.zeros(d), 1.0, params.box)
    latent = sample_distribution(spec, n, seed, box=params.box)
    z_final = torch.as_tensor(latent.points, dtype=DTYPE)
    with torch.no_grad():
        states, _, _, _ = _rk4(
            z_final,
            lambda z, t: velocity_and_divergence(z, t, params),
            int(n_steps),
            float(horizon),
            0.0,
            params.box,
        )
    return ParticleSet(states[-1].numpy(), seed=seed, box=params.box)


@dataclass(frozen=True)
class LipschitzReport:
    max_ratio: float
    max_abs: float
    draws: int
    pairs: int


def _random_in_ball(generator, n, radius):
    direction = torch.randn(n, generator=generator, dtype=DTYPE)
    direction = direction / torch.linalg.vector_norm(direction)
    r = radius * float(torch.rand(1, generator=generator, dtype=DTYPE)) ** (1.0 / n)
    return direction * r


def lipschitz_probe(widths, clip_radius, box, alpha, draws=100, pairs=32, n_steps=8, seed=0):
    """Largest |F_v(x) − F_v(y)|/|x − y| and |F_v| seen over random θ in the clipping ball."""
    generator = torch.Generator().manual_seed(int(seed))
    rng = np.random.default_rng(seed)
    lower, upper = np.asarray(box.lower), np.asarray(box.upper)
    d = box.dim
    n = parameter_count(tuple(widths))
    max_ratio = 0.0
    max_abs = 0.0
    for _ in range(int(draws)):
        params = MlpParams(tuple(widths), _random_in_ball(generator, n, clip_radius), clip_radius, box)
        x = lower + (upper - lower) * rng.random((pairs, d))
        y = lower + (upper - lower) * rng.random((pairs, d))
        values = per_sample_loss(np.vstack([x, y]), params, alpha, n_steps)
        fx, fy = values[:pairs], values[pairs:]
        dist = np.linalg.norm(x - y, axis=1)
        keep = dist > 1e-12
        max_ratio = max(max_ratio, float(np.max(np.abs(fx - fy)[keep] / dist[keep])))
        max_abs = max(max_abs, float(np.max(np.abs(values))))
    logger.info(f"Lipschitz probe over {draws} draws: ratio <= {max_ratio:.4g}, |F| <= {max_abs:.4g}")
    return LipschitzReport(max_ratio, max_abs, int(draws), int(pairs))


# --- training -------------------------------------------------------------

@dataclass(frozen=True)
class TrainingSchedule:
    epochs: int = 200
    learning_rate: float = 0.05
    decay: float = 0.995

    def __post_init__(self):
        if int(self.epochs) < 0:
            raise ParameterError(f"epochs must be >= 0, got {self.epochs}")
        if not self.learning_rate >= 0.0:
            raise ParameterError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0.0 < self.decay <= 1.0:
            raise ParameterError(f"decay must lie in (0, 1], got {self.decay}")

    def step_size(self, epoch):
        return self.learning_rate * self.decay ** (epoch - 1)


@dataclass(frozen=True)
class HistoryEntry:
    epoch: int
    j_train: float
    j_heldout: float
    grad_norm: float
    param_norm: float


@dataclass(eq=False)
class TrainResult:
    params: MlpParams
    history: list = field(default_factory=list)
    aborted: bool = False
    reason: str | None = None

    @property
    def final(self):
        return self.history[-1] if self.history else None


def train(rho0, batch_size, alpha, clip_radius, n_steps, schedule, seed,
          hidden=(16,), heldout=None, heldout_size=4096, init=None):
    """Full-batch projected gradient descent on J_N over a batch drawn once from rho0.

    torch.optim.SGD takes the step and ExponentialLR decays the rate by
    schedule.decay per epoch; θ is projected back onto the clipping ball
    after every step.

    The history has one row per epoch, row 0 being the initial parameters.
    A non-finite loss stops training and keeps the last finite parameters.
    """
    box = rho0.box
    d = box.dim
    batch = sample_distribution(rho0, int(batch_size), seed, box=box)
    if heldout is None:
        heldout = sample_distribution(rho0, int(heldout_size), seed + 1, box=box)
    params = init if init is not None else init_params((d + 1, *hidden, d), clip_radius, box, seed)

    history = []

    def evaluate(current):
        j_train, grad = value_and_grad(batch, current, alpha, n_steps)
        j_heldout = evaluate_loss(heldout, current, alpha, n_steps) if math.isfinite(j_train) else math.nan
        return j_train, j_heldout, grad

    try:
        j_train, j_heldout, grad = evaluate(params)
    except NumericalError as e:
        logger.error(f"Training aborted before the first step: {e}")
        return TrainResult(params, history, aborted=True, reason=str(e))
    history.append(HistoryEntry(0, j_train, j_heldout, float(torch.linalg.vector_norm(grad)), params.norm))

    theta = torch.nn.Parameter(params.theta.detach().clone())
    optimizer = torch.optim.SGD([theta], lr=schedule.learning_rate)
    scheduler = torch.optim.lr_scheduler.ExponentialLR(optimizer, gamma=schedule.decay)

    for epoch in range(1, int(schedule.epochs) + 1):
        theta.grad = grad.detach().clone()
        optimizer.step()
        scheduler.step()
        candidate = clip_params(params.with_theta(theta.detach().clone()))
        with torch.no_grad():
            theta.copy_(candidate.theta)
        try:
            j_train, j_heldout, next_grad = evaluate(candidate)
        except NumericalError as e:
            logger.error(f"Training aborted at epoch {epoch}: {e}")
            return TrainResult(params, history, aborted=True, reason=str(e))
        if not (math.isfinite(j_train) and math.isfinite(j_heldout)):
            logger.error(f"Training aborted at epoch {epoch}: non-finite loss {j_train}")
            return TrainResult(params, history, aborted=True, reason=f"non-finite loss at epoch {epoch}")
        params, grad = candidate, next_grad
        history.append(HistoryEntry(epoch, j_train, j_heldout, float(torch.linalg.vector_norm(grad)), params.norm))
        if epoch % 50 == 0:
            logger.debug(f"epoch {epoch}: J_train={j_train:.6g} J_heldout={j_heldout:.6g}")

    logger.info(f"Training finished: J_train={history[-1].j_train:.6g}, J_heldout={history[-1].j_heldout:.6g}")
    return TrainResult(params, history)


def write_history_csv(history, path, comments=()):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        for line in comments:
            f.write(f"# {line}\n")
        writer = csv.writer(f)
        writer.writerow(["epoch", "J_train", "J_heldout", "grad_norm", "param_norm"])
        for row in history:
            writer.writerow([row.epoch, repr(row.j_train), repr(row.j_heldout), repr(row.grad_norm), repr(row.param_norm)])
    return path


# --- checkpoints ----------------------------------------------------------

CHECKPOINT_SEPARATOR = "---"


def save_checkpoint(path, params):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": "otflow-checkpoint",
        "widths": list(params.widths),
        "clip_radius": params.clip_radius,
        "seed": params.seed,
        "box_lower": [float(v) for v in params.box.lower],
        "box_upper": [float(v) for v in params.box.upper],
        "n_params": params.n_params,
    }
    with open(path, "w") as f:
        yaml.safe_dump(header, f, sort_keys=True)
        f.write(CHECKPOINT_SEPARATOR + "\n")
        for value in params.theta.tolist():
            f.write(f"{value!r}\n")
    return path


def load_checkpoint(path):
    path = Path(path)
    text = path.read_text()
    head, sep, body = text.partition(f"\n{CHECKPOINT_SEPARATOR}\n")
    if not sep:
        raise StructuralError(f"Checkpoint {path} has no parameter section")
    header = yaml.safe_load(head)
    if not isinstance(header, dict) or header.get("format") != "otflow-checkpoint":
        raise StructuralError(f"{path} is not a flow checkpoint")
    values = [float(line) for line in body.split() if line]
    if len(values) != header["n_params"]:
        raise StructuralError(f"Checkpoint {path} lists {len(values)} parameters, header says {header['n_params']}")
    box = Box(header["box_lower"], header["box_upper"])
    return MlpParams(tuple(header["widths"]), torch.tensor(values, dtype=DTYPE), header["clip_radius"], box, header.get("seed"))
