"""Grids, density and momentum fields, Gaussian specifications and sampling.

Every constructor in this module validates its invariants, so a DensitySlice
or DensityField that exists has nonnegative values and unit mass per slice.
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import norm

from src.errors import DomainError, MeasureError, StructuralError

logger = logging.getLogger(__name__)

MASS_TOL = 1e-8
TRUNCATION_MIN_MASS = 0.99
MAX_REJECTION_ROUNDS = 10_000


def _frozen(array, dtype=float):
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Box:
    lower: tuple
    upper: tuple

    def __post_init__(self):
        lower = tuple(float(v) for v in np.atleast_1d(self.lower))
        upper = tuple(float(v) for v in np.atleast_1d(self.upper))
        if len(lower) != len(upper):
            raise StructuralError(f"Box corners disagree in dimension: {lower} vs {upper}")
        if any(not (b - a > 0.0) for a, b in zip(lower, upper)):
            raise StructuralError(f"Box edges must have positive length: {lower} -> {upper}")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def dim(self):
        return len(self.lower)

    @property
    def widths(self):
        return tuple(b - a for a, b in zip(self.lower, self.upper))

    @property
    def volume(self):
        return float(np.prod(self.widths))

    @property
    def center(self):
        return tuple(0.5 * (a + b) for a, b in zip(self.lower, self.upper))

    def contains(self, points, tol=0.0):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        lo = np.asarray(self.lower) - tol
        hi = np.asarray(self.upper) + tol
        return np.all((pts >= lo) & (pts <= hi), axis=1)


@dataclass(frozen=True)
class GridSpec:
    box: Box
    n_space: int
    n_time: int
    horizon: float = 1.0

    def __post_init__(self):
        if not 1 <= self.box.dim <= 3:
            raise StructuralError(f"Grid dimension must be 1, 2 or 3, got {self.box.dim}")
        if int(self.n_space) < 4:
            raise StructuralError(f"n_space must be >= 4, got {self.n_space}")
        if int(self.n_time) < 2:
            raise StructuralError(f"n_time must be >= 2, got {self.n_time}")
        if not self.horizon > 0.0:
            raise StructuralError(f"horizon must be positive, got {self.horizon}")
        object.__setattr__(self, "n_space", int(self.n_space))
        object.__setattr__(self, "n_time", int(self.n_time))
        object.__setattr__(self, "horizon", float(self.horizon))

    @classmethod
    def from_bounds(cls, lower, upper, n_space, n_time, horizon=1.0):
        return cls(Box(tuple(np.atleast_1d(lower)), tuple(np.atleast_1d(upper))), n_space, n_time, horizon)

    @property
    def dim(self):
        return self.box.dim

    @property
    def shape(self):
        return (self.n_space,) * self.dim

    @property
    def n_cells(self):
        return self.n_space ** self.dim

    @property
    def cell_widths(self):
        return tuple(w / self.n_space for w in self.box.widths)

    @property
    def cell_volume(self):
        return float(np.prod(self.cell_widths))

    @property
    def dt(self):
        return self.horizon / self.n_time

    @property
    def time_nodes(self):
        return np.linspace(0.0, self.horizon, self.n_time + 1)

    def edges(self, axis):
        return np.linspace(self.box.lower[axis], self.box.upper[axis], self.n_space + 1)

    def centers(self, axis):
        e = self.edges(axis)
        return 0.5 * (e[:-1] + e[1:])

    def cell_centers(self):
        """(n_cells, dim) array of centers in row-major cell order."""
        mesh = np.meshgrid(*[self.centers(k) for k in range(self.dim)], indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def face_shape(self, axis):
        shape = list(self.shape)
        shape[axis] += 1
        return tuple(shape)

    def same_as(self, other):
        return (
            self.box == other.box
            and self.n_space == other.n_space
            and self.n_time == other.n_time
            and math.isclose(self.horizon, other.horizon)
        )


def require_same_grid(*grids):
    first = grids[0]
    for other in grids[1:]:
        if not first.same_as(other):
            raise StructuralError(f"Grid mismatch: {first} vs {other}")
    return first


def _check_density(values, grid, mass_tol, what):
    if not np.all(np.isfinite(values)):
        raise StructuralError(f"{what} has non-finite values")
    if np.any(values < 0.0):
        raise StructuralError(f"{what} has negative values (min {values.min():.3e})")
    mass = float(values.sum()) * grid.cell_volume
    if abs(mass - 1.0) > mass_tol:
        raise StructuralError(f"{what} does not have unit mass: {mass!r}")


@dataclass(frozen=True, eq=False)
class DensitySlice:
    """Single-time density on the cells of a grid."""

    grid: GridSpec
    values: np.ndarray
    time_index: int | None = None
    mass_tol: float = field(default=MASS_TOL, compare=False, repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != self.grid.shape:
            values = values.reshape(self.grid.shape)
        _check_density(values, self.grid, self.mass_tol, "Density slice")
        object.__setattr__(self, "values", _frozen(values))

    @property
    def mass(self):
        return float(self.values.sum()) * self.grid.cell_volume

    def mean(self):
        """Mean position of the slice, treating each cell as its center."""
        weights = self.values.ravel() * self.grid.cell_volume
        return weights @ self.grid.cell_centers()

    def l1_distance(self, other):
        require_same_grid(self.grid, other.grid)
        return float(np.abs(self.values - other.values).sum()) * self.grid.cell_volume

    @classmethod
    def uniform(cls, grid):
        return cls(grid, np.full(grid.shape, 1.0 / grid.box.volume))


@dataclass(frozen=True, eq=False)
class DensityField:
    """Space-time density: one slice per time node, shape (n_time + 1, *grid.shape)."""

    grid: GridSpec
    values: np.ndarray
    mass_tol: float = field(default=MASS_TOL, compare=False, repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        expected = (self.grid.n_time + 1,) + self.grid.shape
        if values.shape != expected:
            raise StructuralError(f"Density field shape {values.shape} != {expected}")
        for k in range(values.shape[0]):
            _check_density(values[k], self.grid, self.mass_tol, f"Density field slice {k}")
        object.__setattr__(self, "values", _frozen(values))

    def slice(self, k):
        return DensitySlice(self.grid, self.values[k], time_index=k, mass_tol=self.mass_tol)

    def at_time(self, t):
        """Slice at the time node nearest to t."""
        k = int(round(t / self.grid.dt))
        return self.slice(min(max(k, 0), self.grid.n_time))

    @classmethod
    def from_slices(cls, grid, slices):
        return cls(grid, np.stack([np.asarray(s.values) for s in slices]))

    @classmethod
    def linear_interpolation(cls, rho0, rho1):
        grid = require_same_grid(rho0.grid, rho1.grid)
        s = np.linspace(0.0, 1.0, grid.n_time + 1).reshape((-1,) + (1,) * grid.dim)
        return cls(grid, (1.0 - s) * rho0.values + s * rho1.values)


@dataclass(frozen=True, eq=False)
class MomentumField:
    """Staggered momentum: component k lives on faces normal to axis k.

    components[k] has shape (n_time, *grid.face_shape(k)); values are taken at
    time midpoints. The first and last face along axis k are the boundary.
    """

    grid: GridSpec
    components: tuple

    def __post_init__(self):
        comps = tuple(np.asarray(c, dtype=float) for c in self.components)
        if len(comps) != self.grid.dim:
            raise StructuralError(f"Momentum needs {self.grid.dim} components, got {len(comps)}")
        for k, comp in enumerate(comps):
            expected = (self.grid.n_time,) + self.grid.face_shape(k)
            if comp.shape != expected:
                raise StructuralError(f"Momentum component {k} shape {comp.shape} != {expected}")
            if not np.all(np.isfinite(comp)):
                raise StructuralError(f"Momentum component {k} has non-finite values")
            boundary = np.take(comp, [0, -1], axis=k + 1)
            if np.any(boundary != 0.0):
                raise StructuralError(f"Momentum component {k} has nonzero normal flux on the boundary")
        object.__setattr__(self, "components", tuple(_frozen(c) for c in comps))

    @classmethod
    def zeros(cls, grid):
        return cls(grid, tuple(np.zeros((grid.n_time,) + grid.face_shape(k)) for k in range(grid.dim)))

    def centered(self):
        """Face-to-center arithmetic average, shape (n_time, *grid.shape, dim)."""
        out = [
            0.5 * (np.take(c, np.arange(0, self.grid.n_space), axis=k + 1)
                   + np.take(c, np.arange(1, self.grid.n_space + 1), axis=k + 1))
            for k, c in enumerate(self.components)
        ]
        return np.stack(out, axis=-1)


@dataclass(frozen=True, eq=False)
class ParticleSet:
    points: np.ndarray
    weights: np.ndarray | None = None
    seed: int | None = None
    box: Box | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if points.shape[0] == 0:
            raise StructuralError("ParticleSet needs at least one point")
        if self.weights is None:
            weights = np.full(points.shape[0], 1.0 / points.shape[0])
        else:
            weights = np.asarray(self.weights, dtype=float).ravel()
        if weights.shape[0] != points.shape[0]:
            raise StructuralError(f"{weights.shape[0]} weights for {points.shape[0]} points")
        if np.any(weights < 0.0) or abs(weights.sum() - 1.0) > 1e-12:
            raise StructuralError(f"Particle weights must be nonnegative and sum to 1 (sum {weights.sum()!r})")
        if not np.all(np.isfinite(points)):
            raise StructuralError("ParticleSet has non-finite coordinates")
        if self.box is not None:
            if self.box.dim != points.shape[1]:
                raise StructuralError(f"Box dimension {self.box.dim} != point dimension {points.shape[1]}")
            if not np.all(self.box.contains(points)):
                raise DomainError("ParticleSet has points outside its box")
        object.__setattr__(self, "points", _frozen(points))
        object.__setattr__(self, "weights", _frozen(weights))
        if self.labels is not None:
            object.__setattr__(self, "labels", _frozen(self.labels, dtype=int))

    @property
    def dim(self):
        return self.points.shape[1]

    def __len__(self):
        return self.points.shape[0]

    @property
    def is_uniform(self):
        return bool(np.all(self.weights == self.weights[0]))


@dataclass(frozen=True)
class GaussianSpec:
    """Isotropic Gaussian truncated to a box and renormalized there."""

    mean: tuple
    stddev: float
    box: Box

    def __post_init__(self):
        mean = tuple(float(v) for v in np.atleast_1d(self.mean))
        if len(mean) != self.box.dim:
            raise MeasureError(f"Gaussian mean {mean} does not match box dimension {self.box.dim}")
        if not self.stddev > 0.0:
            raise MeasureError(f"Gaussian stddev must be positive: {self}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "stddev", float(self.stddev))
        self.check_truncation(self.box)

    @property
    def dim(self):
        return len(self.mean)

    def box_mass(self, box):
        """Untruncated probability of the box."""
        mass = 1.0
        for mu, a, b in zip(self.mean, box.lower, box.upper):
            mass *= norm.cdf((b - mu) / self.stddev) - norm.cdf((a - mu) / self.stddev)
        return float(mass)

    def check_truncation(self, box):
        mass = self.box_mass(box)
        if mass < TRUNCATION_MIN_MASS:
            raise MeasureError(
                f"Truncation loses {100.0 * (1.0 - mass):.3f}% of the mass (limit 1%) for {self}"
            )
        return mass


@dataclass(frozen=True)
class MixtureSpec:
    components: tuple
    weights: tuple

    def __post_init__(self):
        comps = tuple(self.components)
        weights = tuple(float(w) for w in self.weights)
        if not comps or len(comps) != len(weights):
            raise MeasureError(f"Mixture needs one weight per component: {len(comps)} vs {len(weights)}")
        if any(w < 0.0 for w in weights) or abs(sum(weights) - 1.0) > 1e-12:
            raise MeasureError(f"Mixture weights must be nonnegative and sum to 1: {weights}")
        if any(c.box != comps[0].box for c in comps):
            raise MeasureError("Mixture components must share one truncation box")
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "weights", weights)

    @property
    def box(self):
        return self.components[0].box

    @property
    def dim(self):
        return self.components[0].dim


def _components(spec):
    if isinstance(spec, MixtureSpec):
        return spec.components, spec.weights
    return (spec,), (1.0,)


def _cell_masses_1d(edges, mu, sigma):
    z = (edges - mu) / sigma
    lo, hi = z[:-1], z[1:]
    # sf on the right tail keeps mirrored cells bitwise symmetric
    return np.where(lo > 0.0, norm.sf(lo) - norm.sf(hi), norm.cdf(hi) - norm.cdf(lo))


def discretize_gaussian(spec, grid, time_index=None):
    """Cell-averaged truncated Gaussian (or mixture), renormalized to unit mass."""
    comps, weights = _components(spec)
    if comps[0].dim != grid.dim:
        raise StructuralError(f"Spec dimension {comps[0].dim} != grid dimension {grid.dim}")
    total = np.zeros(grid.shape)
    for comp, w in zip(comps, weights):
        comp.check_truncation(grid.box)
        masses = [_cell_masses_1d(grid.edges(k), comp.mean[k], comp.stddev) for k in range(grid.dim)]
        cell_mass = masses[0]
        for extra in masses[1:]:
            cell_mass = np.multiply.outer(cell_mass, extra)
        total += w * cell_mass / cell_mass.sum()
    values = total / (total.sum() * grid.cell_volume)
    return DensitySlice(grid, values, time_index=time_index)


def _sample_truncated(rng, spec, n, box):
    lo, hi = np.asarray(box.lower), np.asarray(box.upper)
    out = np.empty((n, spec.dim))
    filled = 0
    rounds = 0
    while filled < n:
        need = n - filled
        draw = rng.normal(loc=spec.mean, scale=spec.stddev, size=(need, spec.dim))
        keep = draw[np.all((draw >= lo) & (draw <= hi), axis=1)]
        out[filled:filled + keep.shape[0]] = keep
        filled += keep.shape[0]
        rounds += 1
        if rounds > MAX_REJECTION_ROUNDS:
            raise MeasureError(f"Rejection sampling stalled for {spec}")
    return out


def sample_distribution(spec, n, seed, box=None):
    """Draw n points from a truncated Gaussian or mixture; pure in (spec, n, seed)."""
    if int(n) < 1:
        raise StructuralError(f"Sample count must be >= 1, got {n}")
    n = int(n)
    comps, weights = _components(spec)
    box = box or comps[0].box
    for comp in comps:
        comp.check_truncation(box)

    rng = np.random.default_rng(seed)
    labels = rng.choice(len(comps), size=n, p=np.asarray(weights)) if len(comps) > 1 else np.zeros(n, dtype=int)
    points = np.empty((n, comps[0].dim))
    for c, comp in enumerate(comps):
        idx = np.flatnonzero(labels == c)
        if idx.size:
            points[idx] = _sample_truncated(rng, comp, idx.size, box)
    return ParticleSet(points, seed=seed, box=box, labels=labels)


def empirical_histogram(ps, grid):
    """Nearest-cell binning of weighted particles, divided by the cell volume."""
    if ps.dim != grid.dim:
        raise StructuralError(f"Particle dimension {ps.dim} != grid dimension {grid.dim}")
    if not np.all(grid.box.contains(ps.points)):
        raise DomainError("empirical_histogram got points outside the grid box")
    counts, _ = np.histogramdd(
        ps.points, bins=[grid.edges(k) for k in range(grid.dim)], weights=ps.weights
    )
    return DensitySlice(grid, counts / grid.cell_volume)


# --- serialization -------------------------------------------------------

def _fmt(v):
    return format(float(v), ".17g")


def save_field(path, density, fmt=None, comments=()):
    """Write a DensitySlice or DensityField as CSV or .npz (see docs/FORMATS.md)."""
    path = Path(path)
    fmt = fmt or ("npz" if path.suffix == ".npz" else "csv")
    grid = density.grid
    values = np.asarray(density.values)
    slices = values.reshape(1, -1) if isinstance(density, DensitySlice) else values.reshape(values.shape[0], -1)
    path.parent.mkdir(parents=True, exist_ok=True)

    if fmt == "npz":
        np.savez(
            path,
            values=slices,
            lower=np.asarray(grid.box.lower),
            upper=np.asarray(grid.box.upper),
            n_space=grid.n_space,
            n_time=grid.n_time,
            horizon=grid.horizon,
        )
        return path

    with open(path, "w", newline="") as f:
        for line in comments:
            f.write(f"# {line}\n")
        writer = csv.writer(f)
        writer.writerow(["dim", "n_space", "n_time", "horizon"])
        writer.writerow([grid.dim, grid.n_space, grid.n_time, _fmt(grid.horizon)])
        writer.writerow(["box"] + [_fmt(v) for v in grid.box.lower + grid.box.upper])
        for row in slices:
            writer.writerow([_fmt(v) for v in row])
    return path


def load_field(path):
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path) as data:
            grid = GridSpec(
                Box(tuple(data["lower"]), tuple(data["upper"])),
                int(data["n_space"]), int(data["n_time"]), float(data["horizon"]),
            )
            slices = np.array(data["values"])
    else:
        with open(path, newline="") as f:
            rows = [row for row in csv.reader(f) if row and not row[0].startswith("#")]
        header, meta, box_row = rows[0], rows[1], rows[2]
        if header != ["dim", "n_space", "n_time", "horizon"] or box_row[0] != "box":
            raise StructuralError(f"{path} is not a field CSV")
        dim = int(meta[0])
        bounds = [float(v) for v in box_row[1:]]
        grid = GridSpec(Box(tuple(bounds[:dim]), tuple(bounds[dim:])), int(meta[1]), int(meta[2]), float(meta[3]))
        slices = np.array([[float(v) for v in row] for row in rows[3:]])

    if slices.shape[0] == 1:
        return DensitySlice(grid, slices[0].reshape(grid.shape))
    return DensityField(grid, slices.reshape((slices.shape[0],) + grid.shape))


def save_particles(path, ps, comments=()):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        for line in comments:
            f.write(f"# {line}\n")
        writer = csv.writer(f)
        writer.writerow([f"x{k + 1}" for k in range(ps.dim)] + ["weight"])
        for point, weight in zip(ps.points, ps.weights):
            writer.writerow([_fmt(v) for v in point] + [_fmt(weight)])
    return path


def load_particles(path, box=None):
    with open(path, newline="") as f:
        rows = [row for row in csv.reader(f) if row and not row[0].startswith("#")]
    if not rows or rows[0][-1] != "weight":
        raise StructuralError(f"{path} is not a particle CSV")
    data = np.array([[float(v) for v in row] for row in rows[1:]])
    weights = data[:, -1]
    # tolerate text round-off in the stored weights
    weights = weights / weights.sum()
    return ParticleSet(data[:, :-1], weights=weights, box=box)
