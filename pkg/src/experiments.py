"""Seeded studies: alpha sweep, large-data limit, empirical W1 rates, straightness.

Seed splitting rule: trial j at sweep index i draws from
numpy.random.SeedSequence(master_seed, spawn_key=(i, j)); studies that need
more streams append further keys. Each study is a pure function of its
StudyConfig, and rows are written in submission order whatever the thread
count.
"""

import csv
import logging
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import linregress

from src import __version__
from src.errors import ConfigError, NumericalError, OtflowError
from src.grid_solver import PdhgParams, solve_otflow_grid
from src.measures import (
    Box,
    GaussianSpec,
    GridSpec,
    MixtureSpec,
    discretize_gaussian,
    sample_distribution,
)
from src.neural_flow import DEFAULT_STEPS, TrainingSchedule, integrate_flow, train
from src.transport_oracles import gaussian_w2_closed_form, w1_empirical, w2_squared_1d
from src.utils import parse_extended

logger = logging.getLogger(__name__)

STUDY_KINDS = ("alpha_sweep", "data_limit", "w1_rate", "straightness")
INTERIOR_TIMES = (0.25, 0.5, 0.75)
HELDOUT_KEY = 2 ** 20
CHORD_EPS = 1e-12

METRIC_COLUMNS = {
    "alpha_sweep": [
        "action", "w2_estimate", "kl", "terminal_gap", "w2_oracle", "oracle_gap", "inf_gap",
        "l1_t25", "l1_t50", "l1_t75", "residual", "iterations",
    ],
    "data_limit": ["j_train", "j_heldout", "gap", "epochs"],
    "w1_rate": ["dim", "w1"],
    "straightness": ["straightness", "j_train", "j_heldout"],
}
BASE_COLUMNS = ["study", "x", "trial", "seed", "oracle", "status"]


# --- problem builders -------------------------------------------------------

def _require(section, key, where):
    if key not in section:
        raise ConfigError(f"Missing required configuration key: {where}.{key}", key=f"{where}.{key}")
    return section[key]


def build_box(section, where):
    return Box(_require(section, "lower", where), _require(section, "upper", where))


def build_measure(section, box, where):
    """GaussianSpec from {mean, stddev}, or MixtureSpec from {components, weights}."""
    if "components" in section:
        comps = tuple(build_measure(c, box, f"{where}.components") for c in section["components"])
        return MixtureSpec(comps, tuple(section.get("weights", [1.0 / len(comps)] * len(comps))))
    return GaussianSpec(_require(section, "mean", where), float(_require(section, "stddev", where)), box)


@dataclass(frozen=True, eq=False)
class GridProblem:
    grid: GridSpec
    spec0: object
    spec1: object
    rho0: object
    rho1: object

    @property
    def oracle(self):
        if self.grid.dim == 1:
            return "quantile"
        if isinstance(self.spec0, GaussianSpec) and isinstance(self.spec1, GaussianSpec):
            return "gaussian_closed_form"
        return "none"

    def oracle_value(self):
        if self.oracle == "quantile":
            return w2_squared_1d(self.rho0, self.rho1)
        if self.oracle == "gaussian_closed_form":
            return gaussian_w2_closed_form(self.spec0, self.spec1)
        return math.nan


def build_grid_problem(section, where="grid_problem"):
    grid_section = _require(section, "grid", where)
    box = build_box(grid_section, f"{where}.grid")
    grid = GridSpec(
        box,
        int(_require(grid_section, "n_space", f"{where}.grid")),
        int(_require(grid_section, "n_time", f"{where}.grid")),
        float(grid_section.get("horizon", 1.0)),
    )
    spec0 = build_measure(_require(section, "rho0", where), box, f"{where}.rho0")
    spec1 = build_measure(_require(section, "rho1", where), box, f"{where}.rho1")
    return GridProblem(grid, spec0, spec1, discretize_gaussian(spec0, grid, 0), discretize_gaussian(spec1, grid, grid.n_time))


def build_pdhg_params(section, alpha, seed=0):
    terminal_tol = section.get("terminal_tol")
    return PdhgParams(
        alpha=alpha,
        max_iters=int(section.get("max_iters", 50000)),
        residual_tol=float(section.get("residual_tol", 1e-5)),
        primal_step=section.get("primal_step"),
        dual_step=section.get("dual_step"),
        preconditioner=str(section.get("preconditioner", "poisson")),
        terminal_tol=None if terminal_tol is None else float(terminal_tol),
        log_interval=int(section.get("log_interval", 10)),
        power_iterations=int(section.get("power_iterations", 50)),
        floor=float(section.get("floor", 1e-12)),
        seed=int(seed),
    )


@dataclass(frozen=True, eq=False)
class NeuralProblem:
    box: Box
    rho0: object
    hidden: tuple
    clip_radius: float
    n_steps: int
    batch_size: int
    alpha: float
    schedule: TrainingSchedule
    heldout_size: int


def build_neural_problem(problem, training, where="neural_problem"):
    box = build_box(_require(problem, "box", where), f"{where}.box")
    return NeuralProblem(
        box=box,
        rho0=build_measure(_require(problem, "rho0", where), box, f"{where}.rho0"),
        hidden=tuple(int(h) for h in problem.get("hidden", [16])),
        clip_radius=float(problem.get("clip_radius", 10.0)),
        n_steps=int(problem.get("n_steps", DEFAULT_STEPS)),
        batch_size=int(training.get("batch_size", 512)),
        alpha=parse_extended(training.get("alpha", 10.0)),
        schedule=TrainingSchedule(
            epochs=int(training.get("epochs", 200)),
            learning_rate=float(training.get("learning_rate", 0.05)),
            decay=float(training.get("decay", 0.995)),
        ),
        heldout_size=int(problem.get("heldout_size", 4096)),
    )


# --- study plumbing ---------------------------------------------------------

@dataclass(frozen=True)
class StudyConfig:
    kind: str
    problem: dict
    sweep: tuple
    trials: int
    master_seed: int
    output: str
    threads: int = 1
    training: dict = field(default_factory=dict)
    config_hash: str = ""

    def __post_init__(self):
        if self.kind not in STUDY_KINDS:
            raise ConfigError(f"Unknown study kind {self.kind!r}; expected one of {STUDY_KINDS}", key="study.kind")
        sweep = tuple(parse_extended(v) for v in self.sweep)
        if not sweep:
            raise ConfigError("study.sweep must list at least one value", key="study.sweep")
        if any(b <= a for a, b in zip(sweep, sweep[1:])):
            raise ConfigError(f"study.sweep must be strictly increasing, got {sweep}", key="study.sweep")
        if int(self.trials) < 1:
            raise ConfigError(f"study.trials must be >= 1, got {self.trials}", key="study.trials")
        object.__setattr__(self, "sweep", sweep)
        object.__setattr__(self, "trials", int(self.trials))

    @classmethod
    def from_config(cls, config, output_dir=None):
        study = config.section("study")
        kind = _require(study, "kind", "study")
        output = study.get("output", f"{kind}.csv")
        if output_dir is not None:
            output = str(Path(output_dir) / Path(output).name)
        return cls(
            kind=kind,
            problem=study.get("problem", {}) or {},
            sweep=tuple(_require(study, "sweep", "study")),
            trials=int(study.get("trials", 1)),
            master_seed=config.seed,
            output=output,
            threads=config.threads,
            training=study.get("training", {}) or {},
            config_hash=config.digest,
        )


@dataclass(eq=False)
class ReportRow:
    study: str
    x: float
    trial: int
    seed: int
    metrics: dict
    oracle: str = "none"
    feasible: bool = True
    error: str | None = None

    def as_record(self, metric_columns):
        record = {
            "study": self.study,
            "x": _fmt(self.x),
            "trial": self.trial,
            "seed": self.seed,
            "oracle": self.oracle,
            "status": "ok" if self.feasible else "infeasible",
        }
        for name in metric_columns:
            record[name] = _fmt(self.metrics.get(name)) if self.feasible else ""
        return record


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    value = float(value)
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return repr(value)


def provenance_lines(config_hash, master_seed):
    return [
        f"otflow-convergence {__version__}",
        f"config_hash: {config_hash}",
        f"master_seed: {master_seed}",
    ]


class ReportWriter:
    """Single writer for a study CSV; one flush per row so a crash leaves a valid prefix."""

    def __init__(self, path, kind, config_hash, master_seed):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.metric_columns = METRIC_COLUMNS[kind]
        self._lock = threading.Lock()
        self._file = open(self.path, "w", newline="")
        self._writer = csv.DictWriter(self._file, fieldnames=BASE_COLUMNS + self.metric_columns, lineterminator="\n")
        self._header_written = False
        self.rows_written = 0
        for line in provenance_lines(config_hash, master_seed):
            self.comment(line)

    def comment(self, text):
        with self._lock:
            self._file.write(f"# {text}\n")
            self._file.flush()

    def write(self, row):
        with self._lock:
            if not self._header_written:
                self._writer.writeheader()
                self._header_written = True
            self._writer.writerow(row.as_record(self.metric_columns))
            self._file.flush()
            self.rows_written += 1

    def close(self):
        with self._lock:
            if not self._header_written:
                self._writer.writeheader()
                self._header_written = True
            self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()


def trial_seed(master_seed, *key):
    """32-bit seed from SeedSequence(master_seed, spawn_key=key)."""
    sequence = np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in key))
    return int(sequence.generate_state(1, dtype=np.uint32)[0])


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    stderr: float


def fit_loglog_slope(ns, means):
    """Ordinary least squares of log(mean) against log(N)."""
    ns = np.asarray(ns, dtype=float)
    means = np.asarray(means, dtype=float)
    if ns.size < 2 or np.any(ns <= 0.0) or np.any(means <= 0.0):
        raise ConfigError("Slope fit needs at least two positive (N, mean) pairs", key="study.sweep")
    fit = linregress(np.log(ns), np.log(means))
    return SlopeFit(float(fit.slope), float(fit.intercept), float(fit.stderr))


def _run_trials(tasks, threads, writer=None, on_row=None):
    """Run zero-argument callables, returning (and writing) rows in submission order."""
    rows = []
    with ThreadPoolExecutor(max_workers=max(1, int(threads))) as pool:
        futures = [pool.submit(task) for task in tasks]
        for future in futures:
            row = future.result()
            rows.append(row)
            if writer is not None:
                writer.write(row)
            if on_row is not None:
                on_row(row)
    return rows


def _guarded(study, x, trial, seed, oracle, body):
    """Trial body wrapper: library failures become infeasible rows."""
    try:
        return ReportRow(study, x, trial, seed, body(), oracle=oracle)
    except OtflowError as e:
        logger.error(f"{study} trial x={x} #{trial} failed: {e}")
        return ReportRow(study, x, trial, seed, {}, oracle=oracle, feasible=False, error=str(e))


# --- alpha sweep ------------------------------------------------------------

def _reference_solve(problem, solver_section, master_seed):
    """The α = inf run the sweep compares against; None when it fails."""
    try:
        return solve_otflow_grid(
            problem.rho0, problem.rho1, problem.grid, build_pdhg_params(solver_section, math.inf, master_seed)
        )
    except OtflowError as e:
        logger.error(f"alpha_sweep reference alpha=inf failed; inf_gap and l1_* left blank: {e}")
        return None, e


def run_alpha_sweep(cfg, writer=None, on_row=None):
    problem = build_grid_problem(cfg.problem, "study.problem")
    solver_section = cfg.problem.get("solver", {}) or {}
    oracle = problem.oracle
    w2 = problem.oracle_value()

    reference_vars, reference = _reference_solve(problem, solver_section, cfg.master_seed)
    if reference_vars is None:
        reference_slices = None
        summary = f"reference alpha=inf: failed: {reference}"
    else:
        reference_slices = [reference_vars.rho.at_time(t) for t in INTERIOR_TIMES]
        summary = f"reference alpha=inf: action={reference.action!r} converged={reference.converged}"
    if writer is not None:
        writer.comment(summary)
        writer.comment(f"oracle {oracle}: w2_squared={w2!r}")

    def make_task(i, j, alpha):
        seed = trial_seed(cfg.master_seed, i, j)

        def body():
            params = build_pdhg_params(solver_section, alpha, seed)
            solution, report = solve_otflow_grid(problem.rho0, problem.rho1, problem.grid, params)
            if reference_slices is None:
                l1 = [None] * len(INTERIOR_TIMES)
                inf_gap = None
            else:
                l1 = [solution.rho.at_time(t).l1_distance(ref) for t, ref in zip(INTERIOR_TIMES, reference_slices)]
                inf_gap = abs(report.action - reference.action)
            return {
                "action": report.action,
                "w2_estimate": report.w2_estimate,
                "kl": report.kl,
                "terminal_gap": report.terminal_gap,
                "w2_oracle": w2,
                "oracle_gap": abs(report.w2_estimate - w2) if math.isfinite(w2) else math.nan,
                "inf_gap": inf_gap,
                "l1_t25": l1[0],
                "l1_t50": l1[1],
                "l1_t75": l1[2],
                "residual": report.residual,
                "iterations": report.iterations,
            }

        return lambda: _guarded(cfg.kind, alpha, j, seed, oracle, body)

    tasks = [make_task(i, j, alpha) for i, alpha in enumerate(cfg.sweep) for j in range(cfg.trials)]
    return _run_trials(tasks, cfg.threads, writer, on_row)


# --- large-data limit -------------------------------------------------------

def _heldout_set(cfg, problem):
    return sample_distribution(problem.rho0, problem.heldout_size, trial_seed(cfg.master_seed, HELDOUT_KEY), box=problem.box)


def run_data_limit(cfg, writer=None, on_row=None):
    problem = build_neural_problem(cfg.problem, cfg.training, "study.problem")
    heldout = _heldout_set(cfg, problem)

    def make_task(i, j, n):
        seed = trial_seed(cfg.master_seed, i, j)

        def body():
            result = train(
                problem.rho0, int(n), problem.alpha, problem.clip_radius, problem.n_steps,
                problem.schedule, seed, hidden=problem.hidden, heldout=heldout,
            )
            if result.aborted:
                raise_abort(result)
            final = result.final
            return {
                "j_train": final.j_train,
                "j_heldout": final.j_heldout,
                "gap": abs(final.j_train - final.j_heldout),
                "epochs": final.epoch,
            }

        return lambda: _guarded(cfg.kind, n, j, seed, "heldout", body)

    tasks = [make_task(i, j, n) for i, n in enumerate(cfg.sweep) for j in range(cfg.trials)]
    rows = _run_trials(tasks, cfg.threads, writer, on_row)
    if writer is not None:
        for n, median in median_by_x(rows, "gap"):
            writer.comment(f"median gap N={_fmt(n)}: {median!r}")
    return rows


def raise_abort(result):
    raise NumericalError(f"training aborted: {result.reason}")


def median_by_x(rows, metric):
    out = []
    for x in sorted({r.x for r in rows}):
        values = [r.metrics[metric] for r in rows if r.x == x and r.feasible]
        out.append((x, float(np.median(values)) if values else math.nan))
    return out


# --- empirical W1 rates -----------------------------------------------------

@dataclass(eq=False)
class RateSummary:
    dim: int
    fit: SlopeFit
    means: list
    expected: float
    note: str = ""


def run_w1_rate(cfg, writer=None, on_row=None):
    """Rows per (d, N, trial) plus one OLS slope per dimension.

    Two-sample surrogate: W1 between two independent equal-size draws, which
    shares the rate order of the sample-to-law distance.
    """
    dims = [int(d) for d in cfg.problem.get("dims", [1, 2, 3])]
    mean = float(cfg.problem.get("mean", 0.5))
    stddev = float(cfg.problem.get("stddev", 0.15))
    if writer is not None:
        writer.comment("estimator: two-sample surrogate W1(sample, independent sample)")

    tasks = []
    for d in dims:
        box = Box([0.0] * d, [1.0] * d)
        spec = GaussianSpec([mean] * d, stddev, box)
        for i, n in enumerate(cfg.sweep):
            for j in range(cfg.trials):
                tasks.append(_w1_task(cfg, spec, d, i, j, int(n)))
    rows = _run_trials(tasks, cfg.threads, writer, on_row)

    summaries = []
    for d in dims:
        cells = [r for r in rows if r.metrics.get("dim") == d and r.feasible]
        ns = sorted({r.x for r in cells})
        means = [float(np.mean([r.metrics["w1"] for r in cells if r.x == n])) for n in ns]
        fit = fit_loglog_slope(ns, means)
        note = ""
        if d == 1:
            note = "d=1: CLT-limited rate -1/2; the -1/d bound would predict -1"
        summary = RateSummary(d, fit, list(zip(ns, means)), -1.0 / max(d, 2), note)
        summaries.append(summary)
        logger.info(f"W1 rate d={d}: slope {fit.slope:.4f} +/- {fit.stderr:.4f}")
        if writer is not None:
            writer.comment(
                f"slope d={d}: {fit.slope!r} stderr={fit.stderr!r} intercept={fit.intercept!r} "
                f"expected={summary.expected!r}" + (f" note: {note}" if note else "")
            )
    return rows, summaries


def _w1_task(cfg, spec, d, i, j, n):
    seed = trial_seed(cfg.master_seed, d, i, j)

    def body():
        sample = sample_distribution(spec, n, trial_seed(seed, 0))
        reference = sample_distribution(spec, n, trial_seed(seed, 1))
        return {"dim": d, "w1": w1_empirical(sample, reference)}

    return lambda: _guarded(cfg.kind, n, j, seed, "two_sample", body)


# --- straightness -----------------------------------------------------------

def straightness_metric(traj):
    """Mean over samples of max_k dist(z_k, chord z_0 -> z_T) / (|chord| + 1e-12)."""
    states = traj.states.detach().numpy() if hasattr(traj.states, "detach") else np.asarray(traj.states)
    start, end = states[0], states[-1]
    chord = end - start
    length_sq = np.sum(chord ** 2, axis=-1)
    offsets = states - start
    s = np.where(length_sq > 0.0, np.sum(offsets * chord, axis=-1) / np.where(length_sq > 0.0, length_sq, 1.0), 0.0)
    s = np.clip(s, 0.0, 1.0)
    distance = np.linalg.norm(offsets - s[..., None] * chord, axis=-1)
    return float(np.mean(distance.max(axis=0) / (np.sqrt(length_sq) + CHORD_EPS)))


def run_straightness(cfg, writer=None, on_row=None):
    problem = build_neural_problem(cfg.problem, cfg.training, "study.problem")
    heldout = _heldout_set(cfg, problem)
    n_probe = int(cfg.problem.get("probe_size", 256))
    probe = sample_distribution(problem.rho0, n_probe, trial_seed(cfg.master_seed, HELDOUT_KEY, 1), box=problem.box)

    def make_task(i, j, alpha):
        seed = trial_seed(cfg.master_seed, i, j)

        def body():
            result = train(
                problem.rho0, problem.batch_size, alpha, problem.clip_radius, problem.n_steps,
                problem.schedule, seed, hidden=problem.hidden, heldout=heldout,
            )
            if result.aborted:
                raise_abort(result)
            traj = integrate_flow(probe, result.params, problem.n_steps)
            return {
                "straightness": straightness_metric(traj),
                "j_train": result.final.j_train,
                "j_heldout": result.final.j_heldout,
            }

        return lambda: _guarded(cfg.kind, alpha, j, seed, "none", body)

    tasks = [make_task(i, j, alpha) for i, alpha in enumerate(cfg.sweep) for j in range(cfg.trials)]
    rows = _run_trials(tasks, cfg.threads, writer, on_row)
    if writer is not None:
        for alpha, median in median_by_x(rows, "straightness"):
            writer.comment(f"median straightness alpha={_fmt(alpha)}: {median!r}")
    return rows


# --- dispatch ---------------------------------------------------------------

RUNNERS = {
    "alpha_sweep": run_alpha_sweep,
    "data_limit": run_data_limit,
    "w1_rate": run_w1_rate,
    "straightness": run_straightness,
}


@dataclass(eq=False)
class StudyResult:
    rows: list
    path: Path
    summaries: list = field(default_factory=list)


def run_study(cfg, store=None):
    """Run the configured study, writing its CSV (and the optional SQLite ledger)."""
    logger.info(f"Running study {cfg.kind}: sweep={cfg.sweep}, trials={cfg.trials}, seed={cfg.master_seed}")
    run_id = None
    on_row = None
    if store is not None:
        run_id = store.start_run(cfg.kind, cfg.config_hash, cfg.master_seed, __version__, cfg.output)
        on_row = lambda row: store.save_row(run_id, row)  # noqa: E731

    status = "failed"
    try:
        with ReportWriter(cfg.output, cfg.kind, cfg.config_hash, cfg.master_seed) as writer:
            outcome = RUNNERS[cfg.kind](cfg, writer, on_row)
        rows, summaries = outcome if isinstance(outcome, tuple) else (outcome, [])
        status = "complete"
    finally:
        if store is not None:
            store.finish_run(run_id, status)

    infeasible = sum(1 for r in rows if not r.feasible)
    logger.info(f"Study {cfg.kind} wrote {len(rows)} rows ({infeasible} infeasible) to {cfg.output}")
    return StudyResult(rows, Path(cfg.output), summaries)
