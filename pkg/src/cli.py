"""Command-line entry point: solve-grid, train, oracle, study, selftest.

Exit codes: 0 success, 2 configuration or parameter error (including a
missing config file), 1 numerical failure.
"""

import argparse
import csv
import io
import logging
import math
import sys
from pathlib import Path

import torch

from src import __version__
from src.config_loader import DEFAULT_CONFIG_PATH, REQUIRED_SECTIONS, Config
from src.errors import ConfigError, NumericalError, OtflowError
from src.experiments import (
    StudyConfig,
    build_grid_problem,
    build_neural_problem,
    build_pdhg_params,
    provenance_lines,
    run_study,
)
from src.grid_solver import solve_otflow_grid, write_report_csv
from src.measures import load_field, load_particles, save_field
from src.neural_flow import save_checkpoint, train, write_history_csv
from src.results_store import ResultStore
from src.selftest import run_selftest
from src.transport_oracles import discrete_ot_exact, w1_empirical, w2_squared_1d
from src.utils import ensure_directory_exists, parse_extended, setup_logging

EXIT_OK = 0
EXIT_NUMERICAL = 1
EXIT_CONFIG = 2

logger = logging.getLogger(__name__)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="otflow",
        description="Grid and neural solvers for kinetic-regularized transport flows, exact oracles and convergence studies.",
        epilog="Environment: OTFLOW_SEED overrides the master seed, OTFLOW_THREADS the worker thread count. "
               "--seed takes precedence over OTFLOW_SEED.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="Log at DEBUG level.")
    parser.add_argument("-q", "--quiet", action="store_true", help="Log warnings and errors only.")
    parser.add_argument("--seed", type=int, default=None, help="Master seed override.")

    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", default=DEFAULT_CONFIG_PATH, help="YAML config file.")
        p.add_argument("--out", default="out", help="Output directory (created if missing).")
        return p

    solve = with_config(sub.add_parser("solve-grid", help="Solve the grid transport problem."))
    solve.add_argument("--alpha", default=None, help="Terminal KL weight; 'inf' for the hard constraint.")
    with_config(sub.add_parser("train", help="Train the neural flow."))
    with_config(sub.add_parser("study", help="Run a configured study and write its CSV."))

    oracle = sub.add_parser("oracle", help="Evaluate an exact transport oracle.")
    oracle.add_argument("--kind", required=True, choices=["w2-1d", "w1", "assignment"])
    oracle.add_argument("--a", required=True, help="Field CSV/npz (w2-1d) or particle CSV.")
    oracle.add_argument("--b", required=True, help="Field CSV/npz (w2-1d) or particle CSV.")
    oracle.add_argument("--out", default=None, help="Optional output CSV.")

    sub.add_parser("selftest", help="Run the built-in fast checks.")
    return parser


def emit_plotdata(rows, kind, metrics=None, summaries=()):
    """Tidy long-format CSV text `x,metric,value,trial`; summaries become `#` comment lines."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["x", "metric", "value", "trial"])
    for row in rows:
        if not row.feasible:
            continue
        names = metrics if metrics is not None else [k for k in row.metrics if k != "dim"]
        for name in names:
            value = row.metrics.get(name)
            if value is None:
                continue
            metric = f"{name}_d{row.metrics['dim']}" if kind == "w1_rate" and "dim" in row.metrics else name
            writer.writerow([_plot_value(row.x), metric, _plot_value(value), row.trial])
    for summary in summaries:
        buffer.write(
            f"# slope d={summary.dim}: {summary.fit.slope!r} stderr={summary.fit.stderr!r}"
            + (f" note: {summary.note}" if summary.note else "")
            + "\n"
        )
    return buffer.getvalue()


def _plot_value(value):
    value = float(value)
    if math.isinf(value):
        return "inf"
    return repr(value)


class OtflowApp:
    def __init__(self, args):
        self.args = args
        self.config = None
        self.logger = None

    def setup_logging(self, config_level="INFO"):
        level = config_level
        if self.args.verbose:
            level = "DEBUG"
        elif self.args.quiet:
            level = "WARNING"
        setup_logging(level)
        self.logger = logging.getLogger(__name__)
        return self.logger

    def load_config(self):
        self.config = Config.load(self.args.config, REQUIRED_SECTIONS.get(self.args.command, ()))
        self.config.apply_overrides(seed=self.args.seed)
        level = self.config.get("logging.level", "INFO")
        self.setup_logging(level)
        torch.set_num_threads(self.config.threads)
        return self.config

    def provenance(self):
        return provenance_lines(self.config.digest, self.config.seed)

    def output_dir(self):
        out = Path(self.args.out)
        ensure_directory_exists(str(out))
        return out

    def solve_grid(self):
        self.load_config()
        problem = build_grid_problem(self.config.section("grid_problem"))
        solver = self.config.section("solver")
        alpha = parse_extended(self.args.alpha if self.args.alpha is not None else solver.get("alpha", "inf"))
        params = build_pdhg_params(solver, alpha, self.config.seed)
        out = self.output_dir()
        try:
            solution, report = solve_otflow_grid(problem.rho0, problem.rho1, problem.grid, params)
        except NumericalError as e:
            write_report_csv(e.history or [], out / "solve_report.csv", self.provenance() + [f"failed: {e}"])
            raise
        comments = self.provenance() + [f"alpha: {alpha!r}", f"converged: {report.converged}"]
        write_report_csv(report, out / "solve_report.csv", comments)
        save_field(out / "density.csv", solution.rho, comments=self.provenance())
        self.logger.info(
            f"solve-grid: action={report.action:.6g} kl_or_gap={report.kl_or_gap:.3e} "
            f"residual={report.residual:.3e} iterations={report.iterations}"
        )
        if problem.oracle != "none":
            self.logger.info(
                f"oracle {problem.oracle}: W2^2 = {problem.oracle_value():.6g}; solver 2*action = {report.w2_estimate:.6g}"
            )
        return EXIT_OK

    def train(self):
        self.load_config()
        problem = build_neural_problem(self.config.section("neural_problem"), self.config.section("training"))
        out = self.output_dir()
        result = train(
            problem.rho0, problem.batch_size, problem.alpha, problem.clip_radius, problem.n_steps,
            problem.schedule, self.config.seed, hidden=problem.hidden, heldout_size=problem.heldout_size,
        )
        write_history_csv(result.history, out / "history.csv", self.provenance())
        save_checkpoint(out / "checkpoint.txt", result.params)
        if result.aborted:
            self.logger.error(f"Training aborted: {result.reason}")
            return EXIT_NUMERICAL
        return EXIT_OK

    def study(self):
        self.load_config()
        cfg = StudyConfig.from_config(self.config, output_dir=self.output_dir())
        store = ResultStore(self.config) if self.config.get("database.path") else None
        result = run_study(cfg, store)
        plot_path = result.path.with_name(result.path.stem + "_plot.csv")
        with open(plot_path, "w") as f:
            for line in self.provenance():
                f.write(f"# {line}\n")
            f.write(emit_plotdata(result.rows, cfg.kind, summaries=result.summaries))
        return EXIT_OK

    def oracle(self):
        self.setup_logging()
        kind = self.args.kind
        for path in (self.args.a, self.args.b):
            if not Path(path).exists():
                raise ConfigError(f"Input file not found: {path}", key=path)
        if kind == "w2-1d":
            value = w2_squared_1d(load_field(self.args.a), load_field(self.args.b))
        elif kind == "w1":
            value = w1_empirical(load_particles(self.args.a), load_particles(self.args.b))
        else:
            value = discrete_ot_exact(load_particles(self.args.a), load_particles(self.args.b)).cost
        print(f"{kind},{value!r}")
        if self.args.out:
            out = Path(self.args.out)
            ensure_directory_exists(str(out.parent))
            out.write_text(f"kind,value\n{kind},{value!r}\n")
        return EXIT_OK

    def selftest(self):
        self.setup_logging("INFO")
        return EXIT_OK if run_selftest() == 0 else EXIT_NUMERICAL

    def run(self):
        handlers = {
            "solve-grid": self.solve_grid,
            "train": self.train,
            "study": self.study,
            "oracle": self.oracle,
            "selftest": self.selftest,
        }
        if self.logger is None:
            self.setup_logging()
        try:
            return handlers[self.args.command]()
        except ConfigError as e:
            self.logger.error(f"Configuration error: {e}")
            return EXIT_CONFIG
        except NumericalError as e:
            self.logger.error(f"Numerical failure: {e}")
            return EXIT_NUMERICAL
        except (OtflowError, ValueError) as e:
            self.logger.error(f"Invalid parameters: {e}")
            return EXIT_CONFIG


def parse_and_dispatch(argv):
    args = build_parser().parse_args(argv)
    return OtflowApp(args).run()


def main(argv=None):
    try:
        code = parse_and_dispatch(sys.argv[1:] if argv is None else argv)
    except SystemExit as e:
        code = e.code if isinstance(e.code, int) else EXIT_CONFIG
    return code
