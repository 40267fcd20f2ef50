import json
import math

import pytest

from src.config_loader import Config
from src.experiments import ReportRow
from src.results_store import ResultStore


@pytest.fixture
def store(tmp_path):
    return ResultStore(Config({"database": {"path": str(tmp_path / "db" / "ledger.db")}}))


def test_creates_parent_directory(tmp_path, store):
    assert (tmp_path / "db" / "ledger.db").exists()


def test_run_lifecycle(store):
    run_id = store.start_run("alpha_sweep", "abc", 3, "0.1.0", "out/alpha.csv")
    assert store.get_runs("alpha_sweep")[0].status == "running"
    store.finish_run(run_id, "complete")
    runs = store.get_runs()
    assert [(r.id, r.kind, r.status) for r in runs] == [(run_id, "alpha_sweep", "complete")]
    assert store.get_runs("w1_rate") == []


def test_non_finite_values_become_null(store):
    run_id = store.start_run("alpha_sweep", "abc", 3, "0.1.0", "out.csv")
    store.save_row(run_id, ReportRow("alpha_sweep", math.inf, 0, 11, {"action": 0.5, "kl": math.nan}))
    (row,) = store.get_rows(run_id)
    assert row.x is None
    assert json.loads(row.metrics_json) == {"action": 0.5, "kl": None}


def test_infeasible_row_keeps_error(store):
    run_id = store.start_run("data_limit", "abc", 3, "0.1.0", "out.csv")
    store.save_row(run_id, ReportRow("data_limit", 64, 1, 12, {}, feasible=False, error="diverged"))
    (row,) = store.get_rows(run_id)
    assert (row.feasible, row.error, row.trial) == (False, "diverged", 1)


def test_finishing_unknown_run_is_logged(store, caplog):
    store.finish_run(999, "complete")
    assert "not found" in caplog.text
