import json

from src.utils.run_ledger import RunLedger


def test_run_lifecycle(tmp_path):
    ledger = RunLedger(str(tmp_path / "logs" / "runs.db"))
    run_id = ledger.start_run("fit", seed=4, config="seed = 4\n")
    ledger.log_results(run_id, {"tau_f_ns": 2.0712345678901234, "converged": True})
    ledger.end_run(run_id, 0)

    run = ledger.get_run(run_id)
    assert run["command"] == "fit"
    assert run["seed"] == 4
    assert run["exit_code"] == 0
    assert run["end_time"] is not None
    results = ledger.get_results(run_id)
    assert float(results["tau_f_ns"]) == 2.0712345678901234
    assert results["converged"] == "True"


def test_same_second_runs_get_distinct_ids(tmp_path):
    ledger = RunLedger(str(tmp_path / "runs.db"))
    first = ledger.start_run("simulate")
    second = ledger.start_run("simulate")
    assert first != second
    assert len(ledger.list_runs(command="simulate")) == 2
    assert ledger.list_runs(command="fit") == []


def test_export_run(tmp_path):
    ledger = RunLedger(str(tmp_path / "runs.db"))
    run_id = ledger.start_run("loss")
    ledger.log_results(run_id, {"other_loss": 0.043})
    path = ledger.export_run(run_id, str(tmp_path / "run.json"))
    with open(path) as f:
        data = json.load(f)
    assert data["run"]["run_id"] == run_id
    assert data["results"] == {"other_loss": "0.043"}


def test_unknown_run(tmp_path):
    ledger = RunLedger(str(tmp_path / "runs.db"))
    assert ledger.get_run("nothing") is None
    assert ledger.get_results("nothing") == {}
