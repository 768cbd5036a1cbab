import json

import pytest

from relmeta import cli
from relmeta.tasks import TaskPool

TINY = {
    "synth": {"customers": 80, "products": 15, "transactions": 400},
    "tasks": {"P": 5, "c_range": [2, 4]},
    "pretrain": {"epochs": 1, "episodes_per_epoch": 3, "meta_batch": 4, "hidden": 8, "fanouts": [4, 2]},
    "adapt": {"shots": [1, 5, "sufficient"], "seeds": [0, 1], "head_epochs": 3},
}


@pytest.fixture
def ws(tmp_path):
    (tmp_path / cli.CONFIG_NAME).write_text(json.dumps(TINY))
    return tmp_path


def run(ws, *args):
    return cli.main([args[0], "-w", str(ws), "-q", *args[1:]])


def test_full_chain_and_caching(ws, capsys):
    assert run(ws, "all") == cli.EXIT_OK
    table = (ws / "report" / "results.md").read_text()
    assert "| clustered | churn | prototype | 1 | roc_auc | 2 |" in table
    assert (ws / "report" / "results.csv").exists()
    for stage in cli.ORDER:
        doc = json.loads((ws / cli.STAGES[stage][0].format(mode="clustered") / cli.STAGE_FILE).read_text())
        assert set(doc) >= {"inputs", "config", "seed", "outputs"}
    capsys.readouterr()
    assert cli.main(["pretrain", "-w", str(ws)]) == cli.EXIT_OK
    assert "pretrain: up to date" in capsys.readouterr().out


def test_missing_upstream_is_stale(ws, capsys):
    assert run(ws, "pretrain") == cli.EXIT_STALE
    assert "relmeta" in capsys.readouterr().err


def test_edited_artifact_is_stale(ws, capsys):
    for s in ("synth", "ingest", "build-graph"):
        assert run(ws, s) == cli.EXIT_OK
    with open(ws / "graph" / "graph.json", "a") as f:
        f.write(" ")
    assert run(ws, "build-attrs") == cli.EXIT_STALE
    assert "rerun `relmeta build-graph`" in capsys.readouterr().err


def test_config_parse_error_names_the_line(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "seed": ,\n}')
    assert cli.main(["synth", "-w", str(tmp_path), "--config", str(bad)]) == cli.EXIT_CONFIG
    assert "line 2" in capsys.readouterr().err


def test_unknown_keys_rejected(ws):
    assert run(ws, "synth", "--set", "synth.nope=1") == cli.EXIT_CONFIG
    assert run(ws, "synth", "--set", "pretrain.lr") == cli.EXIT_CONFIG


def test_numeric_failure_exit_code(ws):
    assert run(ws, "gen-tasks", "--set", "pretrain.lr=1e300") == cli.EXIT_STALE   # nothing upstream yet
    for s in ("synth", "ingest", "build-graph", "build-attrs", "gen-tasks"):
        assert run(ws, s) == cli.EXIT_OK
    code = run(ws, "pretrain", "--set", "pretrain.lr=1e300", "--set", "pretrain.episodes_per_epoch=5")
    assert code == cli.EXIT_NUMERIC


@pytest.mark.parametrize("mode,perspectives", [("randomized", ["randomized"]), ("ground-truth", ["ground-truth"]),
                                               ("clustered", ["hybrid", "intrinsic", "relational"])])
def test_mode_switches_pool_type(ws, mode, perspectives):
    for s in ("synth", "ingest", "build-graph", "build-attrs"):
        assert run(ws, s) == cli.EXIT_OK
    assert run(ws, "gen-tasks", "--mode", mode) == cli.EXIT_OK
    pools = cli.load_pools(ws / "tasks" / mode)
    assert sorted(pools) == perspectives
    assert all(isinstance(p, TaskPool) and p.node_type == "Customer" for p in pools.values())


def test_ground_truth_pool_uses_training_labels_only(ws):
    for s in ("synth", "ingest", "build-graph", "build-attrs"):
        run(ws, s)
    assert run(ws, "gen-tasks", "--mode", "ground-truth") == cli.EXIT_OK
    pool = cli.load_pools(ws / "tasks" / "ground-truth")["ground-truth"]
    tasks, _ = cli.evaluate.read_tasks(ws / "db")
    test_nodes = tasks["churn"].test[:, 0].astype(int)
    assert (pool.tasks[0].labels[test_nodes] == -1).all()


def test_workspace_from_environment(ws, monkeypatch):
    monkeypatch.setenv("WORKSPACE", str(ws))
    assert cli.main(["synth", "-q"]) == cli.EXIT_OK
    monkeypatch.delenv("WORKSPACE")
    assert cli.main(["synth", "-q"]) == cli.EXIT_CONFIG
