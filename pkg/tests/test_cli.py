import json
import math

import pytest
import yaml
from fastapi.testclient import TestClient

import main as cli
from cost_model import breakeven_epsilon
from errors import UnknownAnalyst
from estimation import utility_privacy_rows
from models.cost import CostParams
from models.mechanism import CoinPair, RandomizedResponseSpec
from owners import HttpBinding, RespondSettings, run_respondents
from reports import read_cost_curve, read_csv, read_simulation, read_table1, simulation_rows
from service import BootstrapQuery, SeededAnalyst, ServeSettings, build_aggregator, create_app
from simulator import default_campus_scenario, load_scenario, run_simulation

TABLE1_EPSILONS = [0.8873, 0.5390, 0.3895, 1.7918, 1.2528, 0.9808, 3.4340, 2.7726, 2.3979]
T0 = 1_700_000_000


def _write_config(tmp_path, data):
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(data))
    return str(path)


def _small_scenario(tmp_path, coins=(0.3, 0.9), seed=4):
    base = default_campus_scenario(seed=seed)
    scenario = base.model_copy(update={
        "total_population": 600, "n_private_participants": 300, "n_nonprivate": 100, "horizon": 4,
        "mechanism": RandomizedResponseSpec(coins=CoinPair(p=coins[0], q=coins[1])),
    })
    path = tmp_path / "scenario.json"
    path.write_text(scenario.model_dump_json())
    return str(path)


def test_tables(tmp_path):
    config = _write_config(tmp_path, {"tables": {"n": 1000, "true_yes": 800, "runs": 4, "seed": 1}})
    out = tmp_path / "out"
    assert cli.main(["tables", "--config", config, "--out", str(out)]) == 0

    rows = read_table1(str(out / "table1.csv"))
    assert rows == utility_privacy_rows(n=1000, true_yes=800, runs=4, seed=1, workers=1)
    assert [round(r.epsilon_paper, 4) for r in rows] == pytest.approx(TABLE1_EPSILONS, abs=1e-9)
    _, table2 = read_csv(str(out / "table2.csv"))
    costs = {row["epsilon"]: int(row["cost"]) for row in table2}
    assert costs["0.539"] == pytest.approx(107144, abs=10)


def test_tables_deterministic(tmp_path):
    config = _write_config(tmp_path, {"tables": {"runs": 1}})
    first, second = tmp_path / "a", tmp_path / "b"
    assert cli.main(["tables", "--config", config, "--out", str(first), "--seed", "9"]) == 0
    assert cli.main(["tables", "--config", config, "--out", str(second), "--seed", "9", "--runs", "1"]) == 0
    assert (first / "table1.csv").read_text() == (second / "table1.csv").read_text()


def test_cost_curve(tmp_path):
    config = _write_config(tmp_path, {"cost_curve": {"epsilons": [0.0083, 0.3895, 0.539]}})
    out = tmp_path / "out"
    assert cli.main(["cost-curve", "--config", config, "--out", str(out)]) == 0
    breakeven, points = read_cost_curve(str(out / "cost_curve.csv"))
    assert breakeven == pytest.approx(breakeven_epsilon(CostParams()))
    assert points[0].private_cost == pytest.approx(1250, abs=1)
    assert [p.participation_favored for p in points] == [True, True, False]
    assert round(breakeven, 4) == 0.4947
    assert (out / "cost_curve.csv").read_text().startswith("# breakeven_epsilon=")


def test_cost_curve_grid(tmp_path):
    config = _write_config(tmp_path, {"cost_curve": {"grid": {"start": 0.1, "stop": 2.4, "step": 0.1}}})
    out = tmp_path / "out"
    assert cli.main(["cost-curve", "--config", config, "--out", str(out)]) == 0
    _, points = read_cost_curve(str(out / "cost_curve.csv"))
    assert len(points) == 24


@pytest.mark.parametrize("section", [{"epsilons": []}, {"epsilons": [0.5, 0.2]}, {}])
def test_cost_curve_bad_grid(tmp_path, section):
    config = _write_config(tmp_path, {"cost_curve": section})
    assert cli.main(["cost-curve", "--config", config, "--out", str(tmp_path / "out")]) == 2


def test_usage_errors(tmp_path):
    assert cli.main(["tables", "--bogus"]) == 2
    assert cli.main([]) == 2
    assert cli.main(["tables", "--seed", "-1"]) == 2
    assert cli.main(["tables", "--config", str(tmp_path / "missing.yaml")]) == 2


def test_simulate_deterministic(tmp_path):
    scenario = _small_scenario(tmp_path)
    config = _write_config(tmp_path, {"simulate": {"scenario": scenario}})
    first, second = tmp_path / "a", tmp_path / "b"
    assert cli.main(["simulate", "--config", config, "--out", str(first)]) == 0
    assert cli.main(["simulate", "--config", config, "--out", str(second)]) == 0
    assert (first / "simulation.csv").read_text() == (second / "simulation.csv").read_text()

    _, rows = read_csv(str(first / "simulation.csv"))
    assert len(rows) == 4 * 3
    assert list(rows[0]) == ["epoch", "poi_id", "true_count", "estimate_raw", "estimate_clamped",
                             "ci_low", "ci_high", "wait_minutes"]
    report = run_simulation(load_scenario(scenario))
    assert read_simulation(str(first / "simulation.csv")) == simulation_rows(report.per_epoch)


def test_simulate_scenario_file_as_config(tmp_path):
    scenario = _small_scenario(tmp_path)
    out = tmp_path / "out"
    assert cli.main(["simulate", "--config", scenario, "--out", str(out), "--seed", "12"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["records"] == 12
    assert summary["cost_comparison"]["nonprivate_cost"] == pytest.approx(0.8 * 60 * 100)


def test_simulate_campus_summary(tmp_path):
    scenario = tmp_path / "campus.json"
    scenario.write_text(default_campus_scenario(seed=2017).model_copy(update={"horizon": 1}).model_dump_json())
    config = _write_config(tmp_path, {"simulate": {"scenario": str(scenario)}})
    out = tmp_path / "out"
    assert cli.main(["simulate", "--config", config, "--out", str(out)]) == 0
    comparison = json.loads((out / "summary.json").read_text())["cost_comparison"]
    assert comparison["nonprivate_cost"] == pytest.approx(96000)
    assert comparison["private_cost"] == pytest.approx(71436, abs=10)
    assert comparison["participation_favored"] is True


def test_simulate_truthful_coverage(tmp_path):
    config = _write_config(tmp_path, {"simulate": {"scenario": _small_scenario(tmp_path, coins=(1.0, 0.5))}})
    out = tmp_path / "out"
    assert cli.main(["simulate", "--config", config, "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["coverage_fraction"] == 1.0
    assert summary["cost_comparison"]["private_cost"] is None


def test_simulate_infeasible_scenario(tmp_path):
    data = json.loads(default_campus_scenario().model_dump_json())
    data["n_private_participants"] = 41000
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(data))
    config = _write_config(tmp_path, {"simulate": {"scenario": str(path)}})
    assert cli.main(["simulate", "--config", config, "--out", str(tmp_path / "out")]) == 2


def _served_app(grace_epochs=0.0):
    settings = ServeSettings(
        seed=3,
        grace_epochs=grace_epochs,
        seeded_analysts=[SeededAnalyst(analyst_id="campus-study", public_key_id="campus-study-key", seed=2017)],
        bootstrap_queries=[BootstrapQuery(
            analyst_id="campus-study", query_id="gym-now", poi_id="gym", epoch_length=60, n_epochs=1,
            mechanism=RandomizedResponseSpec(coins=CoinPair(p=0.3, q=0.3)),
        )],
    )
    aggregator = build_aggregator(settings, now=T0)
    return aggregator, TestClient(create_app(aggregator, virtual_time=True))


def test_serve_and_respond():
    aggregator, client = _served_app()
    binding = HttpBinding(session=client)
    settings = RespondSettings(n_owners=1000, true_yes=800, seed=7, workers=1, realtime=False,
                               duplicate_nonce_fault=True)
    summary = run_respondents(binding, settings, clock=lambda: T0)
    assert summary.queries == 1
    assert summary.accepted == 1000
    assert summary.duplicates_rejected == 1
    assert summary.unexpected_errors == []

    aggregate = binding.close_epoch("gym-now", 0, T0 + 60)
    assert aggregate.n_responses == 1000
    assert abs(aggregate.raw_sum - 450) < 4 * math.sqrt(233.1)
    assert abs(aggregate.estimate.y_a_raw - 800) < 4 * 50.90


def test_serve_bind_failure(tmp_path, monkeypatch):
    def refuse(app, **kwargs):
        raise SystemExit(1)

    monkeypatch.setattr(cli.uvicorn, "run", refuse)
    snapshot = tmp_path / "snapshot.json"
    config = _write_config(tmp_path, {"serve": {"auto_close": False, "snapshot_path": str(snapshot)}})
    assert cli.main(["serve", "--config", config, "--listen", "127.0.0.1:8080"]) == 1
    assert json.loads(snapshot.read_text())["queries"] == []


def test_respond_without_queries(tmp_path, monkeypatch):
    aggregator, client = _served_app()
    monkeypatch.setattr(cli, "HttpBinding", lambda base_url: HttpBinding(session=client))
    config = _write_config(tmp_path, {"respond": {"server": "127.0.0.1:8080", "n_owners": 10, "true_yes": 5}})
    # the bootstrap query ended long before the wall clock
    assert cli.main(["respond", "--config", config]) == 0


def test_respond_unreachable_server(tmp_path):
    config = _write_config(tmp_path, {"respond": {"n_owners": 10, "true_yes": 5}})
    assert cli.main(["respond", "--config", config, "--server", "127.0.0.1:9"]) == 1


def test_respond_needs_address(tmp_path):
    config = _write_config(tmp_path, {"respond": {"n_owners": 10}})
    assert cli.main(["respond", "--config", config]) == 2


def test_bootstrap_needs_seeded_analyst():
    settings = ServeSettings(bootstrap_queries=[BootstrapQuery(
        analyst_id="ghost", query_id="q", poi_id="gym", epoch_length=60, n_epochs=1,
        mechanism=RandomizedResponseSpec(coins=CoinPair(p=0.5, q=0.5)),
    )])
    with pytest.raises(UnknownAnalyst):
        build_aggregator(settings, now=T0)
