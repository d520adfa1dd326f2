import json
import math

import numpy as np
import pytest
from fastapi.testclient import TestClient

from aggregator import Aggregator
from cost_model import breakeven_epsilon
from errors import InfeasibleScenario
from models.cost import CostParams
from models.mechanism import CoinPair, LaplaceSpec, RandomizedResponseSpec
from models.scenario import Poi, ScenarioConfig
from owners import HttpBinding
from service import create_app
from simulator import (
    ABSENT, check_feasible, compare_participation, default_campus_scenario, generate_population,
    generate_presence, load_scenario, run_replications, run_simulation, wait_time_estimate,
)


def _flat(value):
    return [value] * 24


def _scenario(pois, population=200, private=150, nonprivate=20, horizon=4, coins=(0.3, 0.3),
              mechanism=None, seed=1, **extra):
    return ScenarioConfig(
        total_population=population, n_private_participants=private, n_nonprivate=nonprivate,
        pois=pois, epoch_length=1800, horizon=horizon,
        mechanism=mechanism or RandomizedResponseSpec(coins=CoinPair(p=coins[0], q=coins[1])),
        seed=seed, **extra,
    )


def test_zero_profiles_leave_everyone_absent():
    config = _scenario([Poi(poi_id="gym", name="gym", capacity=10, attraction_profile=_flat(0.0))],
                       population=50, private=10, nonprivate=5)
    owners = generate_population(config)
    assert len(owners) == 50
    assert all(entry is None for owner in owners for entry in owner.presence_trace)
    assert sum(owner.participates for owner in owners) == 10


def test_full_profile_puts_everyone_at_the_poi():
    config = _scenario([Poi(poi_id="gym", name="gym", capacity=10, attraction_profile=_flat(1.0))])
    assert (generate_presence(config) == 0).all()


def test_overfull_profiles_are_normalized():
    pois = [Poi(poi_id=name, name=name, capacity=10, attraction_profile=_flat(0.9)) for name in ("a", "b")]
    presence = generate_presence(_scenario(pois, population=4000, private=100))
    assert (presence != ABSENT).all()
    share_a = (presence == 0).mean()
    assert share_a == pytest.approx(0.5, abs=0.03)


def test_gym_noon_count():
    profile = _flat(0.0)
    profile[12] = 0.2
    config = _scenario([Poi(poi_id="gym", name="gym", capacity=600, attraction_profile=profile)],
                       population=10**4, private=5000, nonprivate=2000, horizon=9)
    presence = generate_presence(config)
    noon = 8  # 08:00 start, 30-minute epochs
    assert abs(int((presence[noon] == 0).sum()) - 2000) < 4 * math.sqrt(10**4 * 0.2 * 0.8)
    assert (presence[:noon] == ABSENT).all()


def test_ground_truth_conservation():
    config = default_campus_scenario(seed=3).model_copy(update={"total_population": 3000,
                                                                "n_private_participants": 500,
                                                                "n_nonprivate": 200})
    presence = generate_presence(config)
    for row in presence:
        per_poi = sum(int((row == k).sum()) for k in range(len(config.pois)))
        assert per_poi == int((row != ABSENT).sum()) <= config.total_population


def test_wait_time_estimate():
    poi = Poi(poi_id="gym", name="gym", capacity=600, attraction_profile=_flat(0.1))
    assert wait_time_estimate(0.0, poi, 60) == 0.0
    assert wait_time_estimate(600.0, poi, 60) == 60.0
    assert wait_time_estimate(300.0, poi, 60) == 30.0
    assert wait_time_estimate(5000.0, poi, 60) == 60.0
    assert wait_time_estimate(-12.0, poi, 60) == 0.0
    with pytest.raises(ValueError):
        wait_time_estimate(1.0, poi, -1)


def test_compare_participation():
    config = default_campus_scenario()
    favored = compare_participation(config, 0.3895)
    assert favored.private_cost == pytest.approx(71436, abs=10)
    assert favored.nonprivate_cost == pytest.approx(96000)
    assert favored.participation_favored
    costly = compare_participation(config, 2.3979)
    assert costly.private_cost == pytest.approx(1500008, abs=10)
    assert not costly.participation_favored
    assert not compare_participation(config, breakeven_epsilon(CostParams())).participation_favored


def test_infeasible_scenarios(tmp_path):
    data = default_campus_scenario().model_dump(mode="json")
    data["n_nonprivate"] = 40000
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(data))
    with pytest.raises(InfeasibleScenario):
        load_scenario(str(path))
    unchecked = default_campus_scenario().model_copy(update={"n_private_participants": 41000})
    with pytest.raises(InfeasibleScenario):
        check_feasible(unchecked)


def test_truthful_mechanism_is_exact():
    pois = [Poi(poi_id="gym", name="gym", capacity=50, attraction_profile=_flat(0.3)),
            Poi(poi_id="library", name="library", capacity=80, attraction_profile=_flat(0.4))]
    report = run_simulation(_scenario(pois, coins=(1.0, 0.5), horizon=6))
    assert report.coverage_fraction == 1.0
    for record in report.per_epoch:
        assert record.estimate.y_a_raw == record.true_count
    assert report.cost_comparison.epsilon is None
    assert not report.cost_comparison.participation_favored


def test_utility_scenario_mean():
    poi = Poi(poi_id="quad", name="quad", capacity=1000, attraction_profile=_flat(0.8))
    config = _scenario([poi], population=1000, private=1000, nonprivate=0, horizon=100, seed=2017)
    report = run_simulation(config)
    estimates = [r.estimate.y_a_raw for r in report.per_epoch]
    truths = [r.true_count for r in report.per_epoch]
    assert abs(np.mean(estimates) - np.mean(truths)) < 4 * 50.90 / math.sqrt(100)


def test_campus_coverage_calibrated():
    config = default_campus_scenario(seed=11).model_copy(update={"horizon": 200})
    assert (config.total_population, config.n_private_participants, len(config.pois)) == (42000, 5000, 3)
    report = run_simulation(config)
    assert len(report.per_epoch) == 600
    assert 0.90 <= report.coverage_fraction <= 0.99
    assert report.cost_comparison.epsilon == pytest.approx(0.3895, abs=1e-4)
    assert report.cost_comparison.participation_favored


def test_laplace_below_unit_sensitivity():
    pois = [Poi(poi_id="gym", name="gym", capacity=100, attraction_profile=_flat(0.4))]
    config = _scenario(pois, horizon=20, mechanism=LaplaceSpec(epsilon=1.0, sensitivity=0.5), seed=9)
    report = run_simulation(config)
    assert len(report.per_epoch) == 20
    for record in report.per_epoch:
        assert record.n_responses == 150
        assert abs(record.estimate.y_a_raw - record.true_count) < 8 * record.estimate.std_plugin


def test_reproducible_reports():
    pois = [Poi(poi_id="gym", name="gym", capacity=40, attraction_profile=_flat(0.25))]
    config = _scenario(pois, horizon=5, seed=77)
    first = run_simulation(config)
    assert first.model_dump_json() == run_simulation(config).model_dump_json()
    assert first.model_dump_json() != run_simulation(config.model_copy(update={"seed": 78})).model_dump_json()


def test_crowd_estimate_scales_to_population():
    pois = [Poi(poi_id="gym", name="gym", capacity=100, attraction_profile=_flat(0.2))]
    report = run_simulation(_scenario(pois, population=400, private=100, coins=(1.0, 0.5)))
    for record in report.per_epoch:
        assert record.crowd_estimate == pytest.approx(record.true_count * 4)
        assert record.wait_estimate_minutes == pytest.approx(60 * min(1.0, record.true_count * 4 / 100))


@pytest.mark.parametrize("mechanism", [
    RandomizedResponseSpec(coins=CoinPair(p=0.6, q=0.3)),
    LaplaceSpec(epsilon=0.5),
])
def test_http_and_in_process_agree(mechanism):
    pois = [Poi(poi_id="gym", name="gym", capacity=40, attraction_profile=_flat(0.3)),
            Poi(poi_id="cafeteria", name="cafeteria", capacity=60, attraction_profile=_flat(0.2))]
    config = _scenario(pois, horizon=3, mechanism=mechanism, seed=21)

    def over_http(keyring):
        return HttpBinding(session=TestClient(create_app(Aggregator(keyring, seed=config.seed), virtual_time=True)))

    in_process = run_simulation(config)
    remote = run_simulation(config, binding_factory=over_http)
    assert remote.per_epoch == in_process.per_epoch
    assert remote.coverage_fraction == in_process.coverage_fraction


def test_replications_merge_in_seed_order():
    pois = [Poi(poi_id="gym", name="gym", capacity=40, attraction_profile=_flat(0.3))]
    config = _scenario(pois, horizon=2, seed=5)
    sequential = run_replications(config, 3)
    parallel = run_replications(config, 3, workers=3)
    assert [r.model_dump_json() for r in sequential] == [r.model_dump_json() for r in parallel]
    assert sequential[1].model_dump_json() == run_simulation(config.model_copy(update={"seed": 6})).model_dump_json()
