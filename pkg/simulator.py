from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional

import numpy as np
import yaml
from pydantic import ValidationError

from aggregator import Aggregator
from cost_model import compare_at_epsilon
from errors import InfeasibleScenario, InfinitePrivacyLoss, protocol_error_from_name
from logger import setup_logger
from mechanisms import mechanism_epsilon
from models.cost import CostComparison, CostParams
from models.mechanism import CoinPair, RandomizedResponseSpec
from models.protocol import Query
from models.scenario import EpochRecord, OwnerState, Poi, ScenarioConfig, SimulationReport
from owners import AnalystClient, InProcessBinding, QueryCache, privatize_cohort
from utils.random_source import RandomSource
from utils.signing import Keyring

logger = setup_logger()

ABSENT = -1
SIM_ANALYST_ID = "campus-study"
SIM_KEY_ID = "campus-study-key"


def _hourly(night: float, by_hour: dict) -> List[float]:
    return [by_hour.get(h, night) for h in range(24)]


def default_campus_scenario(seed: int = 0) -> ScenarioConfig:
    """Campus of 42,000 students: 5,000 answer privately, 2,000 decline."""
    pois = [
        Poi(poi_id="gym", name="gym", capacity=600,
            attraction_profile=_hourly(0.0, {6: 0.01, 7: 0.015, 8: 0.01, 12: 0.01, 16: 0.015,
                                             17: 0.02, 18: 0.02, 19: 0.015, 20: 0.01})),
        Poi(poi_id="library", name="library", capacity=1500,
            attraction_profile=_hourly(0.002, {9: 0.02, 10: 0.03, 11: 0.03, 12: 0.02, 13: 0.03,
                                               14: 0.04, 15: 0.04, 16: 0.03, 19: 0.03, 20: 0.035,
                                               21: 0.03, 22: 0.015})),
        Poi(poi_id="cafeteria", name="cafeteria", capacity=900,
            attraction_profile=_hourly(0.0, {7: 0.01, 8: 0.015, 11: 0.015, 12: 0.03, 13: 0.025,
                                             17: 0.015, 18: 0.025, 19: 0.02})),
    ]
    return ScenarioConfig(
        total_population=42000,
        n_private_participants=5000,
        n_nonprivate=2000,
        pois=pois,
        epoch_length=1800,
        horizon=48,
        mechanism=RandomizedResponseSpec(coins=CoinPair(p=0.3, q=0.9)),
        cost_params=CostParams(),
        seed=seed,
    )


def check_feasible(config: ScenarioConfig) -> ScenarioConfig:
    """Re-validates a scenario (it may have been built without validation)."""
    try:
        return ScenarioConfig.model_validate(config.model_dump())
    except ValidationError as e:
        raise InfeasibleScenario(_describe(e))


def _describe(error: ValidationError) -> str:
    return "; ".join(
        f"{'.'.join(str(part) for part in item['loc']) or 'scenario'}: {item['msg']}"
        for item in error.errors()
    )


def load_scenario(path: str) -> ScenarioConfig:
    with open(path, "r", encoding="utf-8") as f:
        data = yaml.safe_load(f)
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as e:
        raise InfeasibleScenario(f"{path}: {_describe(e)}")


def epoch_hour(config: ScenarioConfig, epoch_index: int) -> int:
    return ((config.start_time + epoch_index * config.epoch_length) // 3600) % 24


def _streams(config: ScenarioConfig):
    presence_rng, owner_rng = RandomSource(config.seed).spawn(2)
    return presence_rng, owner_rng


def generate_presence(config: ScenarioConfig, rng: Optional[RandomSource] = None) -> np.ndarray:
    """
    Epochs x owners matrix of POI indices, ABSENT (-1) when the owner is nowhere.
    Each epoch every owner independently visits POI k with its hourly intensity,
    scaled down so the visit probabilities sum to at most 1.
    """
    config = check_feasible(config)
    if rng is None:
        rng, _ = _streams(config)
    profiles = np.array([poi.attraction_profile for poi in config.pois], dtype=np.float64)
    n_pois = profiles.shape[0]
    presence = np.empty((config.horizon, config.total_population), dtype=np.int16)

    for e in range(config.horizon):
        probs = profiles[:, epoch_hour(config, e)]
        total = probs.sum()
        cumulative = np.cumsum(probs / total if total > 1.0 else probs)
        if total > 1.0:
            cumulative[-1] = 1.0
        slots = np.searchsorted(cumulative, rng.uniforms(config.total_population), side="right")
        presence[e] = np.where(slots < n_pois, slots, ABSENT)
    return presence


def generate_population(config: ScenarioConfig) -> List[OwnerState]:
    presence = generate_presence(config)
    poi_ids = [poi.poi_id for poi in config.pois]
    return [
        OwnerState(
            owner_index=i,
            participates=i < config.n_private_participants,
            presence_trace=[poi_ids[k] if k != ABSENT else None for k in presence[:, i].tolist()],
        )
        for i in range(config.total_population)
    ]


def wait_time_estimate(crowd_estimate: float, poi: Poi, w_max: float) -> float:
    """Linear in occupancy, saturating at w_max once the POI is at capacity."""
    if w_max < 0:
        raise ValueError(f"w_max must be non-negative, got {w_max}")
    return w_max * min(1.0, max(0.0, crowd_estimate) / poi.capacity)


def compare_participation(config: ScenarioConfig, epsilon: Optional[float]) -> CostComparison:
    """Declining (Case 1) against participating privately at epsilon (Case 2)."""
    params = config.cost_params.model_copy(update={
        "n_nonprivate": config.n_nonprivate,
        "n_private": config.n_private_participants,
    })
    return compare_at_epsilon(epsilon, params)


def simulation_analyst(config: ScenarioConfig):
    """Keyring and analyst client of the study, derived from the scenario seed."""
    keyring = Keyring()
    signing_key = keyring.add_seeded(SIM_ANALYST_ID, SIM_KEY_ID, config.seed)
    return keyring, AnalystClient(SIM_ANALYST_ID, SIM_KEY_ID, signing_key)


def _queries(config: ScenarioConfig) -> List[Query]:
    end_time = config.start_time + config.horizon * config.epoch_length
    return [
        Query(query_id=f"crowd-{poi.poi_id}", analyst_id=SIM_ANALYST_ID, poi_id=poi.poi_id,
              start_time=config.start_time, end_time=end_time, epoch_length=config.epoch_length,
              mechanism=config.mechanism)
        for poi in config.pois
    ]


def run_simulation(config: ScenarioConfig,
                   binding_factory: Optional[Callable[[Keyring], object]] = None) -> SimulationReport:
    """
    Drives every epoch end to end: participants privatize their presence, submit through
    the protocol, the epoch is closed and its estimate recorded.
    binding_factory(keyring) may return an HTTP binding; the default is in-process.
    """
    config = check_feasible(config)
    presence_rng, owner_rng = _streams(config)
    presence = generate_presence(config, presence_rng)

    keyring, analyst = simulation_analyst(config)
    if binding_factory is None:
        binding = InProcessBinding(Aggregator(keyring, seed=config.seed))
    else:
        binding = binding_factory(keyring)

    queries = _queries(config)
    for query in queries:
        analyst.publish(binding, query, now=config.start_time)

    # owners fetch the standing queries once
    cache = QueryCache(keyring)
    cache.refresh(binding.fetch_queries(config.start_time), config.start_time)
    by_poi = {q.poi_id: q for q in cache.active(config.start_time)}

    n_priv = config.n_private_participants
    logger.info(f"SIMULATE: population={config.total_population} participants={n_priv} "
                f"pois={len(config.pois)} epochs={config.horizon} mechanism={config.mechanism.kind} "
                f"seed={config.seed}")

    records: List[EpochRecord] = []
    for e in range(config.horizon):
        window_start = config.start_time + e * config.epoch_length
        close_at = window_start + config.epoch_length + config.grace_seconds
        row = presence[e]
        participants = row[:n_priv]
        for k, poi in enumerate(config.pois):
            query = by_poi[poi.poi_id]
            truths = (participants == k).astype(np.int8)
            responses = privatize_cohort(query, truths, e, owner_rng)
            if responses:
                for outcome in binding.submit_batch(responses, window_start):
                    if not outcome.accepted:
                        raise protocol_error_from_name(outcome.error, outcome.detail or "")
            aggregate = binding.close_epoch(query.query_id, e, close_at)

            estimate = aggregate.estimate
            crowd = None
            wait = None
            if estimate is not None and n_priv > 0:
                crowd = estimate.y_a_clamped * config.total_population / n_priv
                wait = wait_time_estimate(crowd, poi, config.wait_cap)
            records.append(EpochRecord(
                epoch_index=e, poi_id=poi.poi_id,
                true_count=int(truths.sum()),
                population_count=int(np.count_nonzero(row == k)),
                n_responses=aggregate.n_responses,
                estimate=estimate, crowd_estimate=crowd, wait_estimate_minutes=wait,
            ))

    defined = [r for r in records if r.estimate is not None]
    covered = sum(1 for r in defined if r.estimate.ci95_low <= r.true_count <= r.estimate.ci95_high)
    coverage = covered / len(defined) if defined else 0.0

    try:
        epsilon = mechanism_epsilon(config.mechanism, strict=config.strict_epsilon)
    except InfinitePrivacyLoss:
        logger.warning("Mechanism has no finite epsilon; private cost left undefined.")
        epsilon = None

    report = SimulationReport(
        per_epoch=records,
        coverage_fraction=coverage,
        cost_comparison=compare_participation(config, epsilon),
    )
    logger.info(f"SIMULATE DONE: records={len(records)} coverage={coverage:.4f} "
                f"favored={report.cost_comparison.participation_favored}")
    return report


def run_replications(config: ScenarioConfig, n: int, workers: int = 1) -> List[SimulationReport]:
    """Independent replications with seeds seed, seed+1, ...; results in seed order."""
    configs = [config.model_copy(update={"seed": config.seed + i}) for i in range(n)]
    if workers <= 1:
        return [run_simulation(c) for c in configs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_simulation, configs))

