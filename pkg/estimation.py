import math
from concurrent.futures import ThreadPoolExecutor
from typing import List, Tuple

import numpy as np

from errors import DegenerateMechanism, UndefinedRelativeError
from logger import setup_logger
from mechanisms import rr_privacy_level, rr_randomize_many, rr_response_prob
from models.estimate import (
    AggregateCounts, ErrorOracle, ErrorTrialConfig, EstimateResult, UtilityPrivacyRow,
)
from models.mechanism import CoinPair
from utils.random_source import RandomSource

logger = setup_logger()

Z95 = 1.96

# The nine (p, q) pairs of the utility/privacy table
TABLE1_COINS: Tuple[Tuple[float, float], ...] = (
    (0.3, 0.3), (0.3, 0.6), (0.3, 0.9),
    (0.6, 0.3), (0.6, 0.6), (0.6, 0.9),
    (0.9, 0.3), (0.9, 0.6), (0.9, 0.9),
)


def _require_truth_coin(coins: CoinPair) -> None:
    if coins.p <= 0.0:
        raise DegenerateMechanism(f"estimator undefined for p={coins.p} (no truthful answers)")


def estimate_true_yes(agg: AggregateCounts, coins: CoinPair) -> EstimateResult:
    """Y_A = (Y-hat - (1 - p) q N) / p with a plug-in normal CI."""
    _require_truth_coin(coins)
    n = agg.n_respondents
    y_raw = (agg.yes_randomized - (1.0 - coins.p) * coins.q * n) / coins.p
    y_clamped = min(float(n), max(0.0, y_raw))

    p1 = rr_response_prob(1, coins)
    p0 = rr_response_prob(0, coins)
    variance = (y_clamped * p1 * (1.0 - p1) + (n - y_clamped) * p0 * (1.0 - p0)) / coins.p ** 2
    std = math.sqrt(max(variance, 0.0))

    return EstimateResult(
        y_a_raw=y_raw,
        y_a_clamped=y_clamped,
        std_plugin=std,
        ci95_low=y_raw - Z95 * std,
        ci95_high=y_raw + Z95 * std,
    )


def estimate_laplace_count(noisy_count: float, n: int, epsilon: float, sensitivity: float = 1.0) -> EstimateResult:
    """The noisy sum is already unbiased; Laplace(b) has std sqrt(2) * b."""
    std = math.sqrt(2.0) * sensitivity / epsilon
    return EstimateResult(
        y_a_raw=noisy_count,
        y_a_clamped=min(float(n), max(0.0, noisy_count)),
        std_plugin=std,
        ci95_low=noisy_count - Z95 * std,
        ci95_high=noisy_count + Z95 * std,
    )


def analytic_error_oracle(config: ErrorTrialConfig) -> ErrorOracle:
    coins = config.coins
    _require_truth_coin(coins)
    if config.true_yes == 0:
        raise UndefinedRelativeError("relative error needs true_yes > 0")
    p1 = rr_response_prob(1, coins)
    p0 = rr_response_prob(0, coins)
    var_y_hat = config.true_yes * p1 * (1.0 - p1) + (config.n - config.true_yes) * p0 * (1.0 - p0)
    std_exact = math.sqrt(var_y_hat) / coins.p
    # E|X - mu| = sigma * sqrt(2 / pi) under the normal approximation
    return ErrorOracle(
        std_exact=std_exact,
        expected_abs_rel_error=std_exact * math.sqrt(2.0 / math.pi) / config.true_yes,
    )


def _run_batch(truths: np.ndarray, coins: CoinPair, sources: List[RandomSource]) -> np.ndarray:
    n = truths.shape[0]
    offset = (1.0 - coins.p) * coins.q * n
    out = np.empty(len(sources), dtype=np.float64)
    for i, rng in enumerate(sources):
        y_hat = int(rr_randomize_many(truths, coins, rng).sum())
        out[i] = (y_hat - offset) / coins.p
    return out


def monte_carlo_estimates(config: ErrorTrialConfig, workers: int = 1) -> np.ndarray:
    """
    y_a_raw for each of config.runs randomize-then-estimate runs.
    Run i uses child source i of the master seed, so the result does not depend on workers.
    """
    _require_truth_coin(config.coins)
    truths = np.zeros(config.n, dtype=np.int8)
    truths[:config.true_yes] = 1
    sources = RandomSource(config.seed).spawn(config.runs)

    if workers <= 1 or config.runs < 2:
        return _run_batch(truths, config.coins, sources)

    chunk = math.ceil(config.runs / workers)
    batches = [sources[i:i + chunk] for i in range(0, config.runs, chunk)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(lambda batch: _run_batch(truths, config.coins, batch), batches))
    # merged in partition order
    return np.concatenate(parts)


def relative_error_mc(config: ErrorTrialConfig, workers: int = 1) -> float:
    """eta = mean over runs of |Y_A - Y_true| / Y_true."""
    if config.true_yes == 0:
        raise UndefinedRelativeError("relative error needs true_yes > 0")
    estimates = monte_carlo_estimates(config, workers=workers)
    return float(np.mean(np.abs(estimates - config.true_yes)) / config.true_yes)


def utility_privacy_rows(n: int = 1000, true_yes: int = 800, runs: int = 100,
                         seed: int = 0, workers: int = 1) -> List[UtilityPrivacyRow]:
    """Relative error and privacy level for each coin pair of the utility/privacy table."""
    rows = []
    pair_seeds = np.random.SeedSequence(seed).generate_state(len(TABLE1_COINS), dtype=np.uint64)
    for (p, q), pair_seed in zip(TABLE1_COINS, pair_seeds):
        coins = CoinPair(p=p, q=q)
        config = ErrorTrialConfig(n=n, true_yes=true_yes, coins=coins, runs=runs, seed=int(pair_seed))
        level = rr_privacy_level(coins)
        eta_mc = relative_error_mc(config, workers=workers)
        eta_analytic = analytic_error_oracle(config).expected_abs_rel_error
        logger.info(f"TABLE1: p={p} q={q} eta_mc={eta_mc:.4f} eta_analytic={eta_analytic:.4f} "
                    f"epsilon={level.epsilon_paper:.4f}")
        rows.append(UtilityPrivacyRow(
            p=p, q=q, eta_mc=eta_mc, eta_analytic=eta_analytic,
            epsilon_paper=level.epsilon_paper, epsilon_strict=level.epsilon_strict,
        ))
    return rows
