import math

import numpy as np
import pytest
from pydantic import ValidationError

from errors import DegenerateMechanism, UndefinedRelativeError
from estimation import (
    TABLE1_COINS, Z95, analytic_error_oracle, estimate_laplace_count, estimate_true_yes,
    monte_carlo_estimates, relative_error_mc, utility_privacy_rows,
)
from models.estimate import AggregateCounts, ErrorTrialConfig
from models.mechanism import CoinPair

N = 1000
TRUE_YES = 800
RUNS = 10**4


def _config(p, q, runs=RUNS, seed=2017, true_yes=TRUE_YES):
    return ErrorTrialConfig(n=N, true_yes=true_yes, coins=CoinPair(p=p, q=q), runs=runs, seed=seed)


@pytest.fixture(scope="module")
def estimates_by_pair():
    return {(p, q): monte_carlo_estimates(_config(p, q), workers=4) for p, q in TABLE1_COINS}


@pytest.fixture(scope="module")
def eta_by_pair(estimates_by_pair):
    return {pair: float(np.mean(np.abs(est - TRUE_YES)) / TRUE_YES) for pair, est in estimates_by_pair.items()}


def test_estimate_at_expected_count():
    result = estimate_true_yes(AggregateCounts(yes_randomized=450, n_respondents=N), CoinPair(p=0.3, q=0.3))
    assert result.y_a_raw == pytest.approx(800.0)
    assert result.y_a_clamped == pytest.approx(800.0)
    assert result.ci95_low < 800.0 < result.ci95_high
    assert result.ci95_high - result.ci95_low == pytest.approx(2 * Z95 * result.std_plugin)


def test_estimate_all_no_population():
    coins = CoinPair(p=0.6, q=0.5)
    result = estimate_true_yes(AggregateCounts(yes_randomized=200, n_respondents=N), coins)
    assert result.y_a_raw == pytest.approx(0.0, abs=1e-9)


def test_estimator_inverts_every_expected_count():
    coins = CoinPair(p=0.5, q=0.5)
    # P1 = 0.75, P0 = 0.25: the expected yes count is integral when true_yes is even
    for true_yes in range(0, 101, 2):
        expected_yes = true_yes * 0.75 + (100 - true_yes) * 0.25
        result = estimate_true_yes(AggregateCounts(yes_randomized=int(expected_yes), n_respondents=100), coins)
        assert result.y_a_raw == pytest.approx(true_yes)


def test_estimate_clamps_but_keeps_raw():
    result = estimate_true_yes(AggregateCounts(yes_randomized=0, n_respondents=N), CoinPair(p=0.3, q=0.3))
    assert result.y_a_raw < 0
    assert result.y_a_clamped == 0.0


def test_degenerate_truth_coin():
    with pytest.raises(DegenerateMechanism):
        estimate_true_yes(AggregateCounts(yes_randomized=10, n_respondents=N), CoinPair(p=0.0, q=0.5))


def test_aggregate_counts_validation():
    with pytest.raises(ValidationError):
        AggregateCounts(yes_randomized=1001, n_respondents=N)
    with pytest.raises(ValidationError):
        AggregateCounts(yes_randomized=0, n_respondents=0)


def test_analytic_oracle_examples():
    low = analytic_error_oracle(_config(0.3, 0.3))
    assert low.std_exact == pytest.approx(math.sqrt(233.1) / 0.3)
    assert low.std_exact == pytest.approx(50.90, abs=0.01)
    assert low.expected_abs_rel_error == pytest.approx(0.0507, abs=1e-4)
    high = analytic_error_oracle(_config(0.9, 0.9))
    assert high.std_exact == pytest.approx(5.48, abs=0.01)


def test_oracle_needs_nonzero_truth():
    with pytest.raises(UndefinedRelativeError):
        analytic_error_oracle(_config(0.3, 0.3, true_yes=0))
    with pytest.raises(UndefinedRelativeError):
        relative_error_mc(_config(0.3, 0.3, runs=5, true_yes=0))


def test_mc_matches_oracle_for_every_pair(eta_by_pair):
    for (p, q), eta in eta_by_pair.items():
        oracle = analytic_error_oracle(_config(p, q)).expected_abs_rel_error
        assert abs(eta - oracle) < 0.10 * oracle, (p, q, eta, oracle)


def test_eta_monotone_in_both_coins(eta_by_pair):
    ps = sorted({p for p, _ in TABLE1_COINS})
    qs = sorted({q for _, q in TABLE1_COINS})
    for q in qs:
        etas = [eta_by_pair[(p, q)] for p in ps]
        assert all(a > b for a, b in zip(etas, etas[1:])), (q, etas)
    for p in ps:
        etas = [eta_by_pair[(p, q)] for q in qs]
        assert all(a > b for a, b in zip(etas, etas[1:])), (p, etas)


def test_estimator_unbiased(estimates_by_pair):
    for (p, q), estimates in estimates_by_pair.items():
        std_exact = analytic_error_oracle(_config(p, q)).std_exact
        assert abs(estimates.mean() - TRUE_YES) < 4 * std_exact / math.sqrt(RUNS), (p, q)


def test_relative_error_matches_estimates():
    config = _config(0.6, 0.6, runs=50, seed=8)
    estimates = monte_carlo_estimates(config)
    assert relative_error_mc(config) == pytest.approx(np.mean(np.abs(estimates - TRUE_YES)) / TRUE_YES)


def test_truthful_coins_have_no_error():
    assert relative_error_mc(_config(1.0, 0.5, runs=20)) == 0.0


def test_worker_count_does_not_change_results():
    config = _config(0.6, 0.3, runs=37, seed=5)
    sequential = monte_carlo_estimates(config, workers=1)
    parallel = monte_carlo_estimates(config, workers=4)
    assert np.array_equal(sequential, parallel)


def test_laplace_count_estimate():
    result = estimate_laplace_count(812.5, N, epsilon=1.0)
    assert result.y_a_raw == 812.5
    assert result.std_plugin == pytest.approx(math.sqrt(2.0))
    clamped = estimate_laplace_count(-3.0, N, epsilon=0.5)
    assert clamped.y_a_clamped == 0.0


def test_utility_privacy_rows_deterministic():
    first = utility_privacy_rows(runs=3, seed=11)
    second = utility_privacy_rows(runs=3, seed=11)
    assert [(r.p, r.q) for r in first] == list(TABLE1_COINS)
    assert first == second
    assert first[0].epsilon_paper == pytest.approx(0.8873, abs=1e-4)
