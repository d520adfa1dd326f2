import math
from typing import List, Optional, Sequence, Tuple

from errors import DegenerateCostModel, InfinitePrivacyLoss, InvalidEpsilonGrid
from mechanisms import rr_privacy_level
from models.cost import CostComparison, CostCurvePoint, CostParams, MechanismCost
from models.mechanism import CoinPair

TABLE2_EPSILONS: Tuple[float, ...] = (2.3979, 1.2528, 0.8873, 0.539, 0.3895)


def base_cost(params: CostParams) -> float:
    """E = error probability * W."""
    return params.congestion_error_prob * params.worst_case_wait_w


def nonprivate_cost(params: CostParams) -> float:
    """C = phi * W * N for the individuals who decline."""
    return params.deanon_fraction_phi * params.worst_case_wait_w * params.n_nonprivate


def private_cost(epsilon: float, params: CostParams) -> float:
    """C = (e^eps - 1) * E * N for the private participants."""
    if epsilon < 0:
        raise ValueError(f"epsilon must be non-negative, got {epsilon}")
    return math.expm1(epsilon) * base_cost(params) * params.n_private


def breakeven_epsilon(params: CostParams) -> float:
    """The epsilon at which private and non-private costs are equal."""
    scale = base_cost(params) * params.n_private
    if scale <= 0:
        raise DegenerateCostModel(
            f"breakeven undefined: base cost {base_cost(params)} x n_private {params.n_private} is zero"
        )
    return math.log1p(nonprivate_cost(params) / scale)


def _favored(epsilon: float, params: CostParams, breakeven: Optional[float]) -> bool:
    # strict: equal cost does not favor participation
    if breakeven is not None:
        return epsilon < breakeven
    return private_cost(epsilon, params) < nonprivate_cost(params)


def _breakeven_or_none(params: CostParams) -> Optional[float]:
    try:
        return breakeven_epsilon(params)
    except DegenerateCostModel:
        return None


def validate_epsilon_grid(epsilons: Sequence[float]) -> List[float]:
    grid = [float(e) for e in epsilons]
    if not grid:
        raise InvalidEpsilonGrid("epsilon grid is empty")
    if any(e <= 0 or not math.isfinite(e) for e in grid):
        raise InvalidEpsilonGrid(f"epsilon grid must hold positive finite values: {grid}")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise InvalidEpsilonGrid("epsilon grid must be strictly increasing")
    return grid


def epsilon_grid(start: float, stop: float, step: float) -> List[float]:
    """Inclusive grid start, start+step, ..., stop, rounded to stop float drift."""
    if step <= 0:
        raise InvalidEpsilonGrid(f"grid step must be positive, got {step}")
    decimals = max(0, -int(math.floor(math.log10(step)))) + 6
    count = int(math.floor((stop - start) / step + 1e-9)) + 1
    return validate_epsilon_grid([round(start + i * step, decimals) for i in range(max(count, 0))])


def cost_curve(epsilons: Sequence[float], params: CostParams) -> List[CostCurvePoint]:
    grid = validate_epsilon_grid(epsilons)
    breakeven = _breakeven_or_none(params)
    baseline = nonprivate_cost(params)
    return [
        CostCurvePoint(
            epsilon=eps,
            private_cost=private_cost(eps, params),
            nonprivate_cost=baseline,
            participation_favored=_favored(eps, params, breakeven),
        )
        for eps in grid
    ]


def cost_table(epsilons: Sequence[float], params: CostParams) -> List[Tuple[float, float]]:
    return [(eps, private_cost(eps, params)) for eps in epsilons]


def compare_at_epsilon(epsilon: Optional[float], params: CostParams) -> CostComparison:
    """Case 1 (decline) against Case 2 (participate privately at epsilon)."""
    breakeven = _breakeven_or_none(params)
    baseline = nonprivate_cost(params)
    if epsilon is None or not math.isfinite(epsilon):
        return CostComparison(nonprivate_cost=baseline, breakeven_epsilon=breakeven,
                              participation_favored=False)
    return CostComparison(
        epsilon=epsilon,
        nonprivate_cost=baseline,
        private_cost=private_cost(epsilon, params),
        breakeven_epsilon=breakeven,
        participation_favored=_favored(epsilon, params, breakeven),
    )


def compare_mechanisms(params: CostParams, rr_coins: Sequence[CoinPair],
                       laplace_epsilon: float) -> List[MechanismCost]:
    """
    Private cost of each randomized-response coin pair next to a centralized Laplace release.
    Laplace reaches epsilons randomized response cannot (0.0083 -> 1250 with the campus numbers).
    """
    breakeven = _breakeven_or_none(params)
    rows = []
    for coins in rr_coins:
        name = f"randomized_response(p={coins.p},q={coins.q})"
        try:
            eps = rr_privacy_level(coins).epsilon_paper
        except InfinitePrivacyLoss:
            rows.append(MechanismCost(mechanism=name, participation_favored=False))
            continue
        rows.append(MechanismCost(
            mechanism=name, epsilon=eps, private_cost=private_cost(eps, params),
            participation_favored=_favored(eps, params, breakeven),
        ))
    rows.append(MechanismCost(
        mechanism=f"laplace(epsilon={laplace_epsilon})",
        epsilon=laplace_epsilon,
        private_cost=private_cost(laplace_epsilon, params),
        participation_favored=_favored(laplace_epsilon, params, breakeven),
    ))
    return rows
