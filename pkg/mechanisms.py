import math

import numpy as np

from errors import InfinitePrivacyLoss
from models.mechanism import (
    CoinPair, DpRatioCheck, LaplaceSpec, MechanismSpec, PrivacyLevel, RandomizedResponseSpec,
)
from utils.random_source import RandomSource

# Slack for comparing a likelihood ratio against e^epsilon
RATIO_TOLERANCE = 1e-12


def rr_randomize(truth: int, coins: CoinPair, rng: RandomSource) -> int:
    """
    Two-coin randomized response for one data owner.
    First coin heads (prob p): answer truthfully. Otherwise report the second coin (heads prob q).
    """
    if truth not in (0, 1):
        raise ValueError(f"truth must be 0 or 1, got {truth}")
    if rng.uniform() < coins.p:
        return int(truth)
    return int(rng.uniform() < coins.q)


def rr_randomize_many(truths: np.ndarray, coins: CoinPair, rng: RandomSource) -> np.ndarray:
    """Vectorized rr_randomize. Consumes two uniforms per owner."""
    truths = np.asarray(truths, dtype=np.int8)
    first = rng.uniforms(truths.shape[0])
    second = rng.uniforms(truths.shape[0])
    forced = (second < coins.q).astype(np.int8)
    return np.where(first < coins.p, truths, forced).astype(np.int8)


def rr_response_prob(truth: int, coins: CoinPair) -> float:
    """P(response = 1 | truth)."""
    forced_yes = (1.0 - coins.p) * coins.q
    if truth == 1:
        return coins.p + forced_yes
    if truth == 0:
        return forced_yes
    raise ValueError(f"truth must be 0 or 1, got {truth}")


def _response_probs(coins: CoinPair):
    p1 = rr_response_prob(1, coins)
    p0 = rr_response_prob(0, coins)
    if p0 <= 0.0 or 1.0 - p1 <= 0.0:
        raise InfinitePrivacyLoss(
            f"coins p={coins.p} q={coins.q}: a response is impossible under one truth value "
            f"(P(1|1)={p1}, P(1|0)={p0})"
        )
    return p1, p0


def rr_privacy_level(coins: CoinPair) -> PrivacyLevel:
    p1, p0 = _response_probs(coins)
    epsilon_paper = math.log(p1 / p0)
    epsilon_no = math.log((1.0 - p0) / (1.0 - p1))
    return PrivacyLevel(epsilon_paper=epsilon_paper, epsilon_strict=max(epsilon_paper, epsilon_no))


def dp_ratio_check(coins: CoinPair) -> DpRatioCheck:
    """
    Single-record check of the DP inequality: every output-probability ratio between
    neighbouring truths must stay within e^epsilon_strict.
    """
    level = rr_privacy_level(coins)
    p1, p0 = _response_probs(coins)
    ratios = (
        p1 / p0, p0 / p1,  # output "yes"
        (1.0 - p0) / (1.0 - p1), (1.0 - p1) / (1.0 - p0),  # output "no"
    )
    max_ratio = max(ratios)
    bound = math.exp(level.epsilon_strict)
    return DpRatioCheck(
        max_observed_ratio=max_ratio,
        satisfies=max_ratio <= bound + RATIO_TOLERANCE * max(1.0, bound),
    )


def laplace_from_uniform(u: float, scale: float) -> float:
    """Inverse CDF of Laplace(0, scale) at u in (0, 1)."""
    if scale <= 0:
        raise ValueError(f"Laplace scale must be positive, got {scale}")
    if not 0.0 < u < 1.0:
        raise ValueError(f"u must lie in (0, 1), got {u}")
    centered = u - 0.5
    return -scale * math.copysign(1.0, centered) * math.log1p(-2.0 * abs(centered))


def laplace_sample(scale: float, rng: RandomSource) -> float:
    return laplace_from_uniform(float(rng.open_uniforms(1)[0]), scale)


def laplace_samples(scale: float, rng: RandomSource, size: int) -> np.ndarray:
    if scale <= 0:
        raise ValueError(f"Laplace scale must be positive, got {scale}")
    centered = rng.open_uniforms(size) - 0.5
    return -scale * np.sign(centered) * np.log1p(-2.0 * np.abs(centered))


def laplace_privatize(true_count: float, epsilon: float, sensitivity: float, rng: RandomSource) -> float:
    """R = a + n with n ~ Laplace(sensitivity / epsilon)."""
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    return true_count + laplace_sample(sensitivity / epsilon, rng)


def mechanism_epsilon(spec: MechanismSpec, strict: bool = False) -> float:
    """Realized epsilon of a configured mechanism."""
    if isinstance(spec, RandomizedResponseSpec):
        level = rr_privacy_level(spec.coins)
        return level.epsilon_strict if strict else level.epsilon_paper
    if isinstance(spec, LaplaceSpec):
        return spec.epsilon
    raise TypeError(f"Unknown mechanism: {spec!r}")
