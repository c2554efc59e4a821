import logging

from enum import Enum
from typing import Dict, Tuple

import numpy as np

from .core import OffspringLaw, RandomSource, Terminator, generating_value
from .errors import ConvergenceError


MAX_ITERATIONS = 100_000
STEP_TOLERANCE = 1e-14
RESIDUAL_TOLERANCE = 1e-10
MONOTONE_SLACK = 1e-15

logger = logging.getLogger(__name__)


class Regime(Enum):
    subcritical = "subcritical"
    critical = "critical"
    supercritical = "supercritical"


class GwClassification:
    def __init__(
        self,
        mean: float,
        regime: Regime,
        extinction_prob: float,
        iterations: int,
        converged: bool,
        aitken: float,
    ):
        self.mean = mean
        self.regime = regime
        self.extinction_prob = extinction_prob
        self.iterations = iterations
        self.converged = converged
        # secondary estimate, useful when the monotone iteration crawls near criticality
        self.aitken = aitken

    def __str__(self):
        return (
            f"{self.regime.value}: mean={self.mean:.6g}, q={self.extinction_prob:.12g}, "
            f"iterations={self.iterations}"
        )

    def to_json(self) -> Dict:
        return {
            "mean": self.mean,
            "regime": self.regime.value,
            "extinction_prob": self.extinction_prob,
            "iterations": self.iterations,
            "converged": self.converged,
            "aitken": self.aitken,
        }


def _regime(mean: float) -> Regime:
    if mean > 1.0:
        return Regime.supercritical
    if mean < 1.0:
        return Regime.subcritical
    return Regime.critical


def _iterate(law: OffspringLaw) -> Tuple[float, int, float, float]:
    """
    Monotone iteration s_{k+1} = G(s_k) from s_0 = 0
    Returns the last iterate, the iteration count, the last fixed point residual and the Aitken estimate
    """
    history = [0.0]
    s = 0.0
    k = 0
    while k < MAX_ITERATIONS:
        s_next = generating_value(law, s)
        k += 1
        # iterates are nondecreasing and bounded by 1
        if s_next < s - MONOTONE_SLACK or s_next > 1.0 + MONOTONE_SLACK:
            raise ConvergenceError(f"iteration left [s_k, 1] at step {k}: {s} -> {s_next}", k, abs(s_next - s))
        s_next = min(s_next, 1.0)
        history = (history + [s_next])[-3:]
        if abs(s_next - s) < STEP_TOLERANCE:
            s = s_next
            break
        s = s_next

    aitken = s
    if len(history) == 3:
        s0, s1, s2 = history
        denominator = (s2 - s1) - (s1 - s0)
        if denominator != 0.0:
            aitken = min(1.0, max(0.0, s2 - (s2 - s1) ** 2 / denominator))
    residual = abs(generating_value(law, s) - s)
    return s, k, residual, aitken


def classify(law: OffspringLaw) -> GwClassification:
    mean = law.mean
    regime = _regime(mean)
    s, iterations, residual, aitken = _iterate(law)
    converged = iterations < MAX_ITERATIONS or residual <= RESIDUAL_TOLERANCE

    if mean <= 1.0 and law.p(1) != 1.0:
        # minimal fixed point is exactly 1 here; the iterate only approaches it
        q = 1.0
    else:
        q = s
        if not converged:
            logger.warning(
                f"classify: iteration cap hit, residual {residual:.3g}, Aitken estimate {aitken:.12g}"
            )
    logger.debug(f"classify: {law} -> {regime.value}, iterate {s:.15g} after {iterations} steps")
    return GwClassification(mean, regime, q, iterations, converged, aitken)


def extinction_probability(law: OffspringLaw, strict: bool = False) -> float:
    """
    Minimal fixed point q of s -> sum p_n s^n
    With strict=True a non-converged iteration raises instead of being flagged
    """
    result = classify(law)
    if strict and not result.converged:
        raise ConvergenceError(
            "extinction probability iteration did not converge",
            iterations=result.iterations,
        )
    return result.extinction_prob


def simulate_generations(
    law: OffspringLaw,
    replicas: int,
    horizon: int,
    cap: int,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Batched single-type Galton-Watson populations from one ancestor each
    Returns the final counts and the terminator codes (0 horizon, 1 extinct, 2 cap hit)
    """
    counts = np.ones(replicas, dtype=np.int64)
    codes = np.zeros(replicas, dtype=np.int8)
    active = np.ones(replicas, dtype=bool)
    for _ in range(horizon):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        litters = rng.multinomial(counts[idx], law.probs)
        counts[idx] = litters @ law.counts
        extinct = counts[idx] == 0
        capped = counts[idx] >= cap
        codes[idx[extinct]] = 1
        codes[idx[capped]] = 2
        active[idx[extinct | capped]] = False
    return counts, codes


TERMINATOR_CODES = {0: Terminator.horizon, 1: Terminator.extinct, 2: Terminator.cap_hit}


def simulate_extinction_frequency(
    law: OffspringLaw,
    replicas: int,
    horizon: int = 200,
    cap: int = 1000,
    seed: int = 0,
) -> Tuple[float, float]:
    """
    Monte Carlo extinction frequency with its binomial standard error
    """
    _, codes = simulate_generations(law, replicas, horizon, cap, RandomSource(seed).generator())
    freq = float(np.mean(codes == 1))
    return freq, float(np.sqrt(freq * (1.0 - freq) / replicas))
