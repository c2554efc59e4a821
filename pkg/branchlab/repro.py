import logging
import math

from enum import Enum
from fractions import Fraction
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from scipy.special import logsumexp

from .bmc import BmcSpec
from .bmp import BmpConfig, survival_probability_mc
from .core import (
    IndependentDisplacement,
    MonteCarloEstimate,
    OffspringLaw,
    RandomSource,
    State,
    block_source,
    map_blocks,
)
from .errors import ValidationError
from .fields import Constant, InvSqrt, Occupation
from .motion import BINARY, DEATH, Boundary, BranchChannel, BranchFieldSpec, MotionSpec


BRANCH_FACTOR = 4
MAX_EXACT_TIME = 4**6
# 8^{-t} stays a normal float up to the crossroad 4^5
MAX_SURVIVAL_HORIZON = 4**5
DOWN = "down"
UPPER = "upper"
ESS_WARNING = 0.01

Rational = Union[int, Fraction]

logger = logging.getLogger(__name__)


def is_crossroad(t: int) -> bool:
    """
    t is a power of 4 (1, 4, 16, ...)
    """
    return t >= 1 and t & (t - 1) == 0 and (t.bit_length() - 1) % 2 == 0


def switch_probability(n: int) -> Fraction:
    return Fraction(1, 8**n)


class MutationGraph:
    """
    Layered graph on states (t, track) with track "down" or "upper"
    Every particle has 4 children. At a crossroad t = 4^k each child of a down particle takes the down
    track with probability 8^{-t}, independently of its siblings, and the upper track otherwise. Upper
    particles have no children at the time just before the next crossroad, so the upper track between two
    crossroads is a dead end.
    """

    def __init__(self):
        self.logger = logging.getLogger(__name__)
        self.root: State = (0, DOWN)

    def __str__(self):
        return "MutationGraph"

    def law_at(self, state: State) -> OffspringLaw:
        t, track = state
        if track == UPPER and is_crossroad(t + 1):
            return DEATH
        switch = float(switch_probability(t)) if track == DOWN and is_crossroad(t) else None

        def steps(parent: State) -> List[Tuple[State, float]]:
            if switch is None:
                return [((t + 1, track), 1.0)]
            return [((t + 1, DOWN), switch), ((t + 1, UPPER), 1.0 - switch)]

        return OffspringLaw([(BRANCH_FACTOR, 1.0)], IndependentDisplacement(steps, {"kind": "mutation"}))

    def spec(self) -> BmcSpec:
        return BmcSpec(self.law_at, "mutation_graph")

    def dense(self, depth: int) -> np.ndarray:
        """
        Expectation matrix of the states reachable from the root within depth steps
        """
        return self.spec().kernel.reachable(self.root, depth).dense()

    def expected_tracks(self, n_max: int) -> List[Tuple[Fraction, Fraction]]:
        """
        Exact expected (down, upper) counts at times 0..n_max
        """
        if n_max > MAX_EXACT_TIME:
            raise ValidationError(f"must be <= {MAX_EXACT_TIME}, got {n_max}", "n_max")
        down, upper = Fraction(1), Fraction(0)
        tracks = [(down, upper)]
        for t in range(n_max):
            litter_down = BRANCH_FACTOR * down
            upper = Fraction(0) if is_crossroad(t + 1) else BRANCH_FACTOR * upper
            if is_crossroad(t):
                p = switch_probability(t)
                down, upper = litter_down * p, upper + litter_down * (1 - p)
            else:
                down = litter_down
            tracks.append((down, upper))
        return tracks


def mutation_expected_counts(n_max: int) -> List[Fraction]:
    """
    Exact E[N_t] for t = 0..n_max on the mutation graph
    """
    return [down + upper for down, upper in MutationGraph().expected_tracks(n_max)]


def _log_fraction(value: Fraction) -> float:
    return math.log(value.numerator) - math.log(value.denominator)


def mutation_growth(n_max: int) -> Dict:
    """
    Exponents a_t^{1/t} of the exact expectations and their extremes over the window [n_max/2, n_max]
    """
    counts = mutation_expected_counts(n_max)
    exponents = [math.exp(_log_fraction(c) / t) for t, c in enumerate(counts) if t > 0]
    first = max(1, math.ceil(n_max / 2))
    window = exponents[first - 1 :]
    limsup, liminf = max(window), min(window)
    logger.info(f"mutation_growth: window [{first}, {n_max}] limsup {limsup:.6g}, liminf {liminf:.6g}")
    return {
        "n_max": n_max,
        "exponents": exponents,
        "window": [first, n_max],
        "limsup_window": limsup,
        "liminf_window": liminf,
        "argmax": first + window.index(limsup),
        "argmin": first + window.index(liminf),
    }


def _binomial_zero(d: int, p: float) -> float:
    """
    log P(K = 0) for K ~ Bin(d, p)
    """
    return float(d) * math.log1p(-p)


def _binomial_inverse(d: int, p: float, u: float, at_least_one: bool) -> int:
    """
    Inverse-cdf draw of K ~ Bin(d, p), or of K given K >= 1, for counts beyond the range of numpy
    """
    log_zero = _binomial_zero(d, p)
    ratio = p / (1.0 - p)
    if at_least_one:
        # zero-truncated law: start the ladder at k = 1
        k = 1
        log_first = math.log(float(d)) + math.log(p) + (float(d) - 1.0) * math.log1p(-p)
        prob = math.exp(log_first - math.log(-math.expm1(log_zero)))
    else:
        k = 0
        prob = math.exp(log_zero)
    cdf = prob
    while u > cdf and k < d:
        prob *= (d - k) / (k + 1) * ratio
        k += 1
        cdf += prob
        if prob == 0.0:
            break
    return k


def _crossroads(horizon: int) -> List[int]:
    if not is_crossroad(horizon) or not 4 <= horizon <= MAX_SURVIVAL_HORIZON:
        raise ValidationError(f"horizon must be a power of 4 in [4, {MAX_SURVIVAL_HORIZON}], got {horizon}", "horizon")
    crossroads, n = [], 1
    while n < horizon:
        crossroads.append(n)
        n *= 4
    return crossroads


class _DownTrack:
    """
    Lumped down-track population: the D down particles at crossroad n have 4D children, K ~ Bin(4D, 8^{-n})
    of them take the down track, and those grow to K 4^{3n-1} particles at the next crossroad 4n.
    """

    def __init__(self, crossroads: List[int]):
        self.crossroads = crossroads

    def run(self, uniforms: np.ndarray, conditioned: bool) -> Tuple[List[int], List[float]]:
        """
        Down counts at each crossroad after the first, with the running conditioning weight
        """
        d = BRANCH_FACTOR
        weight = 1.0
        counts, weights = [], []
        for n, u in zip(self.crossroads, uniforms):
            p = float(switch_probability(n))
            children = BRANCH_FACTOR * d
            if children > 4 ** (n + 1):
                raise ValidationError(f"{children} children at time {n + 1} exceed 4^{n + 1}", "mutation_graph")
            if conditioned:
                weight *= -math.expm1(_binomial_zero(children, p))
                k = _binomial_inverse(children, p, float(u), at_least_one=True)
            else:
                k = _binomial_inverse(children, p, float(u), at_least_one=False)
            d = k * 4 ** (3 * n - 1)
            counts.append(d)
            weights.append(weight)
        return counts, weights


def mutation_survival_curve(
    horizons: Sequence[int],
    replicas: int,
    rng: RandomSource,
    threads: int = 1,
    block_size: int = 1024,
) -> Dict:
    """
    Survival to each horizon (a power of 4) on coupled paths: raw frequency and the conditioned estimator
    The conditioned estimator forces at least one switching child at every crossroad and carries the product
    of those probabilities as a weight, so it stays positive where the raw frequency is 0.
    """
    horizons = sorted(int(h) for h in horizons)
    crossroads = _crossroads(horizons[-1])
    columns = [len(_crossroads(h)) - 1 for h in horizons]
    track = _DownTrack(crossroads)

    def run_block(block: int, size: int) -> Tuple[np.ndarray, np.ndarray]:
        generator = block_source(rng, block).generator()
        uniforms = generator.random((size, 2, len(crossroads)))
        alive = np.zeros((size, len(horizons)), dtype=bool)
        weights = np.zeros((size, len(horizons)))
        for i in range(size):
            counts, _ = track.run(uniforms[i, 0], conditioned=False)
            _, path_weights = track.run(uniforms[i, 1], conditioned=True)
            alive[i] = [counts[c] > 0 for c in columns]
            weights[i] = [path_weights[c] for c in columns]
        return alive, weights

    results = map_blocks(run_block, replicas, block_size, threads)
    alive = np.vstack([r[0] for r in results])
    weights = np.vstack([r[1] for r in results])
    raw = [MonteCarloEstimate.from_frequency(int(hits), replicas) for hits in alive.sum(axis=0)]
    conditioned = [MonteCarloEstimate.from_samples(weights[:, j]) for j in range(len(horizons))]
    for h, r, c in zip(horizons, raw, conditioned):
        logger.info(f"mutation_survival_curve: horizon {h} raw {r}, conditioned {c}")
    return {
        "horizons": horizons,
        "raw": [e.to_json() for e in raw],
        "conditioned": [e.to_json() for e in conditioned],
        # union bound over the at most 4^{n+1} children leaving crossroad n
        "switch_bounds": [min(1.0, 4.0 * 2.0**-n) for n in crossroads],
    }


def mutation_survival_mc(
    horizon: int,
    replicas: int,
    rng: RandomSource,
    threads: int = 1,
) -> MonteCarloEstimate:
    """
    Frequency of survival to the horizon; metadata carries the conditioned estimate
    """
    curve = mutation_survival_curve([horizon], replicas, rng, threads)
    raw = curve["raw"][0]
    return MonteCarloEstimate(
        raw["estimate"],
        raw["stderr"],
        replicas,
        {"horizon": horizon, "conditioned": curve["conditioned"][0]},
    )


class IntervalConstruction:
    """
    Alternating intervals A = U [S_k, S_k + a_{k+1}) and B = U [S_k + a_{k+1}, S_{k+1}) for k < n
    S_0 = 0, a_1 = 1, S_1 = 2, a_{k+1} = 4 S_k, S_{k+1} = S_k + 2 a_{k+1}, all exact integers.
    """

    def __init__(self, n: int):
        if n < 1:
            raise ValidationError(f"must be >= 1, got {n}", "n")
        self.n = n
        self.s = [0]
        self.a = [1]  # a[k] = a_{k+1}
        for k in range(n):
            if k > 0:
                self.a.append(4 * self.s[k])
            self.s.append(self.s[k] + 2 * self.a[k])

    def __str__(self):
        return f"IntervalConstruction(n={self.n}, S_n={self.s[-1]})"

    def S(self, k: int) -> int:
        return self.s[k]

    def a_next(self, k: int) -> int:
        """
        a_{k+1}
        """
        return self.a[k] if k < len(self.a) else 4 * self.s[k]

    def closed_form_holds(self) -> bool:
        """
        S_k = 2 9^{k-1} and S_k + a_{k+1} = 10 9^{k-1} for 1 <= k <= n
        """
        return all(
            self.s[k] == 2 * 9 ** (k - 1) and self.s[k] + self.a_next(k) == 10 * 9 ** (k - 1)
            for k in range(1, self.n + 1)
        )

    def intervals(self) -> Tuple[List[Tuple[int, int]], List[Tuple[int, int]]]:
        a_set = [(self.s[k], self.s[k] + self.a[k]) for k in range(self.n)]
        b_set = [(self.s[k] + self.a[k], self.s[k + 1]) for k in range(self.n)]
        return a_set, b_set

    def breakpoints(self) -> List[int]:
        """
        [S_0, S_0 + a_1, S_1, S_1 + a_2, ..., S_n]: an even position opens an A interval, an odd one a B interval
        """
        points = []
        for k in range(self.n):
            points.extend([self.s[k], self.s[k] + self.a[k]])
        points.append(self.s[self.n])
        return points

    def occupation_integral(self, t: Rational) -> Fraction:
        """
        Exact integral of 1_A - 1_B over [0, t] for 0 <= t <= S_n
        """
        t = Fraction(t)
        if t < 0 or t > self.s[self.n]:
            raise ValidationError(f"t={t} is outside [0, S_n={self.s[self.n]}]", "t")
        total = Fraction(0)
        for (a_left, a_right), (b_left, b_right) in zip(*self.intervals()):
            total += max(Fraction(0), min(t, a_right) - a_left)
            total -= max(Fraction(0), min(t, b_right) - b_left)
        return total

    def rescaled_a_measure(self) -> Fraction:
        """
        Lebesgue measure of A cut at S_n and rescaled by 1 / S_n
        """
        return Fraction(sum(self.a[: self.n]), self.s[self.n])


def rescaled_a_measure_limit(terms: int = 64) -> Tuple[Fraction, Fraction]:
    """
    Partial sum of 4 sum_{k >= 1} 9^{-k} and its limit 1/2
    """
    partial = 4 * sum(Fraction(1, 9**k) for k in range(1, terms + 1))
    limit = Fraction(4, 8)
    logger.info(
        f"rescaled A-set measure: 4 sum 9^-k = {limit} (partial {float(partial):.12g}); "
        f"the series is positive, a value of -1/2 for it is a sign misprint"
    )
    return partial, limit


def interval_time_averages(n: int) -> Tuple[Fraction, Fraction]:
    """
    Time averages of 1_A - 1_B along s -> s over [0, S_n] and over [0, S_n + a_{n+1}]
    """
    construction = IntervalConstruction(n + 1)
    s_n = construction.S(n)
    t = s_n + construction.a_next(n)
    return construction.occupation_integral(s_n) / s_n, construction.occupation_integral(t) / t


class Horizon(Enum):
    s_n = "S_n"
    s_n_plus_a = "S_n_plus_a"


def counterexample_fk_mc(
    sigma: float,
    kappa: float,
    n: int,
    replicas: int,
    rng: RandomSource,
    horizon: Horizon = Horizon.s_n_plus_a,
    dt: float = 0.01,
    threads: int = 1,
    block_size: int = 1024,
) -> MonteCarloEstimate:
    """
    E[exp(kappa T + int_0^T (1_A - 1_B)(X_s) ds)] for X_t = sigma B_t + t, in log space
    T is S_n or S_n + a_{n+1}; sigma = 0 gives the exact deterministic value. metadata["log_estimate"]
    holds the log of the estimate.
    """
    if not 1 <= n <= 3:
        raise ValidationError(f"must lie in [1, 3], got {n}", "n")
    if sigma < 0:
        raise ValidationError(f"must be >= 0, got {sigma}", "sigma")
    construction = IntervalConstruction(n + 1)
    t_end = construction.S(n) + (construction.a_next(n) if horizon is Horizon.s_n_plus_a else 0)
    metadata = {"sigma": sigma, "kappa": kappa, "n": n, "T": t_end}

    if sigma == 0:
        exponent = kappa * t_end + float(construction.occupation_integral(t_end))
        metadata.update({"log_estimate": exponent, "ess": float(replicas)})
        return MonteCarloEstimate(math.exp(exponent), 0.0, replicas, metadata)

    potential = Occupation(n + 1)
    steps = int(round(t_end / dt))

    def run_block(block: int, size: int) -> np.ndarray:
        generator = block_source(rng, block).generator()
        x = np.zeros(size)
        integral = np.zeros(size)
        for _ in range(steps):
            integral += potential(x) * dt
            x += dt + sigma * math.sqrt(dt) * generator.standard_normal(size)
        return kappa * t_end + integral

    exponents = np.concatenate(map_blocks(run_block, replicas, block_size, threads))
    log_mean = float(logsumexp(exponents) - math.log(replicas))
    weights = np.exp(exponents - exponents.max())
    ess = float(weights.sum() ** 2 / np.sum(weights**2))
    if ess < ESS_WARNING * replicas:
        logger.warning(f"counterexample_fk_mc: effective sample size {ess:.1f} of {replicas}")
    scale = math.exp(float(exponents.max()))
    stderr = scale * float(np.std(weights, ddof=1)) / math.sqrt(replicas) if replicas > 1 else 0.0
    metadata.update({"log_estimate": log_mean, "ess": ess, "dt": dt})
    return MonteCarloEstimate(math.exp(log_mean), stderr, replicas, metadata)


class CriticalityMode(Enum):
    branching_g = "branching_g"
    killing_g = "killing_g"
    branching_g_minus_eps = "branching_g_minus_eps"
    killing_g_plus_eps = "killing_g_plus_eps"


CRITICALITY_DRIFT = 2.0


def criticality_branching(mode: CriticalityMode, epsilon: float = 0.1) -> BranchFieldSpec:
    """
    Binary branching or killing at rate g(x) = x^{-1/2} on x >= 1, optionally perturbed by a constant epsilon
    """
    g = InvSqrt(1.0, 1.0)
    if mode is CriticalityMode.branching_g:
        return BranchFieldSpec([BranchChannel(g, BINARY)])
    if mode is CriticalityMode.killing_g:
        return BranchFieldSpec([BranchChannel(g, DEATH)])
    if mode is CriticalityMode.branching_g_minus_eps:
        return BranchFieldSpec([BranchChannel(g, BINARY), BranchChannel(Constant(epsilon), DEATH)])
    return BranchFieldSpec([BranchChannel(g, DEATH), BranchChannel(Constant(epsilon), BINARY)])


def criticality_motion(horizon: float) -> MotionSpec:
    """
    dX = 2 dt + dW with a reflecting far wall at 10 horizon drift, out of reach by the horizon
    """
    right = 10.0 * horizon * CRITICALITY_DRIFT
    return MotionSpec.brownian(right=right, drift=CRITICALITY_DRIFT, right_boundary=Boundary.reflecting)


def _killing_weight(
    start: float, cfg: BmpConfig, rng: RandomSource, threads: int
) -> MonteCarloEstimate:
    """
    E[exp(-int_0^t g(X_s) ds)] over single-particle paths: the survival probability given the path
    """
    g = InvSqrt(1.0, 1.0)
    motion = criticality_motion(cfg.horizon)

    def run_block(block: int, size: int) -> np.ndarray:
        generator = block_source(rng, block).generator()
        x = np.full(size, float(start))
        integral = np.zeros(size)
        for _ in range(cfg.n_steps):
            integral += g(x) * cfg.dt
            x += CRITICALITY_DRIFT * cfg.dt + math.sqrt(cfg.dt) * generator.standard_normal(size)
            x = np.where(x > motion.right, 2.0 * motion.right - x, x)
        return np.exp(-integral)

    samples = np.concatenate(map_blocks(run_block, cfg.replicas, cfg.block_size, threads))
    return MonteCarloEstimate.from_samples(samples)


def criticality_example_mc(
    mode: CriticalityMode,
    horizon: float,
    replicas: int,
    rng: RandomSource,
    dt: float = 0.02,
    cap: int = 1000,
    epsilon: float = 0.1,
    start: float = 1.0,
    threads: int = 1,
) -> MonteCarloEstimate:
    """
    Survival frequency to the horizon for one branching/killing mode; the killing-only mode also reports
    the path-conditional survival E[exp(-int g)] under metadata["conditional"]
    """
    if horizon < 100:
        raise ValidationError(f"must be >= 100, got {horizon}", "horizon")
    cfg = BmpConfig(dt=dt, horizon=horizon, cap=cap, replicas=replicas, seed=rng.seed)
    estimate = survival_probability_mc(
        criticality_motion(horizon), criticality_branching(mode, epsilon), start, cfg, rng, threads
    )
    estimate.metadata.update({"mode": mode.value, "epsilon": epsilon, "start": start})
    if mode is CriticalityMode.killing_g:
        estimate.metadata["conditional"] = _killing_weight(start, cfg, rng, threads).to_json()
    logger.info(f"criticality_example_mc: {mode.value} horizon {horizon}: {estimate}")
    return estimate
