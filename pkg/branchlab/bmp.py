import logging
import math

from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from scipy import sparse, stats
from scipy.linalg import expm
from scipy.optimize import brentq

from .bmc import ExpectationKernel
from .core import (
    MonteCarloEstimate,
    PopulationTrace,
    RandomLike,
    RandomSource,
    as_generator,
    block_source,
    map_blocks,
)
from .errors import ConvergenceError, DomainError, ValidationError
from .fields import Field
from .fkpp import DEFAULT_DX, BranchPotential, expected_mass_trajectory, large_box
from .gw import TERMINATOR_CODES
from .motion import Boundary, BranchChannel, BranchFieldSpec, MotionKind, MotionSpec
from .particles import ParticleSystem
from .spectral import EigenvalueEstimate, Method


DEFAULT_BLOCK_SIZE = 256
CENSORED_WARNING = 0.01
TREE_TAIL_CHUNK = 4096
MAX_TREE_LEAVES = 10**8
DEFAULT_SKELETON_CELLS = 32

# replica outcome codes, shared with gw.TERMINATOR_CODES
RUNNING, EXTINCT, CAPPED = 0, 1, 2

logger = logging.getLogger(__name__)


class BmpConfig:
    """
    Time step, horizon, particle cap, replica count and seed of a continuous-time Monte Carlo run
    """

    def __init__(
        self,
        dt: float = 0.01,
        horizon: float = 10.0,
        cap: int = 10_000,
        replicas: int = 1000,
        seed: int = 0,
        block_size: int = DEFAULT_BLOCK_SIZE,
    ):
        if not dt > 0:
            raise ValidationError(f"must be > 0, got {dt}", "dt")
        if horizon < 0:
            raise ValidationError(f"must be >= 0, got {horizon}", "horizon")
        if cap < 1:
            raise ValidationError(f"must be >= 1, got {cap}", "cap")
        if replicas < 1:
            raise ValidationError(f"must be >= 1, got {replicas}", "replicas")
        if block_size < 1:
            raise ValidationError(f"must be >= 1, got {block_size}", "block_size")
        self.dt = float(dt)
        self.horizon = float(horizon)
        self.cap = int(cap)
        self.replicas = int(replicas)
        self.seed = int(seed)
        self.block_size = int(block_size)

    def __str__(self):
        return f"BmpConfig(dt={self.dt}, horizon={self.horizon}, cap={self.cap}, replicas={self.replicas})"

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    @property
    def steps_per_unit(self) -> int:
        steps = int(round(1.0 / self.dt))
        if steps < 1 or abs(steps * self.dt - 1.0) > 1e-9:
            raise ValidationError(f"dt={self.dt} does not divide the unit time", "dt")
        return steps

    @property
    def source(self) -> RandomSource:
        return RandomSource(self.seed)

    def with_horizon(self, horizon: float) -> "BmpConfig":
        return BmpConfig(self.dt, horizon, self.cap, self.replicas, self.seed, self.block_size)

    def with_replicas(self, replicas: int) -> "BmpConfig":
        return BmpConfig(self.dt, self.horizon, self.cap, replicas, self.seed, self.block_size)

    def to_json(self) -> Dict:
        return {
            "dt": self.dt,
            "horizon": self.horizon,
            "cap": self.cap,
            "replicas": self.replicas,
            "seed": self.seed,
            "block_size": self.block_size,
        }

    @classmethod
    def create_from(cls, json: Dict) -> "BmpConfig":
        try:
            return cls(
                float(json.get("dt", 0.01)),
                float(json.get("horizon", 10.0)),
                int(json.get("cap", 10_000)),
                int(json.get("replicas", 1000)),
                int(json.get("seed", 0)),
                int(json.get("block_size", DEFAULT_BLOCK_SIZE)),
            )
        except (TypeError, ValueError) as e:
            raise ValidationError(str(e), "mc")


class BmpEngine:
    """
    One dt step for flat particle arrays: motion with boundary handling, then thinned branching
    A branching clock rings at the total rate sup r; a ring is accepted by channel k with probability
    r_k(x) / sup r at the particle's new position, otherwise the particle carries on unchanged.
    """

    def __init__(self, motion: MotionSpec, branch: BranchFieldSpec, dt: float):
        self.logger = logging.getLogger(__name__)
        self.motion = motion
        self.branch = branch
        self.dt = dt
        self.sup_rate = branch.sup_rate
        self.ring_probability = -math.expm1(-self.sup_rate * dt)
        self.transition = None
        if motion.kind is MotionKind.ctmc:
            cumulative = np.cumsum(expm(motion.rates * dt), axis=1)
            cumulative[:, -1] = 1.0
            self.transition = cumulative
        elif motion.kind is MotionKind.diffusion_radial and motion.left <= 0:
            raise ValidationError("radial simulation needs a reflecting inner radius x_min > 0", "domain")
        if motion.kind is not MotionKind.ctmc:
            courant = dt * motion.diffusion.sup
            if courant > 0.01 * (motion.right - motion.left) ** 2:
                self.logger.warning(f"dt={dt} is coarse for the domain width, boundary bias may be large")

    def move(self, x: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        """
        New positions and the mask of particles that stayed inside the domain over the step
        """
        n = x.size
        if self.transition is not None:
            u = rng.random(n)
            rows = self.transition[x.astype(np.int64)]
            return (u[:, None] > rows).sum(axis=1).astype(np.float64), np.ones(n, dtype=bool)

        motion, dt = self.motion, self.dt
        a = motion.diffusion(x)
        y = x + motion.effective_drift(x) * dt + np.sqrt(a * dt) * rng.standard_normal(n)
        bridge_u = rng.random((2, n))
        inside = np.ones(n, dtype=bool)
        for side, (kind, bound, sign) in enumerate(
            ((motion.left_boundary, motion.left, 1.0), (motion.right_boundary, motion.right, -1.0))
        ):
            if kind is Boundary.open:
                continue
            before = sign * (x - bound)
            after = sign * (y - bound)
            if kind is Boundary.reflecting:
                y = np.where(after < 0, 2.0 * bound - y, y)
                continue
            # a Brownian bridge between two inside points touches the boundary w.p. exp(-2 d0 d1 / (a dt))
            crossed = after <= 0
            touched = bridge_u[side] < np.exp(-2.0 * before * np.maximum(after, 0.0) / (a * dt))
            inside &= ~(crossed | touched)
        if motion.left_boundary is Boundary.reflecting or motion.right_boundary is Boundary.reflecting:
            y = np.clip(y, motion.left, motion.right)
        return y, inside

    def branch_events(self, x: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Children count per particle (1 when nothing happens), the clock rings and the accepted rings
        """
        n = x.size
        ring = rng.random(n) < self.ring_probability
        choice = rng.random(n) * self.sup_rate
        children = np.ones(n, dtype=np.int64)
        accepted = np.zeros(n, dtype=bool)
        index = np.nonzero(ring)[0]
        if index.size == 0:
            return children, ring, accepted
        position = x[index]
        lower = np.zeros(index.size)
        for channel in self.branch.channels:
            upper = lower + channel.rate(position)
            pick = index[(choice[index] >= lower) & (choice[index] < upper)]
            if pick.size:
                law = channel.law
                children[pick] = law.counts[rng.choice(law.counts.size, size=pick.size, p=law.probs)]
                accepted[pick] = True
            lower = upper
        return children, ring, accepted


class BlockResult:
    """
    Per-replica outcome of one block: recorded counts, outcome codes, integrated mass and end positions
    Capped replicas keep the positions and count they had when they were stopped.
    """

    def __init__(self, size: int, columns: int, skeleton: bool):
        self.codes = np.zeros(size, dtype=np.int8)
        self.stopped = np.full(size, -1, dtype=np.int64)
        self.mass = np.zeros(size)
        self.counts = np.zeros((size, columns), dtype=np.int64)
        self.skeleton_counts = np.zeros((size, columns), dtype=np.int64) if skeleton else None
        self.x = np.empty(0)
        self.owner = np.empty(0, dtype=np.int64)
        self.kept = None

    def positions_of(self, replica: int) -> np.ndarray:
        return self.x[self.owner == replica]


class _SkeletonState:
    """
    Marks of the coupled minorizing skeleton carried by the full particle arrays
    kept: the particle is a kept branch of its skeleton family; family: index of the family's root at
    the last integer time; leaves: leaf count of each family's n0-ary tree accumulated so far.
    """

    def __init__(self, skeleton: "MinorizingSkeleton", size: int):
        self.skeleton = skeleton
        self.kept = np.ones(size, dtype=bool)
        self.family = np.arange(size, dtype=np.int64)
        self.leaves = np.ones(size, dtype=np.int64)
        self.dropped = 0

    def grow_tree(
        self,
        inside: np.ndarray,
        children: np.ndarray,
        ring: np.ndarray,
        accepted: np.ndarray,
        remaining: float,
        rng: np.random.Generator,
    ) -> np.ndarray:
        """
        Add this step's tree leaves and return how many children of each particle stay in the skeleton
        Pruned branches grow unobserved n0-ary subtrees over the rest of the unit time; their extra
        leaves are drawn from the negative binomial law of an n0-ary Yule tree.
        """
        n0 = self.skeleton.n0
        keep = np.where(accepted, np.minimum(children, n0), 1)
        keep = np.where(self.kept & inside, keep, 0)

        pruned = np.zeros(children.size, dtype=np.int64)
        splits = self.kept & inside & ring
        pruned[splits] = n0 - keep[splits]
        pruned[self.kept & ~inside] = 1
        extra = np.zeros(children.size, dtype=np.int64)
        grows = pruned > 0
        if grows.any() and self.skeleton.sup_rate > 0:
            p = math.exp(-(n0 - 1) * self.skeleton.sup_rate * remaining)
            extra[grows] = (n0 - 1) * rng.negative_binomial(pruned[grows] / (n0 - 1), p)
        increments = extra + np.where(splits, n0 - 1, 0)
        touched = increments > 0
        np.add.at(self.leaves, self.family[touched], increments[touched])
        return keep

    def reproduce(self, keep: np.ndarray, multiplicity: np.ndarray):
        total = int(multiplicity.sum())
        starts = np.cumsum(multiplicity) - multiplicity
        rank = np.arange(total) - np.repeat(starts, multiplicity)
        self.kept = rank < np.repeat(keep, multiplicity)
        self.family = np.repeat(self.family, multiplicity)

    def select(self, mask: np.ndarray):
        self.kept = self.kept[mask]
        self.family = self.family[mask]

    def prune_families(self):
        """
        At an integer time drop the families whose tree grew beyond the leaf cap, then start new trees
        """
        members = np.nonzero(self.kept)[0]
        over = self.leaves[self.family[members]] > self.skeleton.leaf_cap
        self.dropped += int(np.unique(self.family[members[over]]).size)
        self.kept[members[over]] = False
        survivors = members[~over]
        self.family = np.full(self.kept.size, -1, dtype=np.int64)
        self.family[survivors] = np.arange(survivors.size)
        self.leaves = np.ones(survivors.size, dtype=np.int64)


def _run_block(
    engine: BmpEngine,
    start: float,
    n_steps: int,
    size: int,
    cap: int,
    rng: np.random.Generator,
    record_steps: Sequence[int],
    skeleton: Optional["MinorizingSkeleton"] = None,
    steps_per_unit: int = 0,
) -> BlockResult:
    dt = engine.dt
    columns = {step: k for k, step in enumerate(record_steps)}
    result = BlockResult(size, len(record_steps), skeleton is not None)
    marks = _SkeletonState(skeleton, size) if skeleton is not None else None

    x = np.full(size, float(start))
    owner = np.arange(size, dtype=np.int64)
    count = np.ones(size, dtype=np.int64)
    skeleton_count = np.ones(size, dtype=np.int64)
    frozen_x: List[np.ndarray] = []
    frozen_owner: List[np.ndarray] = []
    frozen_kept: List[np.ndarray] = []

    def record(step: int):
        column = columns.get(step)
        if column is not None:
            result.counts[:, column] = count
            if marks is not None:
                result.skeleton_counts[:, column] = skeleton_count

    record(0)
    for step in range(1, n_steps + 1):
        running = result.codes == RUNNING
        if x.size:
            y, inside = engine.move(x, rng)
            children, ring, accepted = engine.branch_events(y, rng)
            multiplicity = np.where(inside, children, 0)
            if marks is not None:
                remaining = 1.0 - ((step - 1) % steps_per_unit) * dt
                keep = marks.grow_tree(inside, children, ring, accepted, remaining, rng)
                marks.reproduce(keep, multiplicity)
            x = np.repeat(y, multiplicity)
            owner = np.repeat(owner, multiplicity)

        if marks is not None and step % steps_per_unit == 0:
            marks.prune_families()

        new_count = np.where(running, np.bincount(owner, minlength=size), count)
        result.mass += np.where(running, 0.5 * dt * (count + new_count), 0.0)
        count = new_count
        if marks is not None:
            if step % steps_per_unit == 0:
                skeleton_count = np.where(
                    running, np.bincount(owner[marks.kept], minlength=size), skeleton_count
                )

        died = running & (count == 0)
        result.codes[died] = EXTINCT
        result.stopped[died] = step
        hit = running & (count >= cap)
        if hit.any():
            result.codes[hit] = CAPPED
            result.stopped[hit] = step
            leaving = hit[owner]
            frozen_x.append(x[leaving])
            frozen_owner.append(owner[leaving])
            x, owner = x[~leaving], owner[~leaving]
            if marks is not None:
                frozen_kept.append(marks.kept[leaving])
                marks.select(~leaving)
        record(step)
        if x.size == 0 and not np.any(result.codes == RUNNING):
            for later in record_steps:
                if later > step:
                    record(later)
            break

    result.stopped[result.codes == RUNNING] = n_steps
    result.x = np.concatenate([x] + frozen_x)
    result.owner = np.concatenate([owner] + frozen_owner)
    if marks is not None:
        result.kept = np.concatenate([marks.kept] + frozen_kept)
    return result


def _check_start(motion: MotionSpec, start: float):
    if not motion.contains(start):
        raise ValidationError(f"start {start} is outside the domain of {motion}", "start")
    if motion.kind is MotionKind.ctmc and float(start) != int(start):
        raise ValidationError(f"start {start} is not a state of the chain", "start")


def _run(
    motion: MotionSpec,
    branch: BranchFieldSpec,
    start: float,
    cfg: BmpConfig,
    rng: RandomSource,
    threads: int,
    record_steps: Sequence[int],
    skeleton: Optional["MinorizingSkeleton"] = None,
) -> List[BlockResult]:
    _check_start(motion, start)
    engine = BmpEngine(motion, branch, cfg.dt)
    steps_per_unit = cfg.steps_per_unit if skeleton is not None else 0

    def run_block(block: int, size: int) -> BlockResult:
        generator = block_source(rng, block).generator()
        return _run_block(
            engine, start, cfg.n_steps, size, cfg.cap, generator, record_steps, skeleton, steps_per_unit
        )

    return map_blocks(run_block, cfg.replicas, cfg.block_size, threads)


def _codes(results: List[BlockResult]) -> np.ndarray:
    return np.concatenate([r.codes for r in results])


def _outcome_metadata(cfg: BmpConfig, codes: np.ndarray) -> Dict:
    capped = int(np.count_nonzero(codes == CAPPED))
    if capped:
        logger.info(f"{capped} of {codes.size} replicas stopped at cap {cfg.cap}")
    return {
        "horizon": cfg.horizon,
        "dt": cfg.dt,
        "cap": cfg.cap,
        "extinct": int(np.count_nonzero(codes == EXTINCT)),
        "cap_hits": capped,
    }


def simulate_bmp(
    motion: MotionSpec,
    branch: BranchFieldSpec,
    start: float,
    cfg: BmpConfig,
    rng: RandomLike,
) -> Tuple[PopulationTrace, ParticleSystem]:
    """
    One replica from a single particle at start, recorded at every time step until it stops
    """
    _check_start(motion, start)
    engine = BmpEngine(motion, branch, cfg.dt)
    steps = list(range(cfg.n_steps + 1))
    result = _run_block(engine, start, cfg.n_steps, 1, cfg.cap, as_generator(rng), steps)
    stopped = int(result.stopped[0])
    terminator = TERMINATOR_CODES[int(result.codes[0])]
    times = np.arange(stopped + 1) * cfg.dt
    trace = PopulationTrace(times, result.counts[0, : stopped + 1], terminator)
    logger.debug(f"simulate_bmp: {trace}")
    return trace, ParticleSystem.from_positions(float(times[-1]), result.positions_of(0))


def survival_probability_mc(
    motion: MotionSpec,
    branch: BranchFieldSpec,
    start: float,
    cfg: BmpConfig,
    rng: Optional[RandomSource] = None,
    threads: int = 1,
) -> MonteCarloEstimate:
    """
    Fraction of replicas alive at the horizon or stopped at the particle cap
    """
    rng = rng or cfg.source
    codes = _codes(_run(motion, branch, start, cfg, rng, threads, [0]))
    hits = int(np.count_nonzero(codes != EXTINCT))
    return MonteCarloEstimate.from_frequency(hits, codes.size, _outcome_metadata(cfg, codes))


def local_survival_mc(
    motion: MotionSpec,
    branch: BranchFieldSpec,
    start: float,
    window: Tuple[float, float],
    cfg: BmpConfig,
    rng: Optional[RandomSource] = None,
    threads: int = 1,
) -> MonteCarloEstimate:
    """
    Fraction of replicas with at least one particle in the open window at the horizon
    """
    left, right = window
    if not left < right:
        raise ValidationError(f"empty window ({left}, {right})", "window")
    rng = rng or cfg.source
    results = _run(motion, branch, start, cfg, rng, threads, [0])
    hits = 0
    for r in results:
        inside = (r.x > left) & (r.x < right)
        hits += int(np.unique(r.owner[inside]).size)
    codes = _codes(results)
    metadata = _outcome_metadata(cfg, codes)
    metadata["window"] = [left, right]
    return MonteCarloEstimate.from_frequency(hits, codes.size, metadata)


def mean_count_mc(
    motion: MotionSpec,
    branch: BranchFieldSpec,
    start: float,
    cfg: BmpConfig,
    rng: Optional[RandomSource] = None,
    threads: int = 1,
) -> MonteCarloEstimate:
    """
    Sample mean of N at the horizon; capped replicas contribute the cap count, a downward bias
    """
    rng = rng or cfg.source
    results = _run(motion, branch, start, cfg, rng, threads, [cfg.n_steps])
    samples = np.concatenate([r.counts[:, -1] for r in results])
    return MonteCarloEstimate.from_samples(samples, _outcome_metadata(cfg, _codes(results)))


def total_mass_estimate(
    motion: MotionSpec,
    branch: BranchFieldSpec,
    start: float,
    cfg: BmpConfig,
    rng: Optional[RandomSource] = None,
    threads: int = 1,
) -> MonteCarloEstimate:
    """
    Mean of the integral of N_t over [0, extinction], trapezoidal in dt
    Replicas still alive at the horizon or stopped at the cap are censored and bias the estimate down.
    """
    rng = rng or cfg.source
    results = _run(motion, branch, start, cfg, rng, threads, [0])
    samples = np.concatenate([r.mass for r in results])
    codes = _codes(results)
    censored = int(np.count_nonzero(codes != EXTINCT))
    if censored > CENSORED_WARNING * codes.size:
        logger.warning(
            f"total_mass_estimate: {censored} of {codes.size} replicas censored at horizon {cfg.horizon}"
        )
    metadata = _outcome_metadata(cfg, codes)
    metadata["censored"] = censored
    return MonteCarloEstimate.from_samples(samples, metadata)


def product_functional_mc(
    motion: MotionSpec,
    branch: BranchFieldSpec,
    start: float,
    g: Field,
    cfg: BmpConfig,
    rng: Optional[RandomSource] = None,
    threads: int = 1,
) -> MonteCarloEstimate:
    """
    Mean of 1 - prod_i (1 - g(X_i)) over the particles alive at the horizon; an extinct replica gives 0
    """
    if g.inf < 0 or g.sup > 1:
        raise DomainError("g must take values in [0, 1]", "g")
    rng = rng or cfg.source
    results = _run(motion, branch, start, cfg, rng, threads, [0])
    samples = []
    for r in results:
        with np.errstate(divide="ignore"):
            log_factor = np.log1p(-g(r.x))
        log_product = np.bincount(r.owner, weights=log_factor, minlength=r.codes.size)
        samples.append(-np.expm1(log_product))
    return MonteCarloEstimate.from_samples(np.concatenate(samples), _outcome_metadata(cfg, _codes(results)))


def _mass_box_width(motion: MotionSpec, t: float) -> float:
    spread = abs(motion.drift.sup) + abs(motion.drift.inf)
    return 2.0 * (spread * t + 6.0 * math.sqrt(motion.diffusion.sup * t)) + 2.0


def _ctmc_mass(motion: MotionSpec, branch: BranchFieldSpec, start: int, times: np.ndarray) -> np.ndarray:
    states = np.arange(motion.rates.shape[0], dtype=np.float64)
    generator = motion.rates + np.diag(branch.potential(states))
    return np.array([expm(t * generator)[start].sum() for t in times])


def expected_mass_pde(
    motion: MotionSpec,
    branch: BranchFieldSpec,
    start: float,
    t: float,
    dx: float = DEFAULT_DX,
    dt: Optional[float] = None,
) -> float:
    """
    E_start[N_t] from the linear equation w_t = L0 w + r (m - 1) w, w(., 0) = 1
    Unbounded sides are cut by large_box; a finite chain uses the matrix exponential instead.
    """
    _check_start(motion, start)
    if motion.kind is MotionKind.ctmc:
        return float(_ctmc_mass(motion, branch, int(start), np.array([t]))[0])

    def observable(m: MotionSpec) -> float:
        return expected_mass_trajectory(m, branch, t, dx, dt).value(start, t)

    value, _ = large_box(observable, motion, start, _mass_box_width(motion, t))
    return value


def lambda_double_prime_estimate(
    motion: MotionSpec,
    branch: BranchFieldSpec,
    start: float,
    t_max: float,
    dx: float = DEFAULT_DX,
    dt: Optional[float] = None,
    cfg: Optional[BmpConfig] = None,
    rng: Optional[RandomSource] = None,
    threads: int = 1,
) -> EigenvalueEstimate:
    """
    Growth rate of E_start[N_t]: least-squares slope of log E[N_t] over [t_max / 2, t_max]
    The window's extreme values of (1/t) log E[N_t] widen the bracket. Given cfg the mass comes from
    Monte Carlo means instead of the PDE.
    """
    _check_start(motion, start)
    times = np.linspace(t_max / 2, t_max, 21)
    if cfg is not None:
        masses = _mc_mass_curve(motion, branch, start, times, cfg.with_horizon(t_max), rng, threads)
        method = Method.growth_slope
    elif motion.kind is MotionKind.ctmc:
        masses = _ctmc_mass(motion, branch, int(start), times)
        method = Method.pde
    else:
        domain = motion if motion.bounded else motion.box(start, _mass_box_width(motion, t_max))
        trajectory = expected_mass_trajectory(domain, branch, t_max, dx, dt, t_max / 40)
        masses = np.array([trajectory.value(start, t) for t in times])
        method = Method.pde
    if np.any(masses <= 0):
        raise DomainError("expected mass vanished inside the window, raise t_max resolution", "t_max")

    logs = np.log(masses)
    slope = float(np.polyfit(times, logs, 1)[0])
    rates = logs / times
    lower = min(slope, float(rates.min()))
    upper = max(slope, float(rates.max()))
    metadata = {"times": times.tolist(), "log_mass": logs.tolist(), "window_min": float(rates.min()),
                "window_max": float(rates.max())}
    logger.info(f"lambda_double_prime_estimate: slope {slope:.6g} in [{lower:.6g}, {upper:.6g}]")
    return EigenvalueEstimate(slope, lower, upper, method, metadata)


def _mc_mass_curve(
    motion: MotionSpec,
    branch: BranchFieldSpec,
    start: float,
    times: np.ndarray,
    cfg: BmpConfig,
    rng: Optional[RandomSource],
    threads: int,
) -> np.ndarray:
    steps = sorted({int(round(t / cfg.dt)) for t in times})
    results = _run(motion, branch, start, cfg, rng or cfg.source, threads, steps)
    counts = np.vstack([r.counts for r in results])
    means = counts.mean(axis=0)
    return np.interp(times, np.array(steps) * cfg.dt, means)


def growth_ceiling_fraction(
    motion: MotionSpec,
    branch: BranchFieldSpec,
    start: float,
    lam: float,
    cfg: BmpConfig,
    margin: float = 0.1,
    rng: Optional[RandomSource] = None,
    threads: int = 1,
) -> MonteCarloEstimate:
    """
    Fraction of replicas with (1/t) log N_t > lam + margin at the horizon
    """
    if cfg.horizon <= 0:
        raise ValidationError("needs a positive horizon", "horizon")
    rng = rng or cfg.source
    results = _run(motion, branch, start, cfg, rng, threads, [cfg.n_steps])
    counts = np.concatenate([r.counts[:, -1] for r in results])
    alive = counts > 0
    rate = np.full(counts.size, -np.inf)
    rate[alive] = np.log(counts[alive]) / cfg.horizon
    hits = int(np.count_nonzero(rate > lam + margin))
    metadata = _outcome_metadata(cfg, _codes(results))
    metadata.update({"lambda": lam, "margin": margin})
    return MonteCarloEstimate.from_frequency(hits, counts.size, metadata)


def dirichlet_survival_sweep(
    branch: BranchFieldSpec,
    lengths: Sequence[float],
    cfg: BmpConfig,
    start: Optional[float] = None,
    a: float = 1.0,
    rng: Optional[RandomSource] = None,
    threads: int = 1,
) -> Dict:
    """
    Survival frequencies on nested intervals (0, L) from a common start, every length on the same seed
    """
    lengths = sorted(float(length) for length in lengths)
    start = lengths[0] / 2 if start is None else start
    rng = rng or cfg.source
    survival, stderr = [], []
    for length in lengths:
        motion = MotionSpec.brownian(0.0, length, a=a)
        estimate = survival_probability_mc(motion, branch, start, cfg, rng, threads)
        logger.info(f"dirichlet_survival_sweep: L={length:.4g} survival {estimate}")
        survival.append(estimate.estimate)
        stderr.append(estimate.stderr)
    return {"lengths": lengths, "start": start, "survival": survival, "stderr": stderr}


class MinorizingSkeleton:
    """
    Time-1 skeleton with offspring at most n0, dominated pathwise by the continuous process
    Each skeleton particle roots an n0-ary tree branching at rate sup r over a unit of time; the process is
    the tree with branches pruned at each node. The skeleton keeps a family only when its whole tree has at
    most leaf_cap leaves, which bounds its offspring while losing at most epsilon of the mean kernel.
    """

    def __init__(
        self,
        branch: BranchFieldSpec,
        epsilon: float,
        epsilon_prime: float,
        n0: int,
        leaf_cap: int,
    ):
        self.branch = branch
        self.epsilon = epsilon
        self.epsilon_prime = epsilon_prime
        self.n0 = n0
        self.leaf_cap = leaf_cap
        self.sup_rate = branch.sup_rate

    def __str__(self):
        return f"MinorizingSkeleton(epsilon={self.epsilon}, n0={self.n0}, leaf_cap={self.leaf_cap})"

    @property
    def truncated(self) -> BranchFieldSpec:
        return _truncate(self.branch, self.n0)

    @property
    def max_offspring(self) -> int:
        return self.n0 * self.leaf_cap

    def coupled_run(
        self,
        motion: MotionSpec,
        start: float,
        cfg: BmpConfig,
        rng: Optional[RandomSource] = None,
        threads: int = 1,
    ) -> Tuple[np.ndarray, np.ndarray]:
        """
        Full and skeleton population counts at the integer times 0..horizon, one row per replica
        """
        steps = [k * cfg.steps_per_unit for k in range(int(cfg.horizon) + 1)]
        results = _run(motion, self.branch, start, cfg, rng or cfg.source, threads, steps, self)
        full = np.vstack([r.counts for r in results])
        skeleton = np.vstack([r.skeleton_counts for r in results])
        violations = int(np.count_nonzero(skeleton > full))
        if violations:
            logger.error(f"coupled_run: skeleton exceeded the full process {violations} times")
        return full, skeleton

    def mean_mass(
        self,
        motion: MotionSpec,
        start: float,
        cfg: BmpConfig,
        rng: Optional[RandomSource] = None,
        threads: int = 1,
    ) -> MonteCarloEstimate:
        """
        Monte Carlo mass of the skeleton's time-1 mean kernel Q(start, E)
        """
        _, skeleton = self.coupled_run(motion, start, cfg.with_horizon(1.0), rng, threads)
        return MonteCarloEstimate.from_samples(skeleton[:, 1], {"start": start, "epsilon": self.epsilon})

    def expectation_kernel(
        self,
        motion: MotionSpec,
        cfg: BmpConfig,
        rng: Optional[RandomSource] = None,
        cells: int = DEFAULT_SKELETON_CELLS,
        window: Optional[Tuple[float, float]] = None,
    ) -> ExpectationKernel:
        """
        Monte Carlo estimate of the skeleton mean kernel Q as a kernel on finitely many states
        A finite chain keeps its own states. Diffusive motion uses the cells of a uniform partition of the
        interval, or of window when a side is unbounded; row i starts from the midpoint of cell i and
        particles outside the partition are dropped, so Q stays a minorant.
        """
        rng = rng or cfg.source
        if motion.kind is MotionKind.ctmc:
            size = motion.rates.shape[0]
            starts = np.arange(size, dtype=np.float64)
            edges = None
        else:
            edges = skeleton_cell_edges(motion, cells, window)
            size = cells
            starts = 0.5 * (edges[:-1] + edges[1:])
        steps = cfg.steps_per_unit
        engine = BmpEngine(motion, self.branch, cfg.dt)
        rows = []
        for state, start in enumerate(starts):
            _check_start(motion, float(start))
            generator = rng.spawn(rng.stream + state).generator()
            result = _run_block(engine, start, steps, cfg.replicas, cfg.cap, generator, [steps], self, steps)
            live = result.kept & (result.codes[result.owner] != CAPPED)
            positions = result.x[live]
            if edges is None:
                index = positions.astype(np.int64)
            else:
                positions = positions[(positions >= edges[0]) & (positions <= edges[-1])]
                index = np.minimum(np.searchsorted(edges, positions, side="right") - 1, size - 1)
            rows.append(np.bincount(index, minlength=size) / cfg.replicas)
        q = np.vstack(rows)
        mass = q.sum(axis=1)
        logger.debug(f"expectation_kernel: {size} states, row mass in [{mass.min():.4g}, {mass.max():.4g}]")
        return ExpectationKernel.from_matrix(sparse.csr_matrix(q), f"skeleton:{self}")

    def to_json(self) -> Dict:
        return {
            "epsilon": self.epsilon,
            "epsilon_prime": self.epsilon_prime,
            "n0": self.n0,
            "leaf_cap": self.leaf_cap,
            "sup_rate": self.sup_rate,
        }


def _truncate(branch: BranchFieldSpec, n0: int) -> BranchFieldSpec:
    return BranchFieldSpec([BranchChannel(c.rate, c.law.truncated(n0)) for c in branch.channels])


def skeleton_cell_edges(
    motion: MotionSpec,
    cells: int = DEFAULT_SKELETON_CELLS,
    window: Optional[Tuple[float, float]] = None,
) -> np.ndarray:
    """
    Edges of the uniform partition that indexes the skeleton kernel of a diffusive motion
    """
    left, right = window if window is not None else (motion.left, motion.right)
    if not (math.isfinite(left) and math.isfinite(right)) or left >= right:
        raise ValidationError(f"needs a bounded window, got ({left}, {right})", "window")
    if cells < 1:
        raise ValidationError(f"must be positive, got {cells}", "cells")
    return np.linspace(left, right, cells + 1)


def _offspring_bound(branch: BranchFieldSpec, budget: float) -> int:
    largest = max((c.law.max_children for c in branch.channels), default=1)
    for n0 in range(2, max(largest, 2) + 1):
        loss = sum(c.rate.sup * c.law.tail_mean(n0 + 1) for c in branch.channels)
        if loss < budget:
            return n0
    return max(largest, 2)


def _leaf_cap(n0: int, sup_rate: float, budget: float) -> int:
    """
    Smallest m with E[L 1(L > m)] <= budget for the leaf count L of an n0-ary Yule tree at time 1
    (L - 1) / (n0 - 1) is negative binomial with shape 1 / (n0 - 1) and success probability e^{-(n0 - 1) r}.
    """
    if sup_rate == 0:
        return 1
    shape = 1.0 / (n0 - 1)
    p = math.exp(-(n0 - 1) * sup_rate)
    remaining = 1.0 / p
    k = 0
    while 1 + (n0 - 1) * k <= MAX_TREE_LEAVES:
        ks = np.arange(k, k + TREE_TAIL_CHUNK)
        leaves = 1 + (n0 - 1) * ks
        tail = remaining - np.cumsum(leaves * stats.nbinom.pmf(ks, shape, p))
        done = np.nonzero(tail <= budget)[0]
        if done.size:
            return int(leaves[done[0]])
        remaining = tail[-1]
        k += TREE_TAIL_CHUNK
    raise ConvergenceError(f"leaf cap exceeds {MAX_TREE_LEAVES}", residual=float(remaining))


def minorizing_skeleton(branch: BranchFieldSpec, epsilon: float) -> MinorizingSkeleton:
    """
    Choose the offspring bound n0 and the leaf cap so that Q >= (1 - epsilon) P_1
    The budget epsilon' solves (1 - epsilon') e^{-epsilon'} = 1 - epsilon; truncation at n0 costs at most
    e^{-epsilon'} and the leaf cap at most a fraction epsilon' of the mass.
    """
    if not 0 < epsilon < 1:
        raise ValidationError(f"must lie in (0, 1), got {epsilon}", "epsilon")
    epsilon_prime = brentq(lambda e: (1.0 - e) * math.exp(-e) - (1.0 - epsilon), 0.0, epsilon)
    n0 = _offspring_bound(branch, epsilon_prime)
    # the single-particle law is at most e^{-inf potential} times the mass of the truncated process
    inf_potential = min(0.0, BranchPotential(_truncate(branch, n0)).inf)
    leaf_cap = _leaf_cap(n0, branch.sup_rate, epsilon_prime * math.exp(inf_potential))
    skeleton = MinorizingSkeleton(branch, epsilon, epsilon_prime, n0, leaf_cap)
    logger.info(f"minorizing_skeleton: {skeleton}, epsilon'={epsilon_prime:.6g}")
    return skeleton
