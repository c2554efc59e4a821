import json
import logging

from abc import abstractmethod, ABC
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from typing import Callable, Dict, Hashable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DomainError, ValidationError


# A state of a countable space is any hashable label (an int, a lattice tuple,
# a (layer, track) pair). StateIndex is its dense position inside a truncation.
State = Hashable
StateIndex = int

PROBABILITY_TOLERANCE = 1e-12
MASK64 = (1 << 64) - 1

logger = logging.getLogger(__name__)


class RandomSource:
    """
    Counter-based random stream identified by (seed, stream)
    Every call to generator() starts the Philox counter from zero, so a RandomSource is a value:
    copying it or rebuilding it from the same pair reproduces the same draws bit for bit.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & MASK64
        self.stream = int(stream) & MASK64

    def __repr__(self):
        return f"RandomSource(seed={self.seed}, stream={self.stream})"

    def __eq__(self, other):
        return (
            isinstance(other, RandomSource)
            and self.seed == other.seed
            and self.stream == other.stream
        )

    def __hash__(self):
        return hash((self.seed, self.stream))

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=self.seed | (self.stream << 64)))

    def spawn(self, stream: int) -> "RandomSource":
        return RandomSource(self.seed, stream)


RandomLike = Union[RandomSource, np.random.Generator]


def as_generator(rng: RandomLike) -> np.random.Generator:
    if isinstance(rng, RandomSource):
        return rng.generator()
    return rng


StepFunction = Callable[[State], Sequence[Tuple[State, float]]]


class Displacement(ABC):
    """
    Placement of the children of one parent
    step(parent) is the marginal destination law of a single child
    """

    def __init__(self, step: StepFunction, description: Optional[Dict] = None):
        self._step = step
        self.description = description

    def targets(self, parent: State) -> List[Tuple[State, float]]:
        merged: Dict[State, float] = defaultdict(float)
        for y, p in self._step(parent):
            if p < 0:
                raise ValidationError(f"negative step probability {p} at {parent}", "displacement")
            merged[y] += p
        total = sum(merged.values())
        if abs(total - 1.0) > 1e-9:
            raise ValidationError(
                f"step probabilities at {parent} sum to {total}", "displacement"
            )
        return [(y, p / total) for y, p in merged.items() if p > 0]

    @abstractmethod
    def place(self, parent: State, n: int, rng: np.random.Generator) -> List[State]:
        pass

    @abstractmethod
    def place_counts(
        self, parent: State, litters: Dict[int, int], rng: np.random.Generator
    ) -> Dict[State, int]:
        """
        Bulk placement: litters maps a litter size n to the number of parents at this state with n children
        """
        pass

    def to_json(self) -> Optional[Dict]:
        return self.description


class IndependentDisplacement(Displacement):
    def place(self, parent: State, n: int, rng: np.random.Generator) -> List[State]:
        if n == 0:
            return []
        targets = self.targets(parent)
        picks = rng.choice(len(targets), size=n, p=[p for _, p in targets])
        return [targets[i][0] for i in picks]

    def place_counts(
        self, parent: State, litters: Dict[int, int], rng: np.random.Generator
    ) -> Dict[State, int]:
        children = sum(n * c for n, c in litters.items())
        if children == 0:
            return {}
        targets = self.targets(parent)
        split = rng.multinomial(children, [p for _, p in targets])
        return {targets[i][0]: int(k) for i, k in enumerate(split) if k}


class JointDisplacement(Displacement):
    """
    All children of one parent land on the same state
    """

    def place(self, parent: State, n: int, rng: np.random.Generator) -> List[State]:
        if n == 0:
            return []
        targets = self.targets(parent)
        i = rng.choice(len(targets), p=[p for _, p in targets])
        return [targets[i][0]] * n

    def place_counts(
        self, parent: State, litters: Dict[int, int], rng: np.random.Generator
    ) -> Dict[State, int]:
        targets = self.targets(parent)
        probs = [p for _, p in targets]
        placed: Dict[State, int] = defaultdict(int)
        for n, parents in litters.items():
            if n == 0 or parents == 0:
                continue
            split = rng.multinomial(parents, probs)
            for i, k in enumerate(split):
                if k:
                    placed[targets[i][0]] += n * int(k)
        return dict(placed)


def _shift(label: State, offset) -> State:
    if isinstance(label, tuple):
        return tuple(a + b for a, b in zip(label, offset))
    return label + offset


def offset_steps(offsets: Sequence[Tuple[object, float]]) -> StepFunction:
    """
    Translation-invariant steps on a lattice: offsets are ints (Z) or tuples (Z^d)
    """
    offsets = [(tuple(dy) if isinstance(dy, (list, tuple)) else dy, p) for dy, p in offsets]

    def step(parent: State) -> List[Tuple[State, float]]:
        return [(_shift(parent, dy), p) for dy, p in offsets]

    return step


def displacement_from_json(payload: Optional[Dict]) -> Optional[Displacement]:
    if payload is None:
        return None
    try:
        kind = payload.get("kind", "independent")
        offsets = payload["offsets"]
    except (AttributeError, KeyError) as e:
        raise ValidationError(f"missing {e}", "displacement")
    step = offset_steps(offsets)
    description = {"kind": kind, "offsets": offsets}
    if kind == "independent":
        return IndependentDisplacement(step, description)
    elif kind == "joint":
        return JointDisplacement(step, description)
    raise ValidationError(f"unknown kind {kind!r}", "displacement.kind")


class OffspringLaw:
    """
    Finite offspring distribution (p_n) with an optional displacement kernel
    Without a displacement the branching is purely local: children sit on the parent's state.
    """

    def __init__(
        self,
        probs: Iterable[Tuple[int, float]],
        displacement: Optional[Displacement] = None,
    ):
        merged: Dict[int, float] = defaultdict(float)
        for n, p in probs:
            if int(n) != n or n < 0:
                raise ValidationError(f"offspring count {n} is not a nonnegative integer", "probs")
            if not np.isfinite(p) or p < 0:
                raise ValidationError(f"probability {p} for n={n} is not nonnegative", "probs")
            merged[int(n)] += float(p)
        if not merged:
            raise ValidationError("empty offspring law", "probs")
        total = sum(merged.values())
        if abs(total - 1.0) > PROBABILITY_TOLERANCE:
            raise ValidationError(f"probabilities sum to {total!r}, not 1", "probs")

        ns = sorted(n for n, p in merged.items() if p > 0)
        self.counts = np.array(ns, dtype=np.int64)
        self.probs = np.array([merged[n] / total for n in ns], dtype=np.float64)
        self.displacement = displacement

    def __str__(self):
        terms = ", ".join(f"p_{n}={p:.6g}" for n, p in self.items())
        return f"OffspringLaw({terms})"

    def items(self) -> List[Tuple[int, float]]:
        return list(zip(self.counts.tolist(), self.probs.tolist()))

    def p(self, n: int) -> float:
        hits = np.nonzero(self.counts == n)[0]
        return float(self.probs[hits[0]]) if hits.size else 0.0

    @property
    def mean(self) -> float:
        return float(np.dot(self.counts, self.probs))

    @property
    def max_children(self) -> int:
        return int(self.counts[-1])

    @property
    def is_local(self) -> bool:
        return self.displacement is None

    def tail_mean(self, n0: int) -> float:
        """
        sum over m >= n0 of m p_m
        """
        mask = self.counts >= n0
        return float(np.dot(self.counts[mask], self.probs[mask]))

    def truncated(self, n0: int) -> "OffspringLaw":
        """
        Law of min(N, n0): the tail mass is folded onto n0
        """
        folded: Dict[int, float] = defaultdict(float)
        for n, p in self.items():
            folded[min(n, n0)] += p
        return OffspringLaw(folded.items(), self.displacement)

    def with_displacement(self, displacement: Optional[Displacement]) -> "OffspringLaw":
        return OffspringLaw(self.items(), displacement)

    def mean_row(self, parent: State) -> Dict[State, float]:
        if self.displacement is None:
            return {parent: self.mean}
        # both displacement kinds share the first moment mean * q(y)
        return {y: self.mean * q for y, q in self.displacement.targets(parent)}

    def to_json(self) -> Dict:
        payload = {"probs": [[n, p] for n, p in self.items()]}
        if self.displacement is not None:
            payload["displacement"] = self.displacement.to_json()
        return payload

    @classmethod
    def create_from(cls, json: Dict) -> "OffspringLaw":
        """
        Create the law from a payload {"probs": [[n, p], ...], "displacement": ...}
        """
        if not isinstance(json, dict) or "probs" not in json:
            raise ValidationError("missing key", "probs")
        try:
            probs = [(n, p) for n, p in json["probs"]]
        except (TypeError, ValueError):
            raise ValidationError("expected a list of [n, p] pairs", "probs")
        return cls(probs, displacement_from_json(json.get("displacement")))

    @classmethod
    def load(cls, path: str) -> "OffspringLaw":
        with open(path, "r", encoding="utf-8") as f:
            try:
                payload = json.load(f)
            except json.JSONDecodeError as e:
                raise ValidationError(f"invalid JSON ({e.msg} at line {e.lineno})", path)
        return cls.create_from(payload)


def sample_litter(law: OffspringLaw, rng: np.random.Generator) -> int:
    return int(law.counts[rng.choice(law.counts.size, p=law.probs)])


def sample_offspring(law: OffspringLaw, parent: State, rng: RandomLike) -> List[State]:
    """
    Draw the children of one parent: n with probability p_n, placed by the displacement kernel
    """
    rng = as_generator(rng)
    n = sample_litter(law, rng)
    if law.displacement is None:
        return [parent] * n
    return law.displacement.place(parent, n, rng)


def generating_value(law: OffspringLaw, s: float) -> float:
    if not 0.0 <= s <= 1.0:
        raise DomainError(f"s={s} is outside [0, 1]", "s")
    return float(np.dot(law.probs, np.power(float(s), law.counts)))


class Terminator(Enum):
    horizon = "horizon"
    extinct = "extinct"
    cap_hit = "cap_hit"


class PopulationTrace:
    """
    Population counts N at ascending time stamps (generations or real times)
    """

    def __init__(
        self,
        times: Sequence[float],
        counts: Sequence[int],
        terminator: Terminator = Terminator.horizon,
    ):
        self.times = np.asarray(times, dtype=np.float64)
        self.counts = np.asarray(counts, dtype=np.int64)
        self.terminator = terminator

        if self.times.shape != self.counts.shape:
            raise ValidationError("times and counts differ in length", "trace")
        if np.any(np.diff(self.times) <= 0):
            raise ValidationError("time stamps are not ascending", "trace")
        if np.any(self.counts < 0):
            raise ValidationError("negative count", "trace")
        zeros = np.nonzero(self.counts == 0)[0]
        if zeros.size and np.any(self.counts[zeros[0]:] != 0):
            raise ValidationError("count left the absorbing state 0", "trace")

    def __len__(self):
        return len(self.counts)

    def __str__(self):
        return f"PopulationTrace(len={len(self)}, final={self.final}, {self.terminator.value})"

    @property
    def final(self) -> int:
        return int(self.counts[-1]) if len(self.counts) else 0

    @property
    def survived(self) -> bool:
        return self.terminator is not Terminator.extinct

    def rows(self, replica: int) -> List[Tuple[int, float, int]]:
        return [(replica, float(t), int(c)) for t, c in zip(self.times, self.counts)]


class MonteCarloEstimate:
    """
    Monte Carlo estimate with its standard error
    Unpacks as (estimate, stderr); metadata holds run details such as censoring counts or bias bounds.
    """

    def __init__(self, estimate: float, stderr: float, replicas: int, metadata: Optional[Dict] = None):
        self.estimate = float(estimate)
        self.stderr = float(stderr)
        self.replicas = int(replicas)
        self.metadata = metadata or {}

    def __iter__(self):
        return iter((self.estimate, self.stderr))

    def __str__(self):
        return f"{self.estimate:.6g} +/- {self.stderr:.3g} ({self.replicas} replicas)"

    @classmethod
    def from_samples(cls, samples: np.ndarray, metadata: Optional[Dict] = None) -> "MonteCarloEstimate":
        samples = np.asarray(samples, dtype=np.float64)
        n = samples.size
        stderr = float(np.std(samples, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
        return cls(float(np.mean(samples)), stderr, n, metadata)

    @classmethod
    def from_frequency(cls, hits: int, n: int, metadata: Optional[Dict] = None) -> "MonteCarloEstimate":
        freq = hits / n
        return cls(freq, np.sqrt(freq * (1.0 - freq) / n), n, metadata)

    def to_json(self) -> Dict:
        return {
            "estimate": self.estimate,
            "stderr": self.stderr,
            "replicas": self.replicas,
            "metadata": self.metadata,
        }


def block_sizes(replicas: int, block_size: int) -> List[int]:
    if replicas < 1:
        raise ValidationError(f"replicas must be >= 1, got {replicas}", "replicas")
    full, rest = divmod(replicas, block_size)
    return [block_size] * full + ([rest] if rest else [])


def block_source(rng: RandomSource, block: int) -> RandomSource:
    return rng.spawn(rng.stream + block)


def map_blocks(fn: Callable[[int, int], object], replicas: int, block_size: int, threads: int = 1) -> List:
    """
    Run fn(block, size) for every replica block and return the results in block order
    Block b draws from its own stream, so the merged result does not depend on the thread count.
    """
    sizes = block_sizes(replicas, block_size)
    if threads <= 1 or len(sizes) == 1:
        return [fn(b, size) for b, size in enumerate(sizes)]
    with ThreadPoolExecutor(max_workers=threads) as executor:
        futures = [executor.submit(fn, b, size) for b, size in enumerate(sizes)]
        return [f.result() for f in futures]
