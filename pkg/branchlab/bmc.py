import csv
import logging
import os
import threading

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from collections import deque, defaultdict
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from scipy import sparse

from .core import (
    IndependentDisplacement,
    JointDisplacement,
    MonteCarloEstimate,
    OffspringLaw,
    PopulationTrace,
    RandomSource,
    State,
    Terminator,
    block_source,
    map_blocks,
    offset_steps,
    sample_offspring,
)
from .errors import TruncationOverflowError, ValidationError
from .gw import extinction_probability, simulate_generations
from .particles import ParticleSystem, Simulator


DEFAULT_CAP = 1_000_000
DEFAULT_BLOCK_SIZE = 1024

RowFunction = Callable[[State], Dict[State, float]]

logger = logging.getLogger(__name__)


class Truncation:
    """
    Finite set of states in breadth-first order from a root, with the kernel restricted to it
    index maps a state to its dense StateIndex; matrix is the CSR restriction m_F.
    """

    def __init__(self, states: List[State], matrix: sparse.csr_matrix, depths: Sequence[int]):
        self.states = states
        self.index: Dict[State, int] = {x: i for i, x in enumerate(states)}
        self.matrix = matrix
        self.depths = np.asarray(depths, dtype=np.int64)

    def __len__(self):
        return len(self.states)

    def __contains__(self, x: State):
        return x in self.index

    def __str__(self):
        return f"Truncation(size={len(self)}, nnz={self.matrix.nnz})"

    def vector(self, u: Union[Callable[[State], float], Dict[State, float]]) -> np.ndarray:
        lookup = u.get if isinstance(u, dict) else u
        return np.array([lookup(x) or 0.0 for x in self.states], dtype=np.float64)

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def prefix(self, size: int) -> "Truncation":
        """
        The first size states (a smaller breadth-first truncation from the same root)
        """
        size = min(size, len(self))
        return Truncation(
            self.states[:size],
            self.matrix[:size, :size].tocsr(),
            self.depths[:size],
        )


class ExpectationKernel:
    """
    Sparse nonnegative kernel m on a countable space, materialized row by row on demand
    """

    def __init__(self, row: RowFunction, name: str = "kernel"):
        self.name = name
        self._row = row
        self._rows: Dict[State, Dict[State, float]] = {}
        self._lock = threading.Lock()

    def __str__(self):
        return f"ExpectationKernel({self.name}, materialized={self.truncation_size})"

    @property
    def truncation_size(self) -> int:
        return len(self._rows)

    def row(self, x: State) -> Dict[State, float]:
        cached = self._rows.get(x)
        if cached is not None:
            return cached
        cached = {}
        for y, m in self._row(x).items():
            if not np.isfinite(m) or m < 0:
                raise ValidationError(f"entry m({x}, {y}) = {m} is not finite and nonnegative", "kernel")
            if m > 0:
                cached[y] = float(m)
        with self._lock:
            self._rows[x] = cached
        return cached

    def explore(
        self,
        root: State,
        size: Optional[int] = None,
        depth: Optional[int] = None,
        cap: int = DEFAULT_CAP,
    ) -> Truncation:
        """
        Breadth-first truncation from root, limited by a state count and/or a depth
        """
        states = [root]
        depths = [0]
        seen = {root}
        queue = deque([root])
        level = {root: 0}
        while queue and (size is None or len(states) < size):
            x = queue.popleft()
            if depth is not None and level[x] >= depth:
                continue
            for y in self.row(x):
                if y in seen:
                    continue
                seen.add(y)
                level[y] = level[x] + 1
                states.append(y)
                depths.append(level[y])
                queue.append(y)
                if len(states) > cap:
                    raise TruncationOverflowError(
                        f"more than {cap} states reachable from {root}", cap=cap
                    )
                if size is not None and len(states) >= size:
                    break

        index = {x: i for i, x in enumerate(states)}
        rows, cols, vals = [], [], []
        for i, x in enumerate(states):
            for y, m in self.row(x).items():
                j = index.get(y)
                if j is not None:
                    rows.append(i)
                    cols.append(j)
                    vals.append(m)
        n = len(states)
        matrix = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n), dtype=np.float64)
        logger.debug(f"explore: {self.name} from {root}: {n} states, {matrix.nnz} entries")
        return Truncation(states, matrix, depths)

    def truncate(self, root: State, size: int) -> Truncation:
        return self.explore(root, size=size)

    def reachable(self, root: State, depth: int, cap: int = DEFAULT_CAP) -> Truncation:
        return self.explore(root, depth=depth, cap=cap)

    @classmethod
    def from_matrix(cls, matrix, name: str = "matrix") -> "ExpectationKernel":
        """
        Kernel on the states 0..n-1 given by a finite nonnegative matrix
        """
        m = sparse.csr_matrix(matrix, dtype=np.float64)
        if m.shape[0] != m.shape[1]:
            raise ValidationError(f"matrix is not square: {m.shape}", "matrix")
        if m.nnz and m.data.min() < 0:
            raise ValidationError("matrix has negative entries", "matrix")

        def row(x: State) -> Dict[State, float]:
            lo, hi = m.indptr[x], m.indptr[x + 1]
            return dict(zip(m.indices[lo:hi].tolist(), m.data[lo:hi].tolist()))

        return cls(row, name)


class BmcSpec:
    """
    Branching Markov chain: an offspring law (with displacement) at every state
    law, when set, is the single law used at every state; the total population is then a Galton-Watson process.
    """

    def __init__(
        self,
        law_at: Callable[[State], OffspringLaw],
        name: str = "custom",
        law: Optional[OffspringLaw] = None,
    ):
        self.law_at = law_at
        self.name = name
        self.law = law
        self.kernel = ExpectationKernel(lambda x: self.law_at(x).mean_row(x), name)

    def __str__(self):
        return f"BmcSpec({self.name})"

    @classmethod
    def homogeneous(cls, law: OffspringLaw, name: str = "homogeneous") -> "BmcSpec":
        return cls(lambda x: law, name, law)

    @classmethod
    def create_from(cls, json: Dict, base_dir: str = ".") -> "BmcSpec":
        """
        Create the spec from a parsed TOML payload:
            space = "lattice_zd" | "graph_file" | "layered_dag" | "mutation_graph" | "local"
            law = {probs = [[n, p], ...]}, displacement = "independent" | "joint"
            d / path / width: space parameters
            [[override]] state = ..., probs = [[n, p], ...]
        """
        space = json.get("space")
        if space is None:
            raise ValidationError("missing key", "space")
        if space == "mutation_graph":
            from .repro import MutationGraph

            return MutationGraph().spec()

        if "law" not in json:
            raise ValidationError("missing key", "law")
        law = OffspringLaw.create_from(json["law"])
        kind = json.get("displacement", "independent")
        if kind not in ("independent", "joint"):
            raise ValidationError(f"unknown kind {kind!r}", "displacement")

        if space == "lattice_zd":
            spec = lattice_zd(law, int(json.get("d", 1)), kind)
        elif space == "graph_file":
            if "path" not in json:
                raise ValidationError("missing key", "path")
            spec = graph_file(_resolve(base_dir, json["path"]), law, kind)
        elif space == "layered_dag":
            if "width" not in json:
                raise ValidationError("missing key", "width")
            spec = layered_dag(law, int(json["width"]), kind)
        elif space == "local":
            spec = cls.homogeneous(law, "local")
        else:
            raise ValidationError(f"unknown space {space!r}", "space")

        overrides = json.get("override", [])
        if overrides:
            table: Dict[State, OffspringLaw] = {}
            for i, item in enumerate(overrides):
                if "state" not in item:
                    raise ValidationError("missing key", f"override[{i}].state")
                state = parse_state(item["state"])
                table[state] = OffspringLaw.create_from(item).with_displacement(
                    spec.law_at(state).displacement
                )
            default = spec.law_at
            spec = cls(lambda x: table.get(x) or default(x), f"{spec.name}+override")
        return spec

    @classmethod
    def load(cls, path: str) -> "BmcSpec":
        return cls.create_from(load_toml(path), os.path.dirname(path))


def _resolve(base_dir: str, path: str) -> str:
    return path if os.path.isabs(path) else os.path.join(base_dir, path)


def load_toml(path: str) -> Dict:
    with open(path, "rb") as f:
        try:
            return tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ValidationError(f"invalid TOML ({e})", path)


def parse_state(value) -> State:
    if isinstance(value, list):
        return tuple(value)
    return value


def _displacement(kind: str, step, description: Dict):
    if kind == "joint":
        return JointDisplacement(step, description)
    return IndependentDisplacement(step, description)


def lattice_zd(law: OffspringLaw, d: int = 1, kind: str = "independent") -> BmcSpec:
    """
    Z^d with nearest-neighbour steps; states are ints for d = 1 and tuples otherwise
    """
    if d < 1:
        raise ValidationError(f"dimension must be >= 1, got {d}", "d")
    if d == 1:
        offsets = [(-1, 0.5), (1, 0.5)]
    else:
        offsets = []
        for axis in range(d):
            for sign in (-1, 1):
                unit = [0] * d
                unit[axis] = sign
                offsets.append((tuple(unit), 1.0 / (2 * d)))
    description = {"kind": kind, "offsets": [[list(o) if isinstance(o, tuple) else o, p] for o, p in offsets]}
    displaced = law.with_displacement(_displacement(kind, offset_steps(offsets), description))
    return BmcSpec.homogeneous(displaced, f"lattice_z{d}")


def graph_file(path: str, law: OffspringLaw, kind: str = "independent") -> BmcSpec:
    """
    Weighted directed graph from a CSV edge list with header source,target[,weight]
    Children move along out-edges with probability proportional to the weight; a vertex without
    out-edges keeps its children in place.
    """
    edges: Dict[State, Dict[State, float]] = defaultdict(lambda: defaultdict(float))
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or not {"source", "target"} <= set(reader.fieldnames):
            raise ValidationError("expected header source,target[,weight]", path)
        for line, record in enumerate(reader, start=2):
            try:
                weight = float(record.get("weight") or 1.0)
            except ValueError:
                raise ValidationError(f"bad weight on line {line}", f"{path}:weight")
            if weight < 0:
                raise ValidationError(f"negative weight on line {line}", f"{path}:weight")
            edges[_label(record["source"])][_label(record["target"])] += weight

    def step(x: State) -> List[Tuple[State, float]]:
        out = edges.get(x)
        if not out:
            return [(x, 1.0)]
        total = sum(out.values())
        return [(y, w / total) for y, w in out.items()]

    displaced = law.with_displacement(_displacement(kind, step, {"kind": kind, "path": path}))
    return BmcSpec.homogeneous(displaced, f"graph:{path}")


def _label(text: str) -> State:
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        return text


def layered_dag(law: OffspringLaw, width: int, kind: str = "independent") -> BmcSpec:
    """
    Complete layered DAG: states (layer, i) with i < width, children move uniformly to the next layer
    """
    if width < 1:
        raise ValidationError(f"width must be >= 1, got {width}", "width")

    def step(x: State) -> List[Tuple[State, float]]:
        layer, _ = x
        return [((layer + 1, j), 1.0 / width) for j in range(width)]

    displaced = law.with_displacement(_displacement(kind, step, {"kind": kind, "width": width}))
    return BmcSpec.homogeneous(displaced, f"layered_dag:{width}")


class BmcSimulator(Simulator):
    """
    Generation-by-generation simulation of a branching Markov chain
    Particles are kept as a state -> count multiset; with track_lineage every particle is kept individually.
    """

    def __init__(self, spec: BmcSpec, track_lineage: bool = False):
        super().__init__()
        self.spec = spec
        self.track_lineage = track_lineage

    def initial(self, start: State) -> ParticleSystem:
        if self.track_lineage:
            return ParticleSystem(0, particles=[start], lineage=[])
        return ParticleSystem.single(start)

    def step(self, system: ParticleSystem, rng: np.random.Generator) -> ParticleSystem:
        if self.track_lineage:
            return self.step_lineage(system, rng)

        occupation: Dict[State, int] = defaultdict(int)
        for x, c in system.occupation.items():
            law = self.spec.law_at(x)
            split = rng.multinomial(c, law.probs)
            litters = {int(n): int(k) for n, k in zip(law.counts, split) if k}
            if law.displacement is None:
                occupation[x] += sum(n * k for n, k in litters.items())
            else:
                for y, k in law.displacement.place_counts(x, litters, rng).items():
                    occupation[y] += k
        return ParticleSystem(system.time + 1, occupation=occupation)

    def step_lineage(self, system: ParticleSystem, rng: np.random.Generator) -> ParticleSystem:
        particles: List[State] = []
        parents: List[int] = []
        for i, x in enumerate(system.particles):
            children = sample_offspring(self.spec.law_at(x), x, rng)
            particles.extend(children)
            parents.extend([i] * len(children))
        lineage = system.lineage + [np.array(parents, dtype=np.int64)]
        return ParticleSystem(system.time + 1, particles=particles, lineage=lineage)


def _kernel_of(spec: Union[BmcSpec, ExpectationKernel]) -> ExpectationKernel:
    return spec.kernel if isinstance(spec, BmcSpec) else spec


def expected_count_sequence(
    spec: Union[BmcSpec, ExpectationKernel],
    start: State,
    n_max: int,
    cap: int = DEFAULT_CAP,
) -> np.ndarray:
    """
    E_start[N_k] for k = 0..n_max by exact sparse propagation over the states reachable in n_max steps
    """
    if n_max < 0:
        raise ValidationError(f"must be >= 0, got {n_max}", "n")
    truncation = _kernel_of(spec).reachable(start, n_max, cap)
    transposed = truncation.matrix.T.tocsr()
    v = np.zeros(len(truncation))
    v[truncation.index[start]] = 1.0
    sequence = [1.0]
    for _ in range(n_max):
        v = transposed @ v
        sequence.append(float(v.sum()))
    return np.array(sequence)


def expected_counts(
    spec: Union[BmcSpec, ExpectationKernel],
    start: State,
    n: int,
    cap: int = DEFAULT_CAP,
) -> float:
    return float(expected_count_sequence(spec, start, n, cap)[n])


def simulate(
    spec: BmcSpec,
    start: State,
    horizon: int,
    cap: int,
    rng: Union[RandomSource, np.random.Generator],
) -> PopulationTrace:
    if cap < 1:
        raise ValidationError(f"must be >= 1, got {cap}", "cap")
    generator = rng.generator() if isinstance(rng, RandomSource) else rng
    trace, _ = BmcSimulator(spec).run(start, horizon, cap, generator)
    return trace


def survival_probability_mc(
    spec: BmcSpec,
    start: State,
    horizon: int,
    cap: int,
    replicas: int,
    rng: RandomSource,
    threads: int = 1,
    block_size: int = DEFAULT_BLOCK_SIZE,
) -> MonteCarloEstimate:
    """
    Fraction of replicas alive at the horizon or stopped at the population cap
    """
    if cap < 1:
        raise ValidationError(f"must be >= 1, got {cap}", "cap")

    def run_block(block: int, size: int) -> Tuple[int, int]:
        generator = block_source(rng, block).generator()
        if spec.law is not None:
            _, codes = simulate_generations(spec.law, size, horizon, cap, generator)
            return int(np.count_nonzero(codes == 1)), int(np.count_nonzero(codes == 2))
        simulator = BmcSimulator(spec)
        extinct = capped = 0
        for _ in range(size):
            trace, _ = simulator.run(start, horizon, cap, generator)
            extinct += trace.terminator is Terminator.extinct
            capped += trace.terminator is Terminator.cap_hit
        return extinct, capped

    results = map_blocks(run_block, replicas, block_size, threads)
    extinct = sum(r[0] for r in results)
    capped = sum(r[1] for r in results)

    law = spec.law if spec.law is not None else spec.law_at(start)
    q = extinction_probability(law)
    metadata = {
        "horizon": horizon,
        "cap": cap,
        "extinct": extinct,
        "cap_hits": capped,
        # probability that a population at the cap still dies out, single-type heuristic
        "cap_bias_bound": float(q**cap),
    }
    if capped:
        logger.info(f"survival_probability_mc: {capped} of {replicas} replicas stopped at cap {cap}")
    return MonteCarloEstimate.from_frequency(replicas - extinct, replicas, metadata)
