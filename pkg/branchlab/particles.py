import logging

from abc import abstractmethod, ABC
from collections import Counter
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import PopulationTrace, State, Terminator
from .errors import ValidationError


class ParticleSystem:
    """
    Particle positions at one time stamp
    Positions are discrete states (kept as an occupation multiset, or as an ordered particle list when
    lineage is tracked) or real coordinates (kept as an array).
    lineage, when tracked, holds one parent-index array per generation: lineage[k][i] is the index in
    generation k of the parent of particle i of generation k + 1.
    """

    def __init__(
        self,
        time: float,
        occupation: Optional[Dict[State, int]] = None,
        positions: Optional[np.ndarray] = None,
        particles: Optional[List[State]] = None,
        lineage: Optional[List[np.ndarray]] = None,
    ):
        self.time = time
        if particles is not None:
            occupation = Counter(particles)
        self.occupation = {x: c for x, c in (occupation or {}).items() if c > 0}
        self.positions = positions
        self.particles = particles
        self.lineage = lineage

    @classmethod
    def single(cls, start: State, time: float = 0.0) -> "ParticleSystem":
        return cls(time, occupation={start: 1})

    @classmethod
    def from_positions(
        cls, time: float, positions: Sequence, lineage: Optional[List[np.ndarray]] = None
    ) -> "ParticleSystem":
        positions = np.asarray(positions, dtype=np.float64)
        return cls(time, positions=positions, lineage=lineage)

    def __str__(self):
        return f"ParticleSystem(t={self.time}, N={self.N})"

    @property
    def N(self) -> int:
        if self.positions is not None:
            return int(self.positions.size)
        return int(sum(self.occupation.values()))

    def counts(self) -> Dict[State, int]:
        if self.positions is not None:
            return dict(Counter(self.positions.tolist()))
        return dict(self.occupation)

    def count_in(self, left: float, right: float) -> int:
        """
        Particles strictly inside the window (left, right)
        """
        if self.positions is not None:
            return int(np.count_nonzero((self.positions > left) & (self.positions < right)))
        return sum(c for x, c in self.occupation.items() if left < x < right)


class Simulator(ABC):
    """
    The simulator provides a step method which advances a particle system by one time unit
    """

    def __init__(self):
        self.logger = logging.getLogger(__name__)

    def initial(self, start: State) -> ParticleSystem:
        return ParticleSystem.single(start)

    @abstractmethod
    def step(self, system: ParticleSystem, rng: np.random.Generator) -> ParticleSystem:
        pass

    def run(
        self,
        start: State,
        horizon: int,
        cap: int,
        rng: np.random.Generator,
    ) -> Tuple[PopulationTrace, ParticleSystem]:
        """
        Step from a single particle at start until the horizon, extinction or the population cap
        """
        if horizon < 0:
            raise ValidationError(f"must be >= 0, got {horizon}", "horizon")
        system = self.initial(start)
        times, counts = [0], [1]
        terminator = Terminator.horizon
        for k in range(horizon):
            system = self.step(system, rng)
            times.append(k + 1)
            counts.append(system.N)
            if system.N == 0:
                terminator = Terminator.extinct
                break
            if system.N >= cap:
                terminator = Terminator.cap_hit
                break
        self.logger.debug(f"run: {terminator.value} after {times[-1]} steps, N={counts[-1]}")
        return PopulationTrace(times, counts, terminator), system
