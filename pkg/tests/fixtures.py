import logging
import os

import numpy as np

from branchlab.bmc import BmcSpec, ExpectationKernel, lattice_zd
from branchlab.core import OffspringLaw
from branchlab.motion import BINARY, DEATH, BranchChannel, BranchFieldSpec, MotionSpec
from branchlab.fields import Constant

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
SPECS = os.path.join(ROOT, "specs")

# Offspring laws with known Galton-Watson answers
QUARTER = OffspringLaw([(0, 0.25), (2, 0.75)])  # q = 1/3
CRITICAL = OffspringLaw([(0, 0.5), (2, 0.5)])  # q = 1
DOUBLING = OffspringLaw([(2, 1.0)])  # q = 0
KILLING = OffspringLaw([(0, 1.0)])
SINGLE = OffspringLaw([(1, 1.0)])


def brw(mean: float = 1.3) -> BmcSpec:
    """
    Symmetric nearest-neighbour branching random walk on Z with 1 or 2 children
    """
    p2 = mean - 1.0
    return lattice_zd(OffspringLaw([(1, 1.0 - p2), (2, p2)]))


def random_kernel(seed: int, size: int = 5, density: float = 0.5) -> np.ndarray:
    """
    Dense nonnegative matrix with a positive cycle through every state, so it is irreducible
    """
    rng = np.random.default_rng(seed)
    m = rng.uniform(0.0, 1.0, (size, size)) * (rng.uniform(size=(size, size)) < density)
    for i in range(size):
        m[i, (i + 1) % size] += 0.5
    return m


def random_sparse_kernel(seed: int, size: int = 12) -> ExpectationKernel:
    return ExpectationKernel.from_matrix(random_kernel(seed, size, 0.25), f"random:{seed}")


def binary_branching(rate: float = 1.0) -> BranchFieldSpec:
    return BranchFieldSpec([BranchChannel(Constant(rate), BINARY)])


def killing(rate: float = 1.0) -> BranchFieldSpec:
    return BranchFieldSpec([BranchChannel(Constant(rate), DEATH)])


def bbm_interval(length: float, rate: float = 1.0):
    """
    Binary branching Brownian motion killed at the ends of (0, length)
    """
    return MotionSpec.brownian(0.0, length), binary_branching(rate)


if __name__ == "__main__":

    # Render a few kernels for inspection - Used for debugging
    from branchlab.util import render_kernel

    logging.basicConfig(level=logging.DEBUG)
    os.makedirs("out", exist_ok=True)
    render_kernel(brw().kernel.reachable(0, 3), "out/brw.dot")
    render_kernel(random_sparse_kernel(0).truncate(0, 12), "out/random.dot")
