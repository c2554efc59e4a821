import math
import unittest

import numpy as np

from branchlab.bmp import (
    BmpConfig,
    expected_mass_pde,
    lambda_double_prime_estimate,
    local_survival_mc,
    mean_count_mc,
    minorizing_skeleton,
    product_functional_mc,
    simulate_bmp,
    skeleton_cell_edges,
    survival_probability_mc,
    total_mass_estimate,
)
from branchlab.core import RandomSource, Terminator
from branchlab.errors import DomainError, ValidationError
from branchlab.fields import Constant
from branchlab.motion import Boundary, BranchFieldSpec, MotionSpec
from branchlab.spectral import Method, spectral_radius_truncation

from .fixtures import bbm_interval, binary_branching, killing


def walled(length: float = 4.0) -> MotionSpec:
    return MotionSpec.brownian(
        0.0, length, left_boundary=Boundary.reflecting, right_boundary=Boundary.reflecting
    )


class TestConfig(unittest.TestCase):
    def test_validation(self):
        with self.assertRaises(ValidationError):
            BmpConfig(dt=0.0)
        with self.assertRaises(ValidationError):
            BmpConfig(replicas=0)
        with self.assertRaises(ValidationError) as ctx:
            BmpConfig.create_from({"dt": "coarse"})
        self.assertEqual(ctx.exception.key, "mc")

    def test_steps(self):
        cfg = BmpConfig(dt=0.01, horizon=10.0)
        self.assertEqual(cfg.n_steps, 1000)
        self.assertEqual(cfg.steps_per_unit, 100)
        with self.assertRaises(ValidationError):
            BmpConfig(dt=0.03).steps_per_unit
        self.assertEqual(BmpConfig.create_from(cfg.to_json()).to_json(), cfg.to_json())


class TestSimulate(unittest.TestCase):
    def test_no_branching(self):
        cfg = BmpConfig(dt=0.01, horizon=1.0)
        trace, system = simulate_bmp(walled(), BranchFieldSpec.none(), 2.0, cfg, RandomSource(0))
        self.assertTrue(np.all(trace.counts == 1))
        self.assertEqual(trace.terminator, Terminator.horizon)
        self.assertEqual(system.N, 1)

        estimate = mean_count_mc(walled(), BranchFieldSpec.none(), 2.0, cfg.with_replicas(50))
        self.assertEqual(tuple(estimate), (1.0, 0.0))

    def test_start_outside_domain(self):
        with self.assertRaises(ValidationError):
            simulate_bmp(walled(), binary_branching(), 5.0, BmpConfig(), RandomSource(0))

    def test_yule_mean(self):
        # binary branching at rate 1 with reflecting walls: E[N_t] = e^t
        cfg = BmpConfig(dt=0.01, horizon=1.0, replicas=4000, seed=2)
        estimate = mean_count_mc(walled(), binary_branching(), 2.0, cfg)
        self.assertLess(abs(estimate.estimate - math.e), 4 * estimate.stderr + 0.05)
        self.assertEqual(estimate.metadata["cap_hits"], 0)


class TestEstimates(unittest.TestCase):
    def test_pure_killing(self):
        cfg = BmpConfig(dt=0.01, horizon=20.0, replicas=2000, seed=4)
        survival = survival_probability_mc(walled(), killing(), 2.0, cfg.with_replicas(500))
        self.assertEqual(survival.estimate, 0.0)

        # the lifetime is exponential with mean 1
        mass = total_mass_estimate(walled(), killing(), 2.0, cfg)
        self.assertLess(abs(mass.estimate - 1.0), 4 * mass.stderr + 0.01)
        self.assertEqual(mass.metadata["censored"], 0)

    def test_product_functional_range(self):
        motion, branch = bbm_interval(2.0)
        with self.assertRaises(DomainError):
            product_functional_mc(motion, branch, 1.0, Constant(1.5), BmpConfig(replicas=10))

    def test_empty_window(self):
        motion, branch = bbm_interval(2.0)
        with self.assertRaises(ValidationError):
            local_survival_mc(motion, branch, 1.0, (1.0, 1.0), BmpConfig(replicas=10))

    def test_threads(self):
        motion, branch = bbm_interval(3.0)
        cfg = BmpConfig(dt=0.01, horizon=2.0, replicas=100, seed=7, block_size=32)
        a = survival_probability_mc(motion, branch, 1.5, cfg, threads=1)
        b = survival_probability_mc(motion, branch, 1.5, cfg, threads=3)
        self.assertEqual(a.estimate, b.estimate)


class TestExpectedMass(unittest.TestCase):
    def test_chain(self):
        motion = MotionSpec.ctmc([[-1.0, 1.0], [1.0, -1.0]])
        self.assertAlmostEqual(expected_mass_pde(motion, binary_branching(), 0, 1.0), math.e, places=10)

    def test_growth_rate(self):
        estimate = lambda_double_prime_estimate(walled(), binary_branching(), 2.0, 4.0)
        self.assertEqual(estimate.method, Method.pde)
        self.assertAlmostEqual(estimate.value, 1.0, delta=1e-3)
        self.assertLessEqual(estimate.lower, estimate.value)
        self.assertGreaterEqual(estimate.upper, estimate.value)


class TestSkeleton(unittest.TestCase):
    def test_choice(self):
        skeleton = minorizing_skeleton(binary_branching(), 0.1)
        self.assertEqual(skeleton.n0, 2)
        self.assertGreater(skeleton.leaf_cap, 1)
        self.assertLess(skeleton.epsilon_prime, 0.1)
        with self.assertRaises(ValidationError):
            minorizing_skeleton(binary_branching(), 1.0)

    def test_kernel_minorizes_time_one_mass(self):
        epsilon = 0.1
        branch = binary_branching()
        skeleton = minorizing_skeleton(branch, epsilon)
        cfg = BmpConfig(dt=0.01, horizon=1.0, replicas=400, seed=8)
        # Var N_1 of a rate 1 binary Yule tree is e^2 - e
        slack = 4.0 * math.sqrt((math.e**2 - math.e) / cfg.replicas)

        motion = walled()
        edges = skeleton_cell_edges(motion, 8)
        kernel = skeleton.expectation_kernel(motion, cfg, RandomSource(8), cells=8)
        truncation = kernel.truncate(0, 8)
        self.assertEqual(sorted(truncation.states), list(range(8)))
        mass = np.asarray(truncation.matrix.sum(axis=1)).ravel()
        for cell, x in enumerate(0.5 * (edges[:-1] + edges[1:])):
            floor = (1.0 - epsilon) * expected_mass_pde(motion, branch, x, 1.0)
            self.assertGreaterEqual(mass[truncation.index[cell]] + slack, floor)
        self.assertLessEqual(mass.max(), math.e + slack)

        rho = spectral_radius_truncation(kernel, 0, [8])[0].value
        self.assertLessEqual(rho, mass.max() + 1e-9)
        self.assertGreaterEqual(rho, mass.min() - 1e-9)

        chain = MotionSpec.ctmc(np.array([[-1.0, 1.0], [1.0, -1.0]]))
        rows = skeleton.expectation_kernel(chain, cfg, RandomSource(9)).truncate(0, 2)
        for total in np.asarray(rows.matrix.sum(axis=1)).ravel():
            self.assertGreaterEqual(total + slack, (1.0 - epsilon) * math.e)

        with self.assertRaises(ValidationError):
            skeleton_cell_edges(MotionSpec.brownian(), 8)
        np.testing.assert_allclose(skeleton_cell_edges(MotionSpec.brownian(), 2, (-1.0, 1.0)), [-1.0, 0.0, 1.0])

    def test_dominated_by_process(self):
        skeleton = minorizing_skeleton(binary_branching(), 0.1)
        cfg = BmpConfig(dt=0.01, horizon=3.0, replicas=200, seed=5)
        full, reduced = skeleton.coupled_run(walled(), 2.0, cfg)
        self.assertEqual(full.shape, (200, 4))
        self.assertTrue(np.all(full[:, 0] == 1))
        self.assertTrue(np.all(reduced[:, 0] == 1))
        self.assertTrue(np.all(reduced <= full))


if __name__ == "__main__":
    unittest.main()
