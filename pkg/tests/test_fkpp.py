import math
import os
import unittest

import numpy as np

from branchlab.bmc import load_toml
from branchlab.core import RandomSource
from branchlab.errors import DomainError, ValidationError
from branchlab.fields import Constant, Indicator, Ramp, Sum
from branchlab.fkpp import (
    BranchPotential,
    FkppProblem,
    Grid1D,
    critical_length,
    expected_mass_trajectory,
    lattice_kernel_1d,
    maximal_stationary_via_longtime,
    mckean_duality_check,
    nonlinearity,
    principal_eigenpair,
    principal_eigenvalue_1d,
    solve_parabolic,
    stationary_monotone,
    stationary_residual,
)
from branchlab.motion import Boundary, MotionSpec

from .fixtures import SPECS, bbm_interval, binary_branching


def dirichlet_eigenvalue(length: float, beta: float = 1.0) -> float:
    return beta - math.pi**2 / (2 * length**2)


class TestEigenvalue(unittest.TestCase):
    def test_dirichlet_interval(self):
        for length in (2.0, 3.0):
            motion, branch = bbm_interval(length)
            estimate = principal_eigenvalue_1d(motion, BranchPotential(branch))
            self.assertLess(abs(estimate.value - dirichlet_eigenvalue(length)), 1e-3)
            self.assertLessEqual(estimate.lower, estimate.value)

    def test_propagator_eigenpair(self):
        motion, branch = bbm_interval(3.0)
        potential = BranchPotential(branch)
        grid = Grid1D.for_motion(motion)
        lam, phi = principal_eigenpair(motion, potential, grid)
        dense = grid.operator(motion, potential(grid.interior)).toarray()
        # Crank-Nicolson with dt = 0.01 is off by about lambda^3 dt^2 / 12
        self.assertAlmostEqual(lam, float(np.max(np.linalg.eigvals(dense).real)), delta=1e-5)
        self.assertEqual(float(phi.max()), 1.0)
        self.assertTrue(np.all(phi > 0))

        shifted, _ = principal_eigenpair(motion, Sum([potential, Constant(0.5)]), grid)
        self.assertAlmostEqual(shifted - lam, 0.5, delta=2e-5)

    def test_critical_length(self):
        sweep = critical_length(binary_branching(), [2.0, 2.25, 2.5])
        self.assertLess(sweep["eigenvalues"][0], 0.0)
        self.assertGreater(sweep["eigenvalues"][-1], 0.0)
        self.assertLess(abs(sweep["critical_length"] - math.pi / math.sqrt(2)), 0.01)


class TestNonlinearity(unittest.TestCase):
    def test_binary(self):
        self.assertAlmostEqual(nonlinearity(binary_branching(), 0.5, 1.0), 0.25)
        self.assertEqual(nonlinearity(binary_branching(), 0.0, 1.0), 0.0)
        with self.assertRaises(DomainError):
            nonlinearity(binary_branching(), 1.5, 1.0)


class TestParabolic(unittest.TestCase):
    def setUp(self):
        motion, branch = bbm_interval(4.0)
        self.problem = FkppProblem(motion, branch)

    def test_range_and_comparison(self):
        low = solve_parabolic(self.problem.with_initial(Indicator(1.0, 2.0, 0.5)), 1.0).final
        high = solve_parabolic(self.problem.with_initial(Ramp(0.0, 4.0, 0.5, 1.0)), 1.0).final
        for field in (low, high):
            self.assertGreaterEqual(field.values.min(), 0.0)
            self.assertLessEqual(field.values.max(), 1.0)
        self.assertTrue(np.all(low.values <= high.values + 1e-12))

    def test_zero_is_stationary(self):
        trajectory = solve_parabolic(self.problem.with_initial(Constant(0.0)), 0.5)
        self.assertEqual(float(np.abs(trajectory.final.values).max()), 0.0)
        self.assertEqual(trajectory.max_clamp, 0.0)

    def test_dt_bound(self):
        with self.assertRaises(ValidationError):
            solve_parabolic(self.problem, 1.0, dt=0.5)

    def test_expected_mass(self):
        # no killing and constant r (m - 1) = 1: E_x[N_t] = e^t everywhere
        motion = MotionSpec.brownian(
            0.0, 4.0, left_boundary=Boundary.reflecting, right_boundary=Boundary.reflecting
        )
        trajectory = expected_mass_trajectory(motion, binary_branching(), 1.0)
        self.assertAlmostEqual(trajectory.value(2.0, 1.0) / math.e, 1.0, delta=1e-3)


class TestStationary(unittest.TestCase):
    def test_supercritical_interval(self):
        motion, branch = bbm_interval(6.0)
        problem = FkppProblem(motion, branch)
        field = stationary_monotone(problem)
        self.assertLess(stationary_residual(problem, field), 1e-6)
        self.assertGreater(field.values.max(), 0.5)
        longtime = maximal_stationary_via_longtime(problem, 40.0)
        self.assertLess(float(np.max(np.abs(longtime.values - field.values))), 1e-4)

    def test_subcritical_interval(self):
        motion, branch = bbm_interval(2.0)
        problem = FkppProblem(motion, branch)
        self.assertEqual(float(stationary_monotone(problem).values.max()), 0.0)
        self.assertLess(float(maximal_stationary_via_longtime(problem, 80.0).values.max()), 1e-4)

    def test_shift_must_dominate(self):
        motion, branch = bbm_interval(6.0)
        with self.assertRaises(ValidationError):
            stationary_monotone(FkppProblem(motion, branch), shift=0.5)


class TestGrid(unittest.TestCase):
    def test_validation(self):
        with self.assertRaises(ValidationError):
            Grid1D(0.0, 1.0, 4)
        with self.assertRaises(ValidationError):
            Grid1D.for_motion(MotionSpec.brownian())
        grid = Grid1D(0.0, 1.0, 20, Boundary.killing, Boundary.reflecting)
        self.assertEqual(grid.unknown[0], 1)
        self.assertEqual(grid.unknown[-1], 20)

    def test_lattice_kernel(self):
        motion, branch = bbm_interval(2.0)
        kernel = lattice_kernel_1d(motion, BranchPotential(branch), h=0.001)
        row = kernel.row(10)
        self.assertAlmostEqual(sum(row.values()), 1.001)
        with self.assertRaises(ValidationError):
            lattice_kernel_1d(motion, BranchPotential(branch), h=0.1)

    def test_spec_file(self):
        problem = FkppProblem.create_from(load_toml(os.path.join(SPECS, "fkpp.toml")))
        self.assertEqual(problem.motion.right, 6.0)
        self.assertEqual(problem.initial(np.array(3.0)), 0.5)
        with self.assertRaises(ValidationError):
            FkppProblem.create_from({"branch": {}})


class TestDuality(unittest.TestCase):
    def test_small_duality(self):
        motion, branch = bbm_interval(2.0)
        problem = FkppProblem(motion, branch)
        report = mckean_duality_check(problem, Constant(0.5), 0.5, 2000, RandomSource(3), points=3)
        self.assertEqual(report.x.size, 3)
        self.assertLess(report.max_discrepancy, 5.0)


if __name__ == "__main__":
    unittest.main()
