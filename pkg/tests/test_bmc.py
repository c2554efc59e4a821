import os
import tempfile
import unittest

import numpy as np

from branchlab.bmc import (
    BmcSpec,
    ExpectationKernel,
    expected_count_sequence,
    expected_counts,
    graph_file,
    layered_dag,
    simulate,
    survival_probability_mc,
)
from branchlab.core import OffspringLaw, RandomSource, Terminator
from branchlab.errors import TruncationOverflowError, ValidationError

from .fixtures import DOUBLING, KILLING, QUARTER, SPECS, brw, random_kernel


class TestExpectedCounts(unittest.TestCase):
    def test_doubling(self):
        self.assertEqual(expected_counts(BmcSpec.homogeneous(DOUBLING), 0, 10), 1024.0)
        # displacement does not change the total mean
        self.assertAlmostEqual(expected_counts(brw(1.3), 0, 5), 1.3**5)

    def test_dense_oracle(self):
        m = random_kernel(2)
        kernel = ExpectationKernel.from_matrix(m)
        oracle = np.linalg.matrix_power(m, 6)[0].sum()
        self.assertAlmostEqual(expected_counts(kernel, 0, 6) / oracle, 1.0, places=12)

    def test_semigroup(self):
        m = random_kernel(4)
        kernel = ExpectationKernel.from_matrix(m)
        ma = np.linalg.matrix_power(m, 3)
        rhs = sum(ma[0, y] * expected_counts(kernel, y, 4) for y in range(m.shape[0]))
        self.assertAlmostEqual(expected_counts(kernel, 0, 7) / rhs, 1.0, places=12)

    def test_mutation_graph(self):
        spec = BmcSpec.load(os.path.join(SPECS, "mutation.toml"))
        sequence = expected_count_sequence(spec, (0, "down"), 4)
        self.assertGreaterEqual(sequence[4], 2**4)

    def test_truncation_cap(self):
        with self.assertRaises(TruncationOverflowError):
            expected_count_sequence(brw(), 0, 50, cap=20)

    def test_layered_dag(self):
        spec = layered_dag(QUARTER, 3)
        np.testing.assert_allclose(expected_count_sequence(spec, (0, 0), 5), 1.5 ** np.arange(6))


class TestSimulate(unittest.TestCase):
    def test_terminators(self):
        trace = simulate(BmcSpec.homogeneous(KILLING), 0, 10, 100, RandomSource(0))
        self.assertEqual(trace.counts.tolist(), [1, 0])
        self.assertEqual(trace.terminator, Terminator.extinct)

        trace = simulate(BmcSpec.homogeneous(DOUBLING), 0, 50, 1000, RandomSource(0))
        self.assertEqual(trace.terminator, Terminator.cap_hit)
        self.assertEqual(trace.times[-1], 10)

    def test_mean_matches_expectation(self):
        spec = brw(1.3)
        rng = RandomSource(9).generator()
        finals = np.array([simulate(spec, 0, 6, 10_000, rng).final for _ in range(2000)])
        sigma = finals.std(ddof=1) / np.sqrt(finals.size)
        self.assertLess(abs(finals.mean() - 1.3**6), 5 * sigma)

    def test_reproducible(self):
        a = simulate(brw(), 0, 8, 10_000, RandomSource(4))
        b = simulate(brw(), 0, 8, 10_000, RandomSource(4))
        np.testing.assert_array_equal(a.counts, b.counts)


class TestSurvival(unittest.TestCase):
    def test_oracles(self):
        rng = RandomSource(5)
        estimate = survival_probability_mc(BmcSpec.homogeneous(KILLING), 0, 10, 100, 500, rng)
        self.assertEqual(tuple(estimate), (0.0, 0.0))
        estimate = survival_probability_mc(BmcSpec.homogeneous(DOUBLING), 0, 20, 100, 500, rng)
        self.assertEqual(tuple(estimate), (1.0, 0.0))

        replicas = 20_000
        estimate = survival_probability_mc(BmcSpec.homogeneous(QUARTER), 0, 200, 1000, replicas, rng)
        self.assertLess(abs(estimate.estimate - 2 / 3), 4 * np.sqrt(2 / 9 / replicas))
        self.assertIn("cap_bias_bound", estimate.metadata)

    def test_threads(self):
        spec = brw(1.2)
        a = survival_probability_mc(spec, 0, 15, 500, 300, RandomSource(8), threads=1, block_size=64)
        b = survival_probability_mc(spec, 0, 15, 500, 300, RandomSource(8), threads=3, block_size=64)
        self.assertEqual(a.estimate, b.estimate)

    def test_more_children_survive_more(self):
        lower = BmcSpec.homogeneous(OffspringLaw([(0, 0.3), (1, 0.4), (2, 0.3)]))
        higher = BmcSpec.homogeneous(OffspringLaw([(0, 0.3), (1, 0.3), (2, 0.4)]))
        a = survival_probability_mc(lower, 0, 100, 1000, 5000, RandomSource(1))
        b = survival_probability_mc(higher, 0, 100, 1000, 5000, RandomSource(1))
        self.assertGreater(b.estimate, a.estimate - 4 * max(a.stderr, b.stderr))


class TestSpecFiles(unittest.TestCase):
    def test_malformed_toml(self):
        with tempfile.TemporaryDirectory() as d:
            path = os.path.join(d, "bad.toml")
            with open(path, "w") as f:
                f.write('space = "lattice_zd"\nlaw = {probs = [[0, 0.5], [2, 0.5]]\n')
            with self.assertRaises(ValidationError):
                BmcSpec.load(path)

            with open(path, "w") as f:
                f.write('space = "lattice_zd"\n')
            with self.assertRaises(ValidationError) as ctx:
                BmcSpec.load(path)
            self.assertEqual(ctx.exception.key, "law")

    def test_graph_file(self):
        with tempfile.TemporaryDirectory() as d:
            path = os.path.join(d, "edges.csv")
            with open(path, "w") as f:
                f.write("source,target,weight\n0,1,1\n0,2,3\n1,0,1\n")
            spec = graph_file(path, DOUBLING)
            row = spec.kernel.row(0)
            self.assertAlmostEqual(row[1], 0.5)
            self.assertAlmostEqual(row[2], 1.5)
            # no out-edges: children stay in place
            self.assertEqual(spec.kernel.row(2), {2: 2.0})

    def test_overrides(self):
        spec = BmcSpec.create_from(
            {
                "space": "lattice_zd",
                "law": {"probs": [[1, 1.0]]},
                "override": [{"state": 0, "probs": [[3, 1.0]]}],
            }
        )
        self.assertEqual(sum(spec.kernel.row(0).values()), 3.0)
        self.assertEqual(sum(spec.kernel.row(1).values()), 1.0)


if __name__ == "__main__":
    unittest.main()
