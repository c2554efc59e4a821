import unittest

from unittest import mock

import numpy as np

from branchlab.core import OffspringLaw
from branchlab.errors import ConvergenceError
from branchlab.gw import Regime, classify, extinction_probability, simulate_extinction_frequency

from .fixtures import CRITICAL, DOUBLING, QUARTER, SINGLE


class TestExtinction(unittest.TestCase):
    def test_oracles(self):
        self.assertEqual(extinction_probability(CRITICAL), 1.0)
        self.assertEqual(extinction_probability(DOUBLING), 0.0)
        self.assertAlmostEqual(extinction_probability(QUARTER), 1 / 3, delta=1e-10)
        # single child forever never dies
        self.assertEqual(extinction_probability(SINGLE), 0.0)

    def test_classification(self):
        c = classify(QUARTER)
        self.assertEqual(c.regime, Regime.supercritical)
        self.assertTrue(c.converged)
        self.assertEqual(classify(CRITICAL).regime, Regime.critical)
        self.assertEqual(classify(OffspringLaw([(0, 0.6), (1, 0.4)])).regime, Regime.subcritical)
        self.assertEqual(
            set(c.to_json()), {"mean", "regime", "extinction_prob", "iterations", "converged", "aitken"}
        )

    def test_non_monotone_iterate(self):
        with mock.patch("branchlab.gw.generating_value", side_effect=[0.5, 0.2]):
            with self.assertRaises(ConvergenceError) as raised:
                classify(QUARTER)
        self.assertEqual(raised.exception.iterations, 2)
        with mock.patch("branchlab.gw.generating_value", return_value=1.5):
            with self.assertRaises(ConvergenceError):
                extinction_probability(QUARTER)

    def test_regime_matches_extinction(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            law = OffspringLaw(list(enumerate(rng.dirichlet(np.ones(4)))))
            q = extinction_probability(law)
            if law.mean > 1.0:
                self.assertLess(q, 1.0)
            else:
                self.assertEqual(q, 1.0)

    def test_monte_carlo_agreement(self):
        replicas = 100_000
        frequency, stderr = simulate_extinction_frequency(QUARTER, replicas, 200, 1000, seed=1)
        self.assertLess(abs(frequency - 1 / 3), 4 * np.sqrt((1 / 3) * (2 / 3) / replicas))
        self.assertGreater(stderr, 0.0)


if __name__ == "__main__":
    unittest.main()
