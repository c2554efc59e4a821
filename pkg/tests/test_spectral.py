import math
import unittest

from unittest import mock

import numpy as np

from scipy import sparse

from branchlab.bmc import BmcSpec
from branchlab.errors import ValidationError
from branchlab.spectral import (
    Method,
    certify_rho_prime,
    certify_survival_condition,
    dense_perron,
    period,
    perron_certificate,
    reversible_criterion_check,
    rho_double_prime_growth,
    spectral_radius_truncation,
)

from .fixtures import DOUBLING, KILLING, brw, random_sparse_kernel


class TestPerron(unittest.TestCase):
    def test_dense(self):
        rho, v = dense_perron(np.array([[1.0, 1.0], [1.0, 1.0]]))
        self.assertAlmostEqual(rho, 2.0, places=10)
        np.testing.assert_allclose(v, [1.0, 1.0])

        # period 2 goes through the shift
        m = np.array([[0.0, 2.0], [2.0, 0.0]])
        self.assertEqual(period(sparse.csr_matrix(m)), 2)
        self.assertAlmostEqual(dense_perron(m)[0], 2.0, places=10)

        with self.assertRaises(ValidationError):
            dense_perron(np.array([[1.0, 1.0], [0.0, 1.0]]))
        with self.assertRaises(ValidationError):
            dense_perron(np.array([[1.0, -1.0], [1.0, 1.0]]))

    def test_truncation_monotone(self):
        # symmetric walk on Z with mean 1.3: the truncation [-k, k] has rho = 1.3 cos(pi / (2k + 2))
        ks = [4, 8, 16, 32]
        estimates = spectral_radius_truncation(brw(1.3), 0, [2 * k + 1 for k in ks], threads=2)
        values = [e.value for e in estimates]
        self.assertEqual(values, sorted(values))
        for k, e in zip(ks, estimates):
            self.assertAlmostEqual(e.value, 1.3 * math.cos(math.pi / (2 * k + 2)), places=6)
            self.assertEqual(e.method, Method.truncation)
            self.assertEqual(e.lower, e.value)
        self.assertLess(abs(values[-1] - 1.3), 0.02)

    def test_lower_is_running_max(self):
        roots = {3: (1.2, np.ones(3)), 5: (1.1, np.ones(5)), 9: (1.25, np.ones(9))}
        with mock.patch("branchlab.spectral.truncation_perron", side_effect=lambda t: roots[len(t)]):
            estimates = spectral_radius_truncation(brw(1.3), 0, [3, 5, 9])
        self.assertEqual([e.lower for e in estimates], [1.2, 1.2, 1.25])
        self.assertEqual([e.metadata["rho"] for e in estimates], [1.2, 1.1, 1.25])
        self.assertTrue(all(e.lower <= e.value for e in estimates))

    def test_sizes_must_ascend(self):
        with self.assertRaises(ValidationError):
            spectral_radius_truncation(brw(), 0, [8, 4])


class TestGrowth(unittest.TestCase):
    def test_doubling(self):
        estimate = rho_double_prime_growth(BmcSpec.homogeneous(DOUBLING), 0, 20)
        self.assertAlmostEqual(estimate.value, 2.0)
        self.assertAlmostEqual(estimate.lower, 2.0)
        with self.assertRaises(ValidationError):
            rho_double_prime_growth(BmcSpec.homogeneous(DOUBLING), 0, 4)

    def test_certificate_chain(self):
        for seed in range(5):
            kernel = random_sparse_kernel(seed)
            certificate = perron_certificate(kernel, 0, 12)
            self.assertTrue(certificate.valid, f"seed {seed}: {certificate}")
            self.assertGreaterEqual(certificate.margin, -1e-10)
            growth = rho_double_prime_growth(kernel, 0, 200)
            self.assertGreaterEqual(growth.upper, certificate.rho - 1e-6)

    def test_bad_test_function(self):
        kernel = random_sparse_kernel(0)
        truncation = kernel.truncate(0, 12)
        with self.assertRaises(ValidationError):
            certify_rho_prime(kernel, lambda x: 2.0, 1.0, truncation)
        # u = 0 certifies nothing
        self.assertFalse(certify_rho_prime(kernel, {}, 1.0, truncation).valid)


class TestSurvivalCondition(unittest.TestCase):
    def test_local_laws(self):
        spec = BmcSpec.homogeneous(DOUBLING)
        truncation = spec.kernel.truncate(0, 1)
        # 2 exp(-0.2) >= 1
        self.assertTrue(certify_survival_condition(spec, lambda x: 1.0, 1.0, 0.1, truncation).valid)
        spec = BmcSpec.homogeneous(KILLING)
        self.assertFalse(certify_survival_condition(spec, lambda x: 1.0, 1.0, 0.1, truncation).valid)

    def test_displaced(self):
        spec = brw(1.3)
        truncation = spec.kernel.truncate(0, 21)
        certificate = certify_survival_condition(spec, lambda x: 1.0, 1.0, 0.05, truncation)
        # 0.7 e^{-0.05} + 0.6 e^{-0.1}
        self.assertAlmostEqual(certificate.margin, 0.7 * math.exp(-0.05) + 0.6 * math.exp(-0.1) - 1.0)
        self.assertTrue(certificate.valid)
        with self.assertRaises(ValidationError):
            certify_survival_condition(spec, lambda x: 1.0, 1.0, 0.0, truncation)


class TestReversible(unittest.TestCase):
    def test_symmetric_walk(self):
        report = reversible_criterion_check(brw(1.3), 0, n_max=40)
        self.assertIsNone(report.violated_at)
        self.assertTrue(report.hypotheses_hold)
        self.assertTrue(report.agreement)
        self.assertLess(abs(report.rho_c.value - report.rho_double_prime.value), 0.02)

    def test_one_way_graph(self):
        # children only move right, so m^n(y, 0) = 0
        spec = BmcSpec.create_from({"space": "layered_dag", "width": 1, "law": {"probs": [[2, 1.0]]}})
        report = reversible_criterion_check(spec, (0, 0), n_max=10)
        self.assertEqual(report.violated_at, 1)
        self.assertFalse(report.hypotheses_hold)
        self.assertIsNone(report.agreement)


if __name__ == "__main__":
    unittest.main()
