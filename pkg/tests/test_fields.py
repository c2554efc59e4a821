import unittest

import numpy as np

from branchlab.bmc import BmcSimulator
from branchlab.core import RandomSource
from branchlab.errors import ValidationError
from branchlab.fields import Constant, Field, Indicator, InvSqrt, Occupation, Ramp, Step
from branchlab.motion import DEATH, Boundary, BranchFieldSpec, MotionKind, MotionSpec
from branchlab.particles import ParticleSystem

from .fixtures import brw


class TestFields(unittest.TestCase):
    def test_create_from(self):
        self.assertIsInstance(Field.create_from(2.5), Constant)
        ramp = Field.create_from({"kind": "ramp", "left": 0, "right": 2})
        np.testing.assert_allclose(ramp(np.array([-1.0, 1.0, 3.0])), [0.0, 0.5, 1.0])
        with self.assertRaises(ValidationError) as ctx:
            Field.create_from({"kind": "indicator", "left": 0}, "initial")
        self.assertEqual(ctx.exception.key, "initial.right")
        with self.assertRaises(ValidationError):
            Field.create_from({"kind": "spline"})

    def test_bounds(self):
        g = InvSqrt(1.0, 1.0)
        np.testing.assert_allclose(g(np.array([0.5, 1.0, 4.0])), [0.0, 1.0, 0.5])
        self.assertEqual((g.sup, g.inf), (1.0, 0.0))
        self.assertEqual(Indicator(0, 1, -2.0).inf, -2.0)
        step = Step([1.0, 2.0], [0.0, 3.0, 1.0])
        np.testing.assert_allclose(step(np.array([0.5, 1.0, 2.5])), [0.0, 3.0, 1.0])
        self.assertEqual(Ramp(0, 1, 2.0, -1.0).sup, 2.0)
        self.assertEqual(Constant(1.0).plus(0.5).sup, 1.5)
        self.assertEqual(Constant(2.0).scaled(-1.0).inf, -2.0)

    def test_occupation(self):
        # A = [0, 1) + [2, 10) + ..., B = [1, 2) + [10, 18) + ...
        field = Occupation(3)
        np.testing.assert_allclose(
            field(np.array([-0.5, 0.5, 1.5, 5.0, 12.0, 100.0, 200.0])),
            [0.0, 1.0, -1.0, 1.0, -1.0, -1.0, 0.0],
        )


class TestMotion(unittest.TestCase):
    def test_create_from(self):
        motion = MotionSpec.create_from({"left": 0.0, "right": 3.0, "right_boundary": "reflecting"})
        self.assertEqual(motion.kind, MotionKind.diffusion_1d)
        self.assertTrue(motion.bounded)
        self.assertEqual(motion.right_boundary, Boundary.reflecting)
        self.assertFalse(MotionSpec.create_from({}).bounded)
        with self.assertRaises(ValidationError):
            MotionSpec.create_from({"kind": "levy"})
        with self.assertRaises(ValidationError):
            MotionSpec.create_from({"kind": "ctmc"})

    def test_radial_drift(self):
        motion = MotionSpec.radial(3, 5.0, 0.1)
        np.testing.assert_allclose(motion.effective_drift(np.array([1.0, 2.0])), [1.0, 0.5])

    def test_box(self):
        box = MotionSpec.brownian(left=0.0).box(0.0, 10.0)
        self.assertEqual((box.left, box.right), (0.0, 5.0))
        self.assertEqual(box.left_boundary, Boundary.killing)
        self.assertEqual(box.right_boundary, Boundary.reflecting)


class TestBranching(unittest.TestCase):
    def test_channels(self):
        branch = BranchFieldSpec.binary(1.0).with_channel(Constant(0.5), DEATH)
        self.assertEqual(branch.sup_rate, 1.5)
        # r (m - 1) summed over channels
        self.assertAlmostEqual(float(branch.potential(np.array(0.0))), 0.5)
        law = branch.offspring_at(0.0)
        self.assertAlmostEqual(law.p(2), 2 / 3)
        self.assertAlmostEqual(law.p(0), 1 / 3)

    def test_nonlinearity(self):
        branch = BranchFieldSpec.binary(1.0)
        u = np.linspace(0.0, 1.0, 11)
        # binary branching: f(u) = u (1 - u)
        np.testing.assert_allclose(branch.nonlinearity(u, 0.0), u * (1.0 - u), atol=1e-15)

    def test_create_from(self):
        branch = BranchFieldSpec.create_from(
            {"channel": [{"rate": {"kind": "inv_sqrt"}, "probs": [[0, 1.0]]}]}
        )
        self.assertEqual(branch.sup_rate, 1.0)
        with self.assertRaises(ValidationError):
            BranchFieldSpec.create_from({"channel": [{"probs": [[0, 1.0]]}]})
        with self.assertRaises(ValidationError):
            BranchFieldSpec.create_from({"channel": [{"rate": -1.0, "probs": [[0, 1.0]]}]})


class TestParticles(unittest.TestCase):
    def test_counts(self):
        system = ParticleSystem.from_positions(1.0, [0.5, 1.5, 2.5, 0.5])
        self.assertEqual(system.N, 4)
        self.assertEqual(system.count_in(0.0, 2.0), 3)
        self.assertEqual(system.counts()[0.5], 2)
        self.assertEqual(ParticleSystem(0, occupation={1: 2, 3: 0}).N, 2)

    def test_lineage(self):
        simulator = BmcSimulator(brw(1.5), track_lineage=True)
        trace, system = simulator.run(0, 5, 10_000, RandomSource(2).generator())
        self.assertEqual(len(system.lineage), len(trace) - 1)
        for k, parents in enumerate(system.lineage):
            self.assertEqual(parents.size, trace.counts[k + 1])
            if parents.size:
                self.assertLess(int(parents.max()), trace.counts[k])
        # odd generations of the nearest-neighbour walk sit on odd sites
        if system.N:
            self.assertTrue(all(abs(x) % 2 == len(system.lineage) % 2 for x in system.particles))


if __name__ == "__main__":
    unittest.main()
