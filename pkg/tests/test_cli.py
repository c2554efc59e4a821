import json
import os
import subprocess
import sys
import tempfile
import unittest

from branchlab.commands import GwCommand, ReproCommand, SpectralCommand, command_for
from branchlab.config import ExperimentConfig
from branchlab.errors import ValidationError
from branchlab.util import write_csv, write_json

from .fixtures import ROOT, SPECS


CRITICAL_LAW = os.path.join(SPECS, "critical.json")


def branchlab(*args: str, out: str) -> subprocess.CompletedProcess:
    return subprocess.run(
        [sys.executable, "branchlab.py", "--out", out, *args],
        cwd=ROOT,
        capture_output=True,
        text=True,
        timeout=600,
    )


class TestConfig(unittest.TestCase):
    def test_parse(self):
        config = ExperimentConfig.parse(["--seed", "7", "--tol", "reversible=0.1", "gw", "--law", CRITICAL_LAW])
        self.assertEqual(config.subcommand, "gw")
        self.assertEqual(config.seed, 7)
        self.assertEqual(config.tolerance("reversible", 0.05), 0.1)
        self.assertEqual(config.tolerance("ceiling_margin", 0.1), 0.1)
        self.assertIsInstance(command_for(config), GwCommand)

    def test_validation(self):
        with self.assertRaises(ValidationError):
            ExperimentConfig.parse(["--replicas", "0", "gw", "--law", CRITICAL_LAW])
        with self.assertRaises(ValidationError):
            ExperimentConfig.parse(["--tol", "reversible", "gw", "--law", CRITICAL_LAW])

    def test_config_hash(self):
        base = ["gw", "--law", CRITICAL_LAW]
        a = ExperimentConfig.parse(["--threads", "1"] + base).config_hash
        b = ExperimentConfig.parse(["--threads", "4", "--out", "elsewhere"] + base).config_hash
        c = ExperimentConfig.parse(["--seed", "1"] + base).config_hash
        self.assertEqual(a, b)
        self.assertNotEqual(a, c)


class TestArtifacts(unittest.TestCase):
    def test_write_csv(self):
        with tempfile.TemporaryDirectory() as d:
            path = os.path.join(d, "series.csv")
            write_csv(path, ("n", "value"), [(0, 1.0), (1, 0.1)])
            with open(path, encoding="utf-8") as f:
                self.assertEqual(f.read(), "n,value\n0,1.0\n1,0.1\n")

    def test_write_json(self):
        with tempfile.TemporaryDirectory() as d:
            path = os.path.join(d, "result.json")
            write_json(path, {"b": 1, "a": [1, 2]})
            with open(path, encoding="utf-8") as f:
                text = f.read()
            self.assertLess(text.index('"a"'), text.index('"b"'))
            self.assertTrue(text.endswith("\n"))

    def test_command_write(self):
        with tempfile.TemporaryDirectory() as d:
            config = ExperimentConfig.parse(["--out", d, "gw", "--law", CRITICAL_LAW])
            command = GwCommand(config)
            command.run()
            paths = command.write()
            self.assertEqual([os.path.basename(p) for p in paths], ["gw.json", "gw.csv"])
            with open(paths[0], encoding="utf-8") as f:
                payload = json.load(f)
            self.assertEqual(payload["result"]["regime"], "critical")
            self.assertEqual(payload["config_hash"], config.config_hash)
            self.assertIn("version", payload)
            self.assertEqual(command.series[0], (0.0, 0.5))
            s, value = command.series[10]
            self.assertAlmostEqual(s, 0.5)
            self.assertAlmostEqual(value, 0.5 + 0.5 * s**2)
            self.assertEqual(command.series[-1], (1.0, 1.0))
            with open(paths[1], encoding="utf-8") as f:
                self.assertEqual(f.readline(), "s,generating_value\n")

    def test_spectral_modes(self):
        brw = os.path.join(SPECS, "brw.toml")
        with tempfile.TemporaryDirectory() as d:
            config = ExperimentConfig.parse(["--out", d, "spectral", "--kernel", brw, "--sizes", "4,8,16"])
            self.assertEqual(config.options["mode"], "trunc")
            self.assertIsInstance(command_for(config), SpectralCommand)
            result = SpectralCommand(config).run()
            values = [e["value"] for e in result["estimates"]]
            self.assertTrue(all(a <= b + 1e-10 for a, b in zip(values, values[1:])))
            self.assertLess(values[-1], 1.3 + 1e-9)

            config = ExperimentConfig.parse(
                ["--out", d, "spectral", "--kernel", brw, "--mode", "certify", "--sizes", "8"]
            )
            self.assertIn("certificate", SpectralCommand(config).run())

    def test_intervals_result(self):
        with tempfile.TemporaryDirectory() as d:
            config = ExperimentConfig.parse(
                ["--out", d, "--replicas", "10", "repro", "--example", "intervals", "--n", "3", "--sigma", "0"]
            )
            command = ReproCommand(config)
            result = command.run()
            self.assertTrue(result["closed_form_holds"])
            self.assertEqual(command.series[-1], (1458, "0"))
            with open(command.write()[0], encoding="utf-8") as f:
                payload = json.load(f)
            self.assertEqual(payload["result"]["average_at_S_n"], "0/1")
            self.assertEqual(payload["result"]["average_at_S_n_plus_a"], "4/5")


class TestEntryPoint(unittest.TestCase):
    def test_gw(self):
        with tempfile.TemporaryDirectory() as d:
            completed = branchlab("gw", "--law", "specs/critical.json", out=d)
            self.assertEqual(completed.returncode, 0, completed.stderr)
            with open(os.path.join(d, "gw.json"), encoding="utf-8") as f:
                result = json.load(f)["result"]
            self.assertEqual(result["regime"], "critical")
            self.assertEqual(result["extinction_prob"], 1.0)
            self.assertTrue(os.path.isfile(os.path.join(d, "branchlab.log")))

    def test_malformed_spec(self):
        with tempfile.TemporaryDirectory() as d:
            path = os.path.join(d, "bad.toml")
            with open(path, "w") as f:
                f.write('space = "lattice_zd"\n')
            completed = branchlab("bmc", "--spec", path, out=d)
            self.assertEqual(completed.returncode, 2)
            self.assertIn("law", completed.stderr)

    def test_missing_spec(self):
        with tempfile.TemporaryDirectory() as d:
            completed = branchlab("gw", "--law", os.path.join(d, "absent.json"), out=d)
            self.assertEqual(completed.returncode, 2)

    def test_usage_error(self):
        with tempfile.TemporaryDirectory() as d:
            completed = branchlab("spectral", "--kernel", "specs/brw.toml", "--mode", "bogus", out=d)
            self.assertEqual(completed.returncode, 2)
            completed = branchlab("spectral", "--kernel", "specs/brw.toml", "--mode", "trunc", "--sizes", "4,8", out=d)
            self.assertEqual(completed.returncode, 0, completed.stderr)
            self.assertEqual(branchlab("spectral", "--spec", "specs/brw.toml", out=d).returncode, 2)


if __name__ == "__main__":
    unittest.main()
