import json
import logging

from abc import abstractmethod, ABC
from fractions import Fraction
from typing import Dict, List, Sequence, Tuple

import numpy as np

from . import bmc, bmp, fkpp, gw, repro, spectral
from .bmc import BmcSpec, Truncation, load_toml, parse_state
from .config import ExperimentConfig
from .core import OffspringLaw, RandomSource, State, generating_value
from .errors import ValidationError
from .motion import BranchFieldSpec, MotionSpec
from .util import artifact, render_kernel, write_csv, write_json


def _floats(value: str, key: str) -> List[float]:
    try:
        return [float(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise ValidationError(f"expected comma separated numbers, got {value!r}", key)


def _ints(value: str, key: str) -> List[int]:
    try:
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise ValidationError(f"expected comma separated integers, got {value!r}", key)


def _state(value: str) -> State:
    """
    A start state from the command line: JSON when it parses ("3", "[0, \"down\"]"), the raw text otherwise
    """
    try:
        return parse_state(json.loads(value))
    except json.JSONDecodeError:
        return value


class Command(ABC):
    """
    One subcommand run: computes a JSON result and an optional CSV series, then writes both
    """

    header: Tuple[str, ...] = ()

    def __init__(self, config: ExperimentConfig):
        self.logger = logging.getLogger(__name__)
        self.config = config
        self.options = config.options
        self.result: Dict = {}
        self.series: List[Sequence] = []

    @property
    def rng(self) -> RandomSource:
        return RandomSource(self.config.seed)

    @abstractmethod
    def run(self) -> Dict:
        pass

    def to_json(self) -> Dict:
        payload = {"subcommand": self.config.subcommand, "result": self.result}
        return artifact(payload, self.config.config_hash, self.config.seed)

    def render(self, truncation: Truncation):
        if self.config.render:
            path = self.config.output(f"{self.config.subcommand}-kernel.dot")
            render_kernel(truncation, path)
            self.logger.info(f"Rendered {truncation} to {path}")

    def write(self) -> List[str]:
        paths = [self.config.output(f"{self.config.subcommand}.json")]
        write_json(paths[0], self.to_json())
        if self.series:
            paths.append(self.config.output(f"{self.config.subcommand}.csv"))
            write_csv(paths[1], self.header, self.series)
        return paths


class GwCommand(Command):
    header = ("s", "generating_value")

    def run(self) -> Dict:
        law = OffspringLaw.load(self.config.spec_path)
        classification = gw.classify(law)
        self.logger.info(f"gw: {classification}")
        self.result = classification.to_json()

        if self.options["mc"]:
            frequency, stderr = gw.simulate_extinction_frequency(
                law, self.config.replicas, self.options["horizon"], self.options["cap"], self.config.seed
            )
            self.result["mc"] = {"frequency": frequency, "stderr": stderr, "replicas": self.config.replicas}

        self.series = [(s, generating_value(law, s)) for s in np.linspace(0.0, 1.0, 21).tolist()]
        return self.result


class BmcCommand(Command):
    header = ("n", "expected_count")

    def run(self) -> Dict:
        spec = BmcSpec.load(self.config.spec_path)
        start = _state(self.options["start"])
        expected = bmc.expected_count_sequence(spec, start, self.options["n_max"])
        survival = bmc.survival_probability_mc(
            spec,
            start,
            self.options["horizon"],
            self.options["cap"],
            self.config.replicas,
            self.rng,
            self.config.threads,
        )
        self.logger.info(f"bmc: {spec} from {start!r}: survival {survival}")
        self.result = {
            "spec": spec.name,
            "start": start,
            "expected_counts": expected.tolist(),
            "survival": survival.to_json(),
        }
        self.series = list(enumerate(expected.tolist()))
        self.render(spec.kernel.reachable(start, depth=min(self.options["n_max"], 6)))
        return self.result


class SpectralCommand(Command):
    def run(self) -> Dict:
        spec = BmcSpec.load(self.config.spec_path)
        start = _state(self.options["start"])
        sizes = _ints(self.options["sizes"], "sizes")
        if not sizes:
            raise ValidationError("no truncation sizes", "sizes")
        mode = self.options["mode"]

        if mode == "trunc":
            estimates = spectral.spectral_radius_truncation(spec, start, sizes, self.config.threads)
            self.header = ("size", "rho", "lower")
            self.series = [(s, e.value, e.lower) for s, e in zip(sizes, estimates)]
            self.result = {"sizes": sizes, "estimates": [e.to_json() for e in estimates]}
        elif mode == "growth":
            n_max = self.options["n_max"]
            estimate = spectral.rho_double_prime_growth(spec, start, n_max)
            expected = bmc.expected_count_sequence(spec, start, n_max)
            self.header = ("n", "expected_count")
            self.series = list(enumerate(expected.tolist()))
            self.result = {"estimate": estimate.to_json()}
        elif mode == "certify":
            certificate = spectral.perron_certificate(spec, start, max(sizes))
            self.result = {"certificate": certificate.to_json()}
        else:
            report = spectral.reversible_criterion_check(
                spec, start, self.options["n_max"], tol=self.config.tolerance("reversible", 0.05)
            )
            self.header = ("n", "c")
            self.series = [(int(n), float(c)) for n, c in zip(report.sizes, report.c)]
            self.result = {"report": report.to_json()}

        self.logger.info(f"spectral: {mode} on {spec} from {start!r} done")
        self.render(spec.kernel.truncate(start, max(sizes)))
        return self.result


class BmpCommand(Command):
    def _load(self) -> Tuple[MotionSpec, BranchFieldSpec, bmp.BmpConfig, float]:
        payload = load_toml(self.config.spec_path)
        if "motion" not in payload:
            raise ValidationError("missing key", "motion")
        motion = MotionSpec.create_from(payload["motion"])
        branch = BranchFieldSpec.create_from(payload.get("branch", {}))
        mc = {**payload.get("mc", {}), "replicas": self.config.replicas, "seed": self.config.seed}
        cfg = bmp.BmpConfig.create_from(mc)
        start = self.options["start"]
        if start is None:
            start = float(payload.get("start", 0.0))
        return motion, branch, cfg, start

    def _window(self) -> Tuple[float, float]:
        if self.options["window"] is None:
            raise ValidationError("local survival needs --window left,right", "window")
        window = _floats(self.options["window"], "window")
        if len(window) != 2 or window[0] >= window[1]:
            raise ValidationError(f"expected left < right, got {self.options['window']!r}", "window")
        return window[0], window[1]

    def run(self) -> Dict:
        motion, branch, cfg, start = self._load()
        estimate = self.options["estimate"]
        threads = self.config.threads
        self.result = {"estimate_kind": estimate, "start": start, "mc": cfg.to_json()}

        if estimate == "trace":
            trace, system = bmp.simulate_bmp(motion, branch, start, cfg, self.rng)
            self.header = ("replica", "t", "count")
            self.series = trace.rows(0)
            self.result.update({"final": trace.final, "terminator": trace.terminator.value, "N": system.N})
        elif estimate == "survival":
            self.result["estimate"] = bmp.survival_probability_mc(motion, branch, start, cfg, self.rng, threads)
        elif estimate == "local":
            window = self._window()
            self.result["window"] = list(window)
            self.result["estimate"] = bmp.local_survival_mc(motion, branch, start, window, cfg, self.rng, threads)
        elif estimate == "mass":
            self.result["estimate"] = bmp.mean_count_mc(motion, branch, start, cfg, self.rng, threads)
            self.result["pde"] = bmp.expected_mass_pde(motion, branch, start, cfg.horizon)
        elif estimate == "total_mass":
            self.result["estimate"] = bmp.total_mass_estimate(motion, branch, start, cfg, self.rng, threads)
        elif estimate == "lambda":
            self.result["estimate"] = bmp.lambda_double_prime_estimate(motion, branch, start, cfg.horizon)
        elif estimate == "ceiling":
            lam = bmp.lambda_double_prime_estimate(motion, branch, start, cfg.horizon)
            margin = self.config.tolerance("ceiling_margin", 0.1)
            self.result["lambda"] = lam
            self.result["estimate"] = bmp.growth_ceiling_fraction(
                motion, branch, start, lam.value, cfg, margin, self.rng, threads
            )
        else:
            skeleton = bmp.minorizing_skeleton(branch, self.options["epsilon"])
            full, kept = skeleton.coupled_run(motion, start, cfg, self.rng, threads)
            self.header = ("t", "mean_full", "mean_skeleton")
            self.series = [
                (t, float(f), float(s)) for t, (f, s) in enumerate(zip(full.mean(axis=0), kept.mean(axis=0)))
            ]
            self.result.update(
                {
                    "skeleton": skeleton,
                    "violations": int(np.count_nonzero(kept > full)),
                }
            )

        self.logger.info(f"bmp: {estimate} from {start}: {self.result.get('estimate', '')}")
        return self.result


class FkppCommand(Command):
    header = ("x", "u")

    def run(self) -> Dict:
        problem = fkpp.FkppProblem.create_from(load_toml(self.config.spec_path))
        mode = self.options["mode"]
        dx = self.options["dx"]
        grid = fkpp.Grid1D.for_motion(problem.motion, dx) if dx else None
        t = self.options["t"]
        self.result = {"mode": mode}

        if mode == "parabolic":
            trajectory = fkpp.solve_parabolic(problem, t, grid=grid)
            field = trajectory.final
            self.result.update({"t": t, "max_clamp": trajectory.max_clamp})
            self.series = field.rows()
        elif mode == "stationary":
            field = fkpp.stationary_monotone(problem, grid=grid)
            self.result["residual"] = fkpp.stationary_residual(problem, field)
            self.series = field.rows()
        elif mode == "longtime":
            field = fkpp.maximal_stationary_via_longtime(problem, t, grid=grid)
            self.series = field.rows()
        elif mode == "eigen":
            self.result["estimate"] = fkpp.principal_eigenvalue_1d(
                problem.motion, fkpp.BranchPotential(problem.branch), grid
            )
        elif mode == "duality":
            report = fkpp.mckean_duality_check(
                problem, problem.initial, t, self.config.replicas, self.rng, threads=self.config.threads
            )
            self.header = ("x", "pde", "mc", "stderr")
            self.series = list(zip(report.x.tolist(), report.pde.tolist(), report.mc.tolist(), report.stderr.tolist()))
            self.result["report"] = report
        else:
            sweep = fkpp.critical_length(problem.branch, _floats(self.options["lengths"], "lengths"))
            self.header = ("length", "eigenvalue")
            self.series = list(zip(sweep["lengths"], sweep["eigenvalues"]))
            self.result.update(sweep)

        self.logger.info(f"fkpp: {mode} done")
        return self.result


class ReproCommand(Command):
    def run(self) -> Dict:
        example = self.options["example"]
        if example == "mutation":
            self._mutation()
        elif example == "intervals":
            self._intervals()
        else:
            self._criticality()
        return self.result

    def _mutation(self):
        n_max = 4 ** (self.options["n"] + 1)
        growth = repro.mutation_growth(n_max)
        horizons = _ints(self.options["horizons"] or "16,64,256", "horizons")
        curve = repro.mutation_survival_curve(horizons, self.config.replicas, self.rng, self.config.threads)
        self.header = ("t", "exponent")
        self.series = list(enumerate(growth["exponents"], start=1))
        self.result = {"growth": growth, "survival": curve}

    def _intervals(self):
        n = self.options["n"]
        construction = repro.IntervalConstruction(n + 1)
        at_s, at_s_plus_a = repro.interval_time_averages(n)
        partial, limit = repro.rescaled_a_measure_limit()
        self.result = {
            "n": n,
            "closed_form_holds": construction.closed_form_holds(),
            "average_at_S_n": at_s,
            "average_at_S_n_plus_a": at_s_plus_a,
            "rescaled_a_measure": construction.rescaled_a_measure(),
            "rescaled_a_measure_limit": limit,
            "rescaled_a_measure_partial": float(partial),
        }
        self.header = ("t", "occupation_integral")
        self.series = [
            (t, str(construction.occupation_integral(Fraction(t)))) for t in construction.breakpoints()
        ]
        if 1 <= n <= 3:
            estimate = repro.counterexample_fk_mc(
                self.options["sigma"], self.options["kappa"], n, self.config.replicas, self.rng,
                threads=self.config.threads,
            )
            self.result["feynman_kac"] = estimate

    def _criticality(self):
        try:
            mode = repro.CriticalityMode(self.options["mode"])
        except ValueError:
            raise ValidationError(f"unknown mode {self.options['mode']!r}", "mode")
        horizons = _floats(self.options["horizons"] or "100,200,400", "horizons")
        estimates = [
            repro.criticality_example_mc(
                mode, h, self.config.replicas, self.rng, epsilon=self.options["epsilon"], threads=self.config.threads
            )
            for h in horizons
        ]
        self.header = ("horizon", "survival", "stderr")
        self.series = [(h, e.estimate, e.stderr) for h, e in zip(horizons, estimates)]
        self.result = {"mode": mode.value, "horizons": horizons, "estimates": estimates}


COMMANDS = {
    "gw": GwCommand,
    "bmc": BmcCommand,
    "spectral": SpectralCommand,
    "bmp": BmpCommand,
    "fkpp": FkppCommand,
    "repro": ReproCommand,
}


def command_for(config: ExperimentConfig) -> Command:
    return COMMANDS[config.subcommand](config)


def run(config: ExperimentConfig) -> List[str]:
    """
    Run the configured subcommand and write its artifacts; returns the written paths
    """
    command = command_for(config)
    command.run()
    return command.write()
