import argparse
import hashlib
import json
import logging
import os

from typing import Dict, List, Optional

from .errors import ValidationError


SUBCOMMANDS = ("gw", "bmc", "spectral", "bmp", "fkpp", "repro")
THREADS_ENV = "BRANCHLAB_THREADS"

# argument names that do not change the numbers an experiment produces
RUN_ONLY = ("output_path", "log_level", "threads", "render")


def _parse_tolerances(pairs: Optional[List[str]]) -> Dict[str, float]:
    tolerances = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ValidationError(f"expected KEY=VALUE, got {pair!r}", "tol")
        try:
            tolerances[key.strip()] = float(value)
        except ValueError:
            raise ValidationError(f"not a number: {value!r}", f"tol.{key.strip()}")
    return tolerances


def _resolve_threads(threads: Optional[int]) -> int:
    if threads is not None:
        return max(1, threads)
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValidationError(f"not an integer: {env!r}", THREADS_ENV)
    return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="branchlab", description="Experiments on branching Markov processes"
    )
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--replicas", type=int, default=10_000)
    parser.add_argument("--out", dest="output_path", default="out")
    parser.add_argument("--threads", type=int, default=None)
    parser.add_argument("--log-level", default=logging.INFO)
    parser.add_argument("--tol", action="append", metavar="KEY=VALUE")
    parser.add_argument("--render", default=False, action="store_true")
    commands = parser.add_subparsers(dest="subcommand", required=True)

    gw = commands.add_parser("gw", help="Galton-Watson classification and extinction probability")
    gw.add_argument("--law", dest="spec_path", required=True)
    gw.add_argument("--horizon", type=int, default=200)
    gw.add_argument("--cap", type=int, default=1000)
    gw.add_argument("--mc", default=False, action="store_true")

    bmc = commands.add_parser("bmc", help="discrete-time branching Markov chain")
    bmc.add_argument("--spec", dest="spec_path", required=True)
    bmc.add_argument("--start", default="0")
    bmc.add_argument("--horizon", type=int, default=20)
    bmc.add_argument("--cap", type=int, default=100_000)
    bmc.add_argument("--n-max", type=int, default=40)

    spectral = commands.add_parser("spectral", help="eigenvalue estimates and certificates")
    spectral.add_argument("--kernel", dest="spec_path", required=True)
    spectral.add_argument("--start", default="0")
    spectral.add_argument("--sizes", default="8,16,32,64")
    spectral.add_argument("--n-max", type=int, default=40)
    spectral.add_argument("--mode", choices=("trunc", "growth", "certify", "reversible"), default="trunc")

    bmp = commands.add_parser("bmp", help="continuous-time branching Markov process")
    bmp.add_argument("--spec", dest="spec_path", required=True)
    bmp.add_argument("--start", type=float, default=None)
    bmp.add_argument(
        "--estimate",
        choices=("trace", "survival", "local", "mass", "total_mass", "lambda", "skeleton", "ceiling"),
        default="survival",
    )
    bmp.add_argument("--window", default=None, help="left,right for local survival")
    bmp.add_argument("--epsilon", type=float, default=0.1)

    fkpp = commands.add_parser("fkpp", help="FKPP and linear parabolic solves")
    fkpp.add_argument("--spec", dest="spec_path", required=True)
    fkpp.add_argument(
        "--mode", choices=("parabolic", "stationary", "longtime", "eigen", "duality", "critical"),
        default="parabolic",
    )
    fkpp.add_argument("--t", type=float, default=2.0)
    fkpp.add_argument("--dx", type=float, default=None)
    fkpp.add_argument("--lengths", default="1,2,3,4")

    repro = commands.add_parser("repro", help="worked examples with exact arithmetic")
    repro.add_argument("--example", choices=("mutation", "intervals", "criticality"), required=True)
    repro.add_argument("--n", type=int, default=3)
    repro.add_argument("--horizons", default=None)
    repro.add_argument("--mode", default="killing_g")
    repro.add_argument("--sigma", type=float, default=0.05)
    repro.add_argument("--kappa", type=float, default=-0.7)
    repro.add_argument("--epsilon", type=float, default=0.1)
    return parser


class ExperimentConfig:
    """
    Parsed command line of one experiment, with logging configured into the output directory
    """

    def __init__(
        self,
        subcommand: str,
        spec_path: Optional[str],
        seed: int,
        replicas: int,
        output_path: str,
        threads: int,
        tolerances: Dict[str, float],
        render: bool,
        options: Dict,
    ):
        self.subcommand = subcommand
        self.spec_path = spec_path
        self.seed = seed
        self.replicas = replicas
        self.output_path = output_path
        self.threads = threads
        self.tolerances = tolerances
        self.render = render
        self.options = options

    def __str__(self):
        return f"ExperimentConfig({self.subcommand}, seed={self.seed}, replicas={self.replicas})"

    def tolerance(self, key: str, default: float) -> float:
        return self.tolerances.get(key, default)

    def output(self, name: str) -> str:
        return os.path.join(self.output_path, name)

    @property
    def config_hash(self) -> str:
        """
        sha256 of the options that determine the results, plus the bytes of the spec file
        """
        payload = {k: v for k, v in self.options.items() if k not in RUN_ONLY}
        payload.update({"subcommand": self.subcommand, "seed": self.seed, "replicas": self.replicas})
        payload["tolerances"] = self.tolerances
        digest = hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode("utf-8"))
        if self.spec_path and os.path.isfile(self.spec_path):
            with open(self.spec_path, "rb") as f:
                digest.update(f.read())
        return digest.hexdigest()

    @classmethod
    def parse(cls, argv: Optional[List[str]] = None) -> "ExperimentConfig":
        """
        Parse the arguments without touching the file system or logging
        """
        args = build_parser().parse_args(argv)
        options = vars(args)
        if args.replicas < 1:
            raise ValidationError(f"must be >= 1, got {args.replicas}", "replicas")
        return cls(
            args.subcommand,
            options.get("spec_path"),
            args.seed,
            args.replicas,
            args.output_path,
            _resolve_threads(args.threads),
            _parse_tolerances(args.tol),
            args.render,
            options,
        )

    @classmethod
    def initialize(
        cls,
        argv: Optional[List[str]] = None,
        default_log_file: str = "branchlab.log",
    ) -> "ExperimentConfig":
        config = cls.parse(argv)

        # Ensure output path
        base_dir = os.path.abspath(config.output_path)
        os.makedirs(base_dir, exist_ok=True)

        logging.basicConfig(
            level=config.options["log_level"],
            format="[%(asctime)s] %(levelname)s: [%(name)s]: %(message)s",
            datefmt="%H:%M:%S",
            handlers=[
                logging.FileHandler(os.path.join(base_dir, default_log_file), "w"),
                logging.StreamHandler(),
            ],
        )
        return config
