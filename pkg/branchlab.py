import logging
import sys

from branchlab.commands import run
from branchlab.config import ExperimentConfig
from branchlab.errors import ConvergenceError, TruncationOverflowError, ValidationError

"""
python branchlab.py gw --law specs/critical.json
python branchlab.py --seed 7 --replicas 2000 --threads 4 bmp --spec specs/bbm.toml --estimate survival
python branchlab.py repro --example intervals --n 3
"""

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_CONVERGENCE = 3


def main(argv=None) -> int:
    try:
        config = ExperimentConfig.initialize(argv)
    except ValidationError as e:
        print(f"branchlab: error: {e}", file=sys.stderr)
        return EXIT_VALIDATION

    logger = logging.getLogger()
    logger.info(f"Running {config}")
    try:
        paths = run(config)
    except ValidationError as e:
        logger.error(f"Invalid input: {e}")
        return EXIT_VALIDATION
    except OSError as e:
        logger.error(f"Cannot read or write: {e}")
        return EXIT_VALIDATION
    except (ConvergenceError, TruncationOverflowError) as e:
        logger.error(f"No convergence: {e}")
        return EXIT_CONVERGENCE

    logger.info(f"Wrote {', '.join(paths)}")
    return EXIT_OK


if __name__ == "__main__":
    """
    Entry point for the branching process experiments
    """

    sys.exit(main())
