"""
Logging configuration for command-line runs.

Library modules only attach a ``NullHandler``; handlers are installed here, by the CLI.
"""

import json
import logging
from sys import stdout

PACKAGE_LOGGER = "swept_sdf"
ITERATION_LOGGER = "swept_sdf.solver.iterations"


def setup_logging(loglevel):
    """Setup basic logging for script execution

    Third-party loggers stay at WARNING; ``loglevel`` applies to the package loggers.

    Args:
      loglevel (Optional[int]): minimum loglevel for emitting package messages;
          ``None`` keeps the WARNING default
    """
    logformat = "[%(asctime)s] %(levelname)s:%(name)s:%(message)s"
    logging.basicConfig(
        level=logging.WARNING, stream=stdout, format=logformat, datefmt="%Y-%m-%d %H:%M:%S"
    )
    if loglevel is not None:
        logging.getLogger(PACKAGE_LOGGER).setLevel(loglevel)


def log_iteration(record):
    """Emit one solver iteration as a single JSON line.

    Args:
      record (dict): JSON-serializable iteration record (iteration, costs, gradient
          norm, step length).
    """
    logger = logging.getLogger(ITERATION_LOGGER)
    if logger.isEnabledFor(logging.INFO):
        logger.info("%s", json.dumps(record, sort_keys=True))
