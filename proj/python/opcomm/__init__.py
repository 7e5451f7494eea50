"""Station demand forecasting and buffer control."""

from ._core import *  # noqa: F401,F403
from ._core import ConfigError, FormatError, MissingArtifact, NumericalError, run

COMMANDS = ("simulate", "train-forecaster", "train-policy", "evaluate", "explain")


def run_pipeline(config_path, out=None, jobs=1, seed=None):
    """Runs every command in order and returns the concatenated log."""
    return "".join(run(cmd, config_path, out=out, jobs=jobs, seed=seed) for cmd in COMMANDS)


__all__ = ["COMMANDS", "ConfigError", "FormatError", "MissingArtifact", "NumericalError", "run", "run_pipeline"]
