"""Python access to the Actor-Mimic library and experiment harness."""

import json
from pathlib import Path

from ._core import (
    ConfigError,
    boltzmann_policy,
    canonical_config,
    config_hash,
    default_config,
    expected_return,
    optimal_q,
    suite_games,
    summarize,
    transfer_targets,
    verify,
)
from ._core import run_pipeline as _run_pipeline

__all__ = [
    "ConfigError",
    "boltzmann_policy",
    "canonical_config",
    "config_hash",
    "default_config",
    "expected_return",
    "optimal_q",
    "run",
    "suite_games",
    "summarize",
    "transfer_targets",
    "verify",
]


def run(config, output_dir=None, jobs=1):
    """Run a pipeline. `config` is a dict, a JSON string, or a path to a JSON file."""
    if isinstance(config, dict):
        text = json.dumps(config)
    elif isinstance(config, Path) or (isinstance(config, str) and not config.lstrip().startswith("{")):
        text = Path(config).read_text()
    else:
        text = config
    return _run_pipeline(text, str(output_dir) if output_dir else "", jobs)
