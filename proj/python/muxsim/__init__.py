"""Python front end for the muxsim simulator.

Configs are plain dicts with the same layout as the CLI's JSON config files.
"""

import json

from . import _muxsim
from ._muxsim import ConfigError, Error, SchemaError, layers_to_launch, partition_count, percentile, profile_plan_size

__all__ = [
    "ConfigError",
    "Error",
    "SchemaError",
    "default_config",
    "gen_trace",
    "layers_to_launch",
    "partition_count",
    "percentile",
    "profile_plan_size",
    "run",
    "sweep",
    "validate_config",
]


def _dump(config):
    if config is None:
        return ""
    if isinstance(config, str):
        return config
    return json.dumps(config)


def default_config():
    return json.loads(_muxsim.default_config())


def validate_config(config):
    """Returns the config with every field filled in; raises ConfigError."""
    return json.loads(_muxsim.normalize_config(_dump(config)))


def run(config=None, trace_path=None, scheduler=None, seed=None):
    """Simulates one workload and returns the metrics report as a dict."""
    return _muxsim.run(_dump(config), trace_path=trace_path, scheduler=scheduler, seed=seed)


def sweep(config, rates, seeds=(1,), scheduler=None):
    return _muxsim.sweep(_dump(config), list(rates), list(seeds), scheduler=scheduler)


def gen_trace(task, rate, duration_s, seed=1):
    return _muxsim.gen_trace(task, rate, duration_s, seed)
