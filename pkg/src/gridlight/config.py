"""Scenario presets and config-file loading.

Scenario and demand presets ship with the package as ``presets.yaml``; any
YAML file with the same shape can be substituted via ``--config``.  A scenario
entry holds NetworkSpec overrides (grid size at minimum), ``demand_levels``
maps level names to vehicles/hour per entry lane, and ``defaults`` applies to
every scenario.
"""

from __future__ import annotations

import importlib.resources
from pathlib import Path

import yaml

from .errors import ConfigError
from .simnet import NetworkSpec

_SPEC_FIELDS = {f for f in NetworkSpec.__dataclass_fields__} - {"phase_set"}


def load_presets(path: str | Path | None = None) -> dict:
    """Read a presets file (the packaged one when ``path`` is None)."""
    if path is None:
        text = importlib.resources.files("gridlight").joinpath(
            "presets.yaml").read_text()
    else:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        text = p.read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"could not parse config: {e}") from e
    if not isinstance(data, dict) or "scenarios" not in data:
        raise ConfigError("config must be a mapping with a 'scenarios' section")
    return data


def network_spec(scenario: str, demand: str = "medium", seed: int = 0,
                 config_path: str | Path | None = None,
                 **overrides) -> NetworkSpec:
    """Build a NetworkSpec from a named scenario preset and demand level."""
    presets = load_presets(config_path)
    scenarios = presets.get("scenarios", {})
    if scenario not in scenarios:
        known = ", ".join(sorted(scenarios))
        raise ConfigError(f"unknown scenario '{scenario}' (have: {known})")
    levels = presets.get("demand_levels", {})
    if demand not in levels:
        known = ", ".join(sorted(levels))
        raise ConfigError(f"unknown demand level '{demand}' (have: {known})")

    params: dict = {}
    params.update(presets.get("defaults") or {})
    params.update(scenarios[scenario] or {})
    params["demand_rate"] = float(levels[demand])
    params["seed"] = seed
    params.update(overrides)

    unknown = set(params) - _SPEC_FIELDS
    if unknown:
        raise ConfigError(f"unknown NetworkSpec fields in config: {sorted(unknown)}")
    try:
        return NetworkSpec(**params)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def grid_size_spec(size: str, demand_rate: float = 450.0, seed: int = 0,
                   **overrides) -> NetworkSpec:
    """NetworkSpec for an explicit '<rows>x<cols>' size, e.g. '6x6'."""
    try:
        rows, cols = (int(x) for x in size.lower().split("x"))
    except ValueError as e:
        raise ConfigError(f"grid size must look like '3x3', got {size!r}") from e
    return NetworkSpec(grid_rows=rows, grid_cols=cols, demand_rate=demand_rate,
                       seed=seed, **overrides)
