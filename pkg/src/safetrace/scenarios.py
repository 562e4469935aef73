"""Bundled scenario fixtures (schema, policy excerpt, extraction cassette, grounded oracles).

The three scenarios are desk-scale reconstructions. Their safety-critical
subsets have 4, 7 and 10 APIs; the concrete API names, effects and policy
wording are authored for this package.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path

from .ltl import SafetyOracle, load_oracles
from .schema import Toolset, load_toolset

SCENARIOS = ("financial_services", "tele_healthcare", "smart_home")


def scenario_dir(name: str) -> Path:
    if name not in SCENARIOS:
        raise KeyError(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}")
    return Path(str(resources.files("safetrace").joinpath("data").joinpath("scenarios").joinpath(name)))


def load_scenario_toolset(name: str) -> Toolset:
    return load_toolset((scenario_dir(name) / "schema.yaml").read_text(encoding="utf-8"))


def load_scenario_policy(name: str) -> str:
    return (scenario_dir(name) / "policy.txt").read_text(encoding="utf-8")


def load_scenario_oracles(name: str) -> list[SafetyOracle]:
    return load_oracles((scenario_dir(name) / "oracles.json").read_text(encoding="utf-8"))


def scenario_cassette(name: str) -> Path:
    return scenario_dir(name) / "cassette.json"
