import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from researchtree.orchestrator import config_for, simulate  # noqa: E402
from researchtree.scenario import load_scenario, scenario_from_dict  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]
SCENARIOS = ROOT / "scenarios"


def scenario_path(name: str) -> Path:
    return SCENARIOS / f"{name}.json"


def run_named(name: str, mode="pooled", seed=0, **overrides):
    sc = load_scenario(scenario_path(name))
    return simulate(sc, config=config_for(sc, **overrides), mode=mode, seed=seed)


def run_doc(doc: dict, mode="pooled", seed=0, **overrides):
    sc = scenario_from_dict(doc)
    return simulate(sc, config=config_for(sc, **overrides), mode=mode, seed=seed)


@pytest.fixture
def scenarios_dir() -> Path:
    return SCENARIOS
