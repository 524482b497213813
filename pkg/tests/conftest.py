import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

FAST_CONFIG = {
    "name": "fast",
    "seed": 0,
    "bootstrap": 20,
    "dataset": {"n": 400, "nonrobust_dims": 2},
    "zoo": [
        {"name": "s8", "hidden": [8], "epochs": 20},
        {"name": "s12", "hidden": [12], "epochs": 20},
        {"name": "a8", "hidden": [8], "training": "at", "epochs": 20},
    ],
    "evaluation": {"iterations": 5, "restarts": 1},
    "update": {"epochs": 1, "pair": [0, 1]},
    "grids": {"pct": [{"beta": 1}, {"beta": 2}], "pcat": [{"beta": 2}], "rcat": [{"alpha": 0.5, "beta": 0.4}, {"alpha": 0.3, "beta": 0.6}]},
    "sequential": {"extra": [{"name": "a12", "hidden": [12], "training": "at", "epochs": 20}], "zoo_models": "all"},
    "consistency": {"n_list": [128, 256], "trials": 10, "frontier_n": 300},
}


@pytest.fixture
def fast_config():
    from flipguard.config import ExperimentConfig

    return ExperimentConfig.from_dict(FAST_CONFIG)


SEEDS = (0, 1, 2, 3, 4)


@pytest.fixture(scope="session")
def desk_runs():
    """Default desk benchmark, one run per master seed, computed once per session."""
    from desk_runs import run_all

    return run_all(SEEDS)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import VERDICTS

    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(VERDICTS):
            terminalreporter.write_line(line)
