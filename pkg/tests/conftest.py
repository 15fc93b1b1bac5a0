"""
Shared fixtures for the MSADM test suite.

Library modules live in src/ and import each other by bare name, so src/ is
put on sys.path before anything is collected.
"""

import sys
from pathlib import Path

import numpy as np
import pytest

PROJECT_ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(PROJECT_ROOT / "src"))

from ingest import KpiTrace, KpiWindow, window_all  # noqa: E402
from rulebase import RuleBaseSettings, build_rulebase  # noqa: E402
from simnet import ScenarioConfig, simulate  # noqa: E402

DATA_DIR = PROJECT_ROOT / "data"


def make_window(values, entity_id="city_vehicle-00", entity_class="city_vehicle", kpi_name="packet_loss",
                window_index=0, start_time=0.0):
    values = np.asarray(values, dtype=float)
    return KpiWindow(
        entity_id=entity_id,
        entity_class=entity_class,
        kpi_name=kpi_name,
        window_index=window_index,
        start_time=start_time,
        end_time=start_time + len(values) - 1,
        values=values,
    )


def make_trace(values, entity_id="city_vehicle-00", entity_class="city_vehicle", kpi_name="packet_loss"):
    values = np.asarray(values, dtype=float)
    return KpiTrace(entity_id, entity_class, kpi_name, np.arange(len(values), dtype=float), values)


@pytest.fixture(scope="session")
def grammar_path():
    return DATA_DIR / "grammar.json"


@pytest.fixture(scope="session")
def small_scenario():
    """Three classes, three nodes each, 24 windows of 16 samples."""
    return ScenarioConfig(
        nodes_per_class=3,
        windows_per_node=24,
        window_size=16,
        window_stride=16,
        fault_rate=0.2,
        seed=11,
    )


@pytest.fixture(scope="session")
def simulation(small_scenario):
    return simulate(small_scenario)


@pytest.fixture(scope="session")
def settings():
    return RuleBaseSettings(k_max=5, n_init=3, seed=7)


@pytest.fixture(scope="session")
def windows(simulation, small_scenario):
    return window_all(simulation.traces, small_scenario.window_size, small_scenario.window_stride)


@pytest.fixture(scope="session")
def rulebase(windows, settings):
    return build_rulebase(windows, (), settings)


@pytest.fixture
def cli_overrides(tmp_path):
    """--set arguments that keep every msadm artifact inside tmp_path."""
    run_dir = tmp_path / "run"
    values = {
        "data.dir": run_dir,
        "data.db_path": tmp_path / "kpi.duckdb",
        "data.log_dir": tmp_path / "logs",
        "rulebase.path": run_dir / "rulebase.json",
        "model.path": run_dir / "model",
        "semantics.output": run_dir / "descriptions.txt",
        "report.dir": run_dir / "reports",
        "simulate.nodes_per_class": 3,
        "simulate.windows_per_node": 16,
        "simulate.fault_rate": 0.5,
        "window.size": 16,
        "window.stride": 16,
        "rulebase.n_init": 2,
        "rulebase.k_max": 4,
        "model.epochs": 3,
        "model.learning_rate": 0.01,
        "model.proj_dim": 4,
        "model.hidden": 4,
    }
    args = []
    for key, value in values.items():
        args.extend(["--set", f"{key}={value}"])
    return args
