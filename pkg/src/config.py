"""
Configuration loader for the MSADM network health pipeline.

Reads config.yaml (JSON files work too, JSON being a YAML subset), layers it
over built-in defaults and provides path helpers for data, rule base,
grammar, model, reports, logs and the DuckDB KPI store.
All other scripts should import from this module instead of hardcoding paths.

Precedence: command-line flags > config file > DEFAULTS.
"""

import copy
from dataclasses import dataclass
from pathlib import Path

import yaml

from errors import ConfigError

VERSION = "0.3.0"

PROJECT_ROOT = Path(__file__).parent.parent

# Config file is in project root
CONFIG_PATH = PROJECT_ROOT / "config.yaml"

DEFAULTS = {
    "seed": 7,
    "data": {
        "dir": "data/run",
        "traces": None,  # default: <dir>/traces.<format>
        "labels": None,  # default: <dir>/labels.csv
        "format": "csv",
        "source": "file",  # file | store
        "db_path": "data/kpi.duckdb",
        "log_dir": "data/logs",
    },
    "window": {
        "size": 32,
        "stride": 32,
    },
    "features": {
        "subintervals": 4,
    },
    "rulebase": {
        "path": "data/run/rulebase.json",
        "manual_intervals": "data/manual_intervals.json",
        "k_max": 8,
        "min_windows_per_cluster": 5,
        "normal_code": 1,
        "n_init": 10,
        "max_iter": 300,
    },
    "model": {
        "path": "data/run/model",
        "peers": 0,
        "proj_dim": 8,
        "hidden": 8,
        "kappa": 0.5,
        "learning_rate": 0.001,
        "epochs": 40,
        "batch_size": 32,
        "mask_mode": "baseline",  # baseline | literal
        "train_fraction": 0.8,
    },
    "semantics": {
        "grammar": "data/grammar.json",
        "tau": 1.15,
        "update_period_hours": 24.0,
        "output": "data/run/descriptions.txt",
    },
    "llm": {
        "backend": "mock",  # mock | http
        "mock_dir": None,
        "base_url": "http://localhost:8000/v1",
        "model": "network-analyst",
        "api_key_env": "MSADM_LLM_API_KEY",
        "timeout": 30.0,
        "max_retries": 3,
        "backoff": 0.5,
        "token_budget": 4096,
        "max_in_flight": 4,
    },
    "simulate": {
        "nodes_per_class": 8,
        "windows_per_node": 84,
        "sample_period": 1.0,
        "fault_rate": 0.08,
    },
    "report": {
        "dir": "data/run/reports",
        "max_reports": 5,
    },
}


def load_config(path=None):
    """
    Load and parse a config file merged over DEFAULTS.

    Args:
        path: Explicit config path. When None, config.yaml in the project
              root is used if present, otherwise defaults only.

    Returns:
        dict: Merged configuration
    """
    config = copy.deepcopy(DEFAULTS)

    if path is None:
        if not CONFIG_PATH.exists():
            return config
        path = CONFIG_PATH

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(
            f"Config file not found at {path}. "
            "Copy config.example.yaml to config.yaml and customize it."
        )
    with open(path) as f:
        loaded = yaml.safe_load(f) or {}

    if not isinstance(loaded, dict):
        raise ConfigError(f"{path}: top level must be a mapping")

    return merge(config, loaded)


def merge(base, override):
    """Recursively merge override into a copy of base."""
    result = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(result.get(key), dict):
            result[key] = merge(result[key], value)
        else:
            result[key] = value
    return result


def apply_overrides(config, assignments):
    """
    Apply `section.key=value` overrides (values parsed as YAML scalars).

    Examples:
        "model.epochs=5"        → config["model"]["epochs"] = 5
        "llm.backend=http"      → config["llm"]["backend"] = "http"
    """
    result = copy.deepcopy(config)
    for assignment in assignments or []:
        if "=" not in assignment:
            raise ConfigError(f"Override '{assignment}' must look like section.key=value")
        dotted, raw = assignment.split("=", 1)
        keys = dotted.strip().split(".")
        node = result
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"Override '{dotted}' walks into a scalar at '{key}'")
        node[keys[-1]] = yaml.safe_load(raw)
    return result


def resolve_path(value):
    """
    Resolve a configured path.

    Relative paths are relative to the project root, absolute paths and
    ~ expansion are honoured.
    """
    path = Path(value).expanduser()

    # If relative, make it relative to project root
    if not path.is_absolute():
        path = (PROJECT_ROOT / path).resolve()

    return path


@dataclass(frozen=True)
class PipelineConfig:
    """Typed view over the merged configuration mapping."""

    raw: dict

    @property
    def seed(self):
        return int(self.raw["seed"])

    def section(self, name):
        return self.raw.get(name, {})

    @property
    def data(self):
        return self.section("data")

    @property
    def window(self):
        return self.section("window")

    @property
    def features(self):
        return self.section("features")

    @property
    def rulebase(self):
        return self.section("rulebase")

    @property
    def model(self):
        return self.section("model")

    @property
    def semantics(self):
        return self.section("semantics")

    @property
    def llm(self):
        return self.section("llm")

    @property
    def simulate(self):
        return self.section("simulate")

    @property
    def report(self):
        return self.section("report")

    def path(self, section, key):
        """Resolved path for config[section][key]."""
        value = self.section(section).get(key)
        if value is None:
            raise ConfigError(f"{section}.{key} is not configured")
        return resolve_path(value)

    def data_file(self, key):
        """data.traces / data.labels, defaulting to the simulator layout inside data.dir."""
        if self.data.get(key):
            return self.path("data", key)
        name = f"traces.{self.data['format']}" if key == "traces" else f"{key}.csv"
        return self.path("data", "dir") / name

    def validate(self):
        """Check ranges that every subcommand relies on."""
        if int(self.window["size"]) < 2:
            raise ConfigError("window.size must be >= 2")
        if int(self.window["stride"]) < 1:
            raise ConfigError("window.stride must be >= 1")
        if int(self.rulebase["k_max"]) < 1:
            raise ConfigError("rulebase.k_max must be >= 1")
        kappa = float(self.model["kappa"])
        if not 0.0 <= kappa <= 1.0:
            raise ConfigError("model.kappa must lie in [0, 1]")
        if self.model["mask_mode"] not in ("baseline", "literal"):
            raise ConfigError("model.mask_mode must be 'baseline' or 'literal'")
        if self.llm["backend"] not in ("mock", "http"):
            raise ConfigError("llm.backend must be 'mock' or 'http'")
        return self


def build_config(path=None, overrides=None):
    """Load, override and validate; returns a PipelineConfig."""
    raw = apply_overrides(load_config(path), overrides)
    return PipelineConfig(raw).validate()


def get_db_path(config=None):
    """
    Get path to the DuckDB KPI store.

    Returns:
        Path: Absolute path to the store file
    """
    config = config or load_config()
    db_path = config.get("data", {}).get("db_path")

    if not db_path:
        # Fallback to default (relative to project root)
        db_path = DEFAULTS["data"]["db_path"]

    return resolve_path(db_path)


def get_log_dir(config=None):
    """
    Get path to log directory.

    Returns:
        Path: Absolute path to logs directory
    """
    config = config or load_config()
    log_dir = config.get("data", {}).get("log_dir")

    if not log_dir:
        log_dir = DEFAULTS["data"]["log_dir"]

    path = resolve_path(log_dir)

    # Create directory if it doesn't exist
    path.mkdir(parents=True, exist_ok=True)

    return path
