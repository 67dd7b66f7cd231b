"""Scenario loading, the two-rate kernel and run artifacts."""
from .config import (ConfigError, RunParams, ScenarioConfig, TapSpec, load_config, parse_config, resolve_scenario,
                     scenario_dir, shipped_scenarios)
from .kernel import RunResult, Twin, csv_columns, csv_text, run_scenario, write_outputs
