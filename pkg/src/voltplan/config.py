"""Run configuration: defaults, config-file merge, CLI override.

Precedence: CLI flags > config file > defaults. The seed can also come from
the VOLTPLAN_SEED environment variable, which overrides file and defaults
(an explicit --seed flag still wins). The effective configuration is echoed
into every output file for provenance.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    case_path: str = ""
    profiles_path: str = ""          # empty: synthesize instead
    out_dir: str = "voltplan_out"
    top_k: int = 21
    deadband_plan: float = 0.002
    deadband_verify: float = 0.005
    step_mvar: float | None = None   # override case catalog when set
    min_mvar: float | None = None
    max_mvar: float | None = None
    cost_fixed: float | None = None      # default catalog: 100000
    cost_per_mvar: float | None = None   # default catalog: 20000
    approach: str = "max"            # max | cluster
    rounding: str = "nearest"        # nearest | ceiling
    seed: int = 0
    feas_tol: float = 1e-6
    opt_tol: float = 1e-5
    max_iter: int = 300
    weight_v: float = 1000.0
    max_rounds: int = 3
    max_total_pu: float = 5.0
    max_step_pu: float = 0.05
    jobs: int = 1
    verify_mode: str = "operational_opf"  # operational_opf | powerflow_only
    plan_as_switchable: bool = True
    skip_clean_steps: bool = True
    min_cluster_size: int = 3
    k_max: int = 8
    restarts: int = 10
    reduce_var: float = 0.8
    features: str = "relaxed"        # relaxed | discrete
    net_out: bool = False
    enforce_v_bounds: bool = False
    # synthetic-year knobs (used when profiles_path is empty)
    resolution_hours: float = 1.0
    pv_penetration: float = 0.25
    cloud_volatility: float = 0.3
    synth_days: int = 365
    synth_start: str = "2030-01-01"
    flat_shape_buses: str = ""       # comma-separated bus ids

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELD_NAMES = {f.name for f in fields(RunConfig)}


def load_config_file(path: str | Path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e
    unknown = set(raw) - _FIELD_NAMES
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
    return raw


def build_config(file_path: str | None = None,
                 cli_overrides: dict | None = None) -> RunConfig:
    """Merge defaults <- config file <- VOLTPLAN_SEED <- CLI overrides."""
    values: dict = {}
    if file_path:
        values.update(load_config_file(file_path))
    env_seed = os.environ.get("VOLTPLAN_SEED")
    if env_seed is not None:
        try:
            values["seed"] = int(env_seed)
        except ValueError as e:
            raise ConfigError(f"VOLTPLAN_SEED must be an integer, got {env_seed!r}") from e
    for k, v in (cli_overrides or {}).items():
        if v is None:
            continue
        if k not in _FIELD_NAMES:
            raise ConfigError(f"unknown config field {k!r}")
        values[k] = v
    try:
        cfg = RunConfig(**values)
    except TypeError as e:
        raise ConfigError(str(e)) from e
    if cfg.approach not in ("max", "cluster"):
        raise ConfigError(f"approach must be max or cluster, got {cfg.approach!r}")
    if cfg.rounding not in ("nearest", "ceiling"):
        raise ConfigError(f"rounding must be nearest or ceiling, got {cfg.rounding!r}")
    if cfg.verify_mode not in ("operational_opf", "powerflow_only"):
        raise ConfigError(f"bad verify_mode {cfg.verify_mode!r}")
    if cfg.top_k < 1 or cfg.max_rounds < 1 or cfg.jobs < 1:
        raise ConfigError("top_k, max_rounds and jobs must be >= 1")
    return cfg


def flat_bus_tuple(cfg: RunConfig) -> tuple[str, ...]:
    return tuple(b.strip() for b in cfg.flat_shape_buses.split(",") if b.strip())
