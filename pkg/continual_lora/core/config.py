"""
Configuration management for the continual LoRA toolkit
"""

import json
from pathlib import Path
from typing import Any, Dict, Optional

from pydantic import ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from continual_lora.core.exceptions import ConfigError
from continual_lora.models.schemas import PRESETS, ExperimentConfig, SimConfig


class Settings(BaseSettings):
    """Process-level settings with environment variable support"""

    model_config = SettingsConfigDict(env_prefix="CLORA_", env_file=".env", extra="ignore")

    log_level: str = "INFO"
    log_json: bool = False
    # 0 means one worker per processor
    default_jobs: int = 0
    output_dir: Path = Path("results")


# Global settings instance
settings = Settings()


def get_settings() -> Settings:
    """Accessor for the process settings"""
    return settings


SIM_FIELDS = frozenset(SimConfig.model_fields)
EXPERIMENT_FIELDS = frozenset(ExperimentConfig.model_fields) - {"sim"}


def _format_validation_error(e: ValidationError) -> str:
    parts = []
    for err in e.errors():
        loc = ".".join(str(p) for p in err.get("loc", ()) if p != "sim") or "config"
        parts.append(f"{loc}: {err.get('msg')}")
    return "; ".join(parts)


def build_experiment_config(flat: Dict[str, Any]) -> ExperimentConfig:
    """Build an ExperimentConfig from a flat mapping of SimConfig/ExperimentConfig keys"""
    unknown = sorted(set(flat) - SIM_FIELDS - EXPERIMENT_FIELDS)
    if unknown:
        raise ConfigError(f"Unknown config keys: {', '.join(unknown)}")

    sim_values = {k: v for k, v in flat.items() if k in SIM_FIELDS}
    exp_values = {k: v for k, v in flat.items() if k in EXPERIMENT_FIELDS}
    try:
        return ExperimentConfig(sim=SimConfig(**sim_values), **exp_values)
    except ValidationError as e:
        raise ConfigError(f"Invalid config: {_format_validation_error(e)}") from e


def read_config_file(path: Path) -> Dict[str, Any]:
    """Read a flat JSON config file"""
    try:
        raw = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"Cannot read config file {path}: {e}") from e
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {path} must contain a JSON object")
    return data


def resolve_experiment_config(
    config_path: Optional[Path] = None,
    overrides: Optional[Dict[str, Any]] = None,
    preset: Optional[str] = None,
) -> ExperimentConfig:
    """Defaults < preset < config file < explicit overrides"""
    flat: Dict[str, Any] = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"Unknown preset: {preset} (choose from {', '.join(sorted(PRESETS))})")
        flat.update(PRESETS[preset])
    if config_path is not None:
        flat.update(read_config_file(config_path))
    if overrides:
        flat.update({k: v for k, v in overrides.items() if v is not None})
    return build_experiment_config(flat)


def flatten_experiment_config(config: ExperimentConfig) -> Dict[str, Any]:
    """Inverse of build_experiment_config, JSON-ready"""
    flat = config.sim.model_dump(mode="json")
    flat.update(config.model_dump(mode="json", exclude={"sim"}))
    return flat


def dump_experiment_config(config: ExperimentConfig) -> str:
    return json.dumps(flatten_experiment_config(config), sort_keys=True, indent=2)
