"""Configuration management for probeforge."""

import os
import json
from pathlib import Path
from typing import Optional, Dict, Any

from .errors import ConfigError

SEED_ENV_VAR = "PROBE_FORGE_SEED"
HOME_ENV_VAR = "PROBE_FORGE_HOME"

DEFAULTS: Dict[str, Any] = {
    "seed": 17,
    "retrieval_threshold": 0.1,
    "answer_marker": "####",
    "sparsity_tau": 1e-3,
    "length_threshold": 4096,
    "ci_method": "normal",
    "heatmap_format": "svg",
    "workers": 1,
}

_TYPES = {
    "seed": int,
    "retrieval_threshold": float,
    "answer_marker": str,
    "sparsity_tau": float,
    "length_threshold": int,
    "ci_method": str,
    "heatmap_format": str,
    "workers": int,
}


def _check(key: str, value: Any) -> Any:
    expected = _TYPES.get(key)
    if expected is None or value is None:
        return value
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if expected is int and isinstance(value, str) and value.lstrip("-").isdigit():
        return int(value)
    if expected is float and isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            pass
    if not isinstance(value, expected) or isinstance(value, bool):
        raise ConfigError(f"config key '{key}' expects {expected.__name__}, got {value!r}")
    return value


class Config:
    """Manage configuration for the probeforge workbench."""

    def __init__(self, config_dir: Optional[Path] = None):
        """Initialize configuration.

        Args:
            config_dir: Directory holding config.json.
                       Defaults to $PROBE_FORGE_HOME or ~/.probeforge
        """
        if config_dir is None:
            env_home = os.environ.get(HOME_ENV_VAR)
            config_dir = Path(env_home) if env_home else Path.home() / ".probeforge"

        self.config_dir = Path(config_dir)
        self.config_file = self.config_dir / "config.json"

        self._config = self._load_config()

    def _load_config(self) -> Dict[str, Any]:
        """Load configuration from file, falling back to defaults."""
        config = dict(DEFAULTS)
        if self.config_file.exists():
            with open(self.config_file, 'r') as f:
                stored = json.load(f)
            for key, value in stored.items():
                config[key] = _check(key, value)
        return config

    def _save_config(self, config: Dict[str, Any]) -> None:
        """Save configuration to file."""
        self.config_dir.mkdir(parents=True, exist_ok=True)
        with open(self.config_file, 'w') as f:
            json.dump(config, f, indent=2, sort_keys=True)

    @classmethod
    def from_file(cls, path: Path, config_dir: Optional[Path] = None) -> "Config":
        """Load the stored config and overlay a user JSON file on top.

        Args:
            path: JSON file with overrides
            config_dir: Base config directory

        Returns:
            Config with the overrides applied (not persisted)
        """
        config = cls(config_dir)
        with open(path, 'r') as f:
            overrides = json.load(f)
        if not isinstance(overrides, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        for key, value in overrides.items():
            config._config[key] = _check(key, value)
        return config

    def get(self, key: str, default: Any = None) -> Any:
        """Get configuration value."""
        return self._config.get(key, default)

    def set(self, key: str, value: Any) -> None:
        """Set configuration value."""
        self._config[key] = _check(key, value)
        self._save_config(self._config)

    def get_seed(self, explicit: Optional[int] = None) -> int:
        """Resolve the global seed: explicit value, then environment, then config."""
        if explicit is not None:
            return int(explicit)

        env_seed = os.environ.get(SEED_ENV_VAR)
        if env_seed:
            try:
                return int(env_seed)
            except ValueError:
                raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {env_seed!r}")

        return int(self._config.get("seed", DEFAULTS["seed"]))

    def as_dict(self) -> Dict[str, Any]:
        """Return a copy of the effective configuration."""
        return dict(self._config)
