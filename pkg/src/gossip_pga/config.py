"""Configuration file handling for experiments."""

import json
import logging
from pathlib import Path
from typing import Any

from .models import ExperimentConfig, RunnerSettings

logger = logging.getLogger(__name__)


class ConfigManager:
    """Manages configuration loading and validation."""

    def __init__(self, config_path: str | Path):
        self.config_path = Path(config_path)
        self._config: ExperimentConfig | None = None
        self._settings: RunnerSettings | None = None

    def load_config(self) -> ExperimentConfig:
        """Load and validate configuration from file."""
        if not self.config_path.exists():
            raise FileNotFoundError(f"Config file not found: {self.config_path}")

        try:
            with open(self.config_path) as f:
                config_data = json.load(f)

            self._config = ExperimentConfig(**config_data)
            logger.info(
                f"Loaded experiment configuration with {len(self._config.runs)} runs "
                f"on {self._config.topology.kind} (n={self._config.problem.n})"
            )
            return self._config

        except json.JSONDecodeError as e:
            raise ValueError(f"Invalid JSON in config file: {e}") from e
        except Exception as e:
            raise ValueError(f"Failed to load config: {e}") from e

    def get_settings(self, **overrides) -> RunnerSettings:
        """Get runtime settings with optional overrides."""
        if self._settings is None:
            self._settings = RunnerSettings()

        # None means "keep the configured value"
        overrides = {key: value for key, value in overrides.items() if value is not None}
        if overrides:
            settings_dict = self._settings.model_dump()
            settings_dict.update(overrides)
            return RunnerSettings(**settings_dict)

        return self._settings

    def get_experiment_info(self) -> dict[str, Any]:
        """Summarize the loaded experiment for log output."""
        if self._config is None:
            return {}

        config = self._config
        transient = config.transient
        return {
            "topology": str(config.topology.kind),
            "sizes": config.sizes or [config.problem.n],
            "heterogeneity": str(config.problem.heterogeneity),
            "runs": {run.label: str(run.variant) for run in config.runs},
            "iterations": sum(run.T for run in config.runs),
            "trials": config.trials,
            "transient_reference": transient.reference if transient.enabled else None,
        }
