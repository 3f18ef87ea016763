# photostep_core/config.py
"""
Configuration management for photostep.

This module handles the loading and default value application
for photostep's configuration file (`config.ini`), plus the environment
overrides (`PHOTOSTEP_<SECTION>_<KEY>`) applied on top of it.
"""
from __future__ import annotations

import configparser
import logging
import os
import pathlib
from typing import Optional

from .exceptions import ConfigError

log = logging.getLogger(__name__)

# --- Constants ---
APP_NAME = "photostep"
ENV_PREFIX = "PHOTOSTEP_"
CONFIG_DIR = pathlib.Path.home() / ".config" / APP_NAME
CONFIG_FILE = CONFIG_DIR / "config.ini"

# Default configuration values.
# base_variance is in µs²; tau_frames is in frames and converted with the frame width.
DEFAULT_CONFIG: dict[str, dict[str, str]] = {
    "Proposal": {
        "base_variance": "10000",
        "window_size": "10",
        "resolution": "",
    },
    "Priors": {
        "lambda": "2.5",
        "lambda_t": "0.001",
        "k_max": "50",
        "tau_frames": "10",
        "p_accept": "0.5",
        "c": "0.5",
        "gamma": "0.1",
        "nu_f_scale": "0.005",
        "nu_b_scale": "1.0",
    },
    "Gibbs": {
        "proposal_scale_f": "0.01",
        "proposal_scale_b": "0.01",
        "variance_proposal_scale": "0.1",
    },
    "Hyperparams": {
        "intensity_floor": "",
        "floor_multiplier": "0.9",
        "weighting": "homogeneous",
    },
    "Sampler": {
        "n_iter": "20000",
        "burn_in_fraction": "0.5",
        "extension": "10000",
        "max_iter": "100000",
        "n_chains": "3",
        "psrf_threshold": "1.2",
        "seed": "0",
        "min_modal_samples": "10",
        "update_intensity": "true",
    },
}


class ConfigManager:
    """Handles reading config.ini."""

    def __init__(self, config_file: Optional[pathlib.Path] = None):
        self.config_file = pathlib.Path(config_file) if config_file else CONFIG_FILE

    def _load_ini(self, file_path: pathlib.Path) -> configparser.ConfigParser:
        parser = configparser.ConfigParser()
        if file_path.exists():
            try:
                if file_path.stat().st_size > 0:
                    parser.read(file_path, encoding="utf-8")
                else:
                    log.warning(f"Config file {file_path} is empty.")
            except configparser.Error as e:
                raise ConfigError(f"Could not parse config file {file_path}: {e}") from e
            except OSError as e:
                raise ConfigError(f"Could not read config file {file_path}: {e}") from e
        elif file_path != CONFIG_FILE:
            raise ConfigError(f"Config file not found: {file_path}")
        return parser

    def load_config(self) -> configparser.ConfigParser:
        parser = self._load_ini(self.config_file)
        made_changes = False
        for section, defaults in DEFAULT_CONFIG.items():
            if not parser.has_section(section):
                parser.add_section(section)
                made_changes = True
            for key, value in defaults.items():
                if not parser.has_option(section, key):
                    parser.set(section, key, value)
                    made_changes = True
        if made_changes:
            log.debug("Default values applied in memory to the loaded configuration.")
        self._apply_env_overrides(parser)
        return parser

    def _apply_env_overrides(self, parser: configparser.ConfigParser) -> None:
        for section in parser.sections():
            for key in parser.options(section):
                env_name = f"{ENV_PREFIX}{section.upper()}_{key.upper()}"
                value = os.environ.get(env_name)
                if value is not None:
                    log.debug(f"Environment override {env_name}={value}")
                    parser.set(section, key, value)

    def get_setting(
        self,
        config: configparser.ConfigParser,
        section: str,
        key: str,
        default: Optional[str] = None,
    ) -> Optional[str]:
        return config.get(section, key, fallback=default)

    def set_setting(self, config: configparser.ConfigParser, section: str, key: str, value: str):
        if not config.has_section(section):
            config.add_section(section)
        config.set(section, key, value)

    # --- Typed Accessors ---

    def get_float(self, config: configparser.ConfigParser, section: str, key: str) -> Optional[float]:
        """Reads a float; a blank value means 'unset' and yields None."""
        raw = self.get_setting(config, section, key, "")
        if raw is None or raw.strip() == "":
            return None
        try:
            return float(raw)
        except ValueError as e:
            raise ConfigError(f"[{section}] {key}: expected a number, got '{raw}'") from e

    def get_int(self, config: configparser.ConfigParser, section: str, key: str) -> int:
        raw = self.get_setting(config, section, key, "")
        try:
            return int(raw)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"[{section}] {key}: expected an integer, got '{raw}'") from e

    def get_bool(self, config: configparser.ConfigParser, section: str, key: str) -> bool:
        try:
            return config.getboolean(section, key)
        except ValueError as e:
            raise ConfigError(f"[{section}] {key}: expected a boolean, got '{config.get(section, key)}'") from e
