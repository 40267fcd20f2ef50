import copy
import os
from pathlib import Path

import yaml

from src.errors import ConfigError
from src.utils import config_hash

DEFAULT_CONFIG_PATH = 'config/config.yaml'

# Sections each subcommand cannot run without.
REQUIRED_SECTIONS = {
    'solve-grid': ['grid_problem', 'solver'],
    'train': ['neural_problem', 'training'],
    'study': ['study'],
}


class Config:
    """YAML config with dotted-path lookup."""

    def __init__(self, data=None, path=None):
        self._config = data if data is not None else {}
        self.path = path

    @classmethod
    def load(cls, config_path=DEFAULT_CONFIG_PATH, required_sections=()):
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}", key=str(path))
        try:
            with open(path, 'r') as f:
                data = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"Config file {path} is not valid YAML: {e}", key=str(path)) from e
        if not isinstance(data, dict):
            raise ConfigError(f"Config file {path} must hold a mapping", key=str(path))

        instance = cls(data, path=str(path))
        instance._validate_config(required_sections)
        return instance

    def _validate_config(self, required_sections):
        for section in required_sections:
            if section not in self._config:
                raise ConfigError(f"Missing required configuration section: {section}", key=section)

    def apply_overrides(self, seed=None, environ=None):
        """Seed precedence: explicit argument, then OTFLOW_SEED, then the file."""
        environ = os.environ if environ is None else environ
        runtime = self._config.setdefault('runtime', {})
        if environ.get('OTFLOW_THREADS'):
            runtime['threads'] = self._parse_int('OTFLOW_THREADS', environ['OTFLOW_THREADS'])
        if environ.get('OTFLOW_SEED'):
            runtime['seed'] = self._parse_int('OTFLOW_SEED', environ['OTFLOW_SEED'])
        if seed is not None:
            runtime['seed'] = int(seed)
        return self

    @staticmethod
    def _parse_int(key, raw):
        try:
            return int(raw)
        except ValueError as e:
            raise ConfigError(f"{key} must be an integer, got {raw!r}", key=key) from e

    def get(self, key_path, default=None):
        keys = key_path.split('.')
        value = self._config

        for key in keys:
            if isinstance(value, dict) and key in value:
                value = value[key]
            else:
                return default

        return value

    def require(self, key_path):
        sentinel = object()
        value = self.get(key_path, sentinel)
        if value is sentinel:
            raise ConfigError(f"Missing required configuration key: {key_path}", key=key_path)
        return value

    def section(self, name):
        value = self._config.get(name, {})
        if not isinstance(value, dict):
            raise ConfigError(f"Configuration section {name} must be a mapping", key=name)
        return value

    def as_dict(self):
        return copy.deepcopy(self._config)

    @property
    def digest(self):
        return config_hash(self._config)

    @property
    def seed(self):
        return int(self.get('runtime.seed', 0))

    @property
    def threads(self):
        return max(1, int(self.get('runtime.threads', 1)))

    @property
    def logging_config(self):
        return self._config.get('logging', {})

    @property
    def database(self):
        return self._config.get('database', {}) or {}
