"""
Configuration management for GNE Tool Suite.
Handles user preferences, environment overrides and experiment config files.
"""

import copy
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from dotenv import load_dotenv

load_dotenv()


DEFAULT_PREFERENCES = {
    "output_dir": "results",
    "log_level": "INFO",
    "solver": {
        "fp_tol": 1e-8,
        "kkt_tol": None,
        "max_iters": 50000,
        "fb_margin": 1e-2,
        "safety": 0.99,
    },
    "reference": {
        "fp_tol": 1e-10,
        "max_iters": 200000,
    },
    "sampling": {
        "pairs": 1000,
        "seed": 20200101,
    },
}

SOLVER_NAMES = ("fb", "fbf", "fbhf")
REFERENCE_POLICIES = ("compute", "load", "none")


class Config:
    """Configuration handler for user preferences and environment overrides."""

    APP_VERSION = "1.0.1"
    INSTANCE_SCHEMA_VERSION = "1.0"

    @staticmethod
    def config_dir():
        """Preferences directory, `GNE_PREFS_DIR` wins over the home default."""
        override = os.getenv('GNE_PREFS_DIR')
        if override:
            return Path(override)
        return Path.home() / '.gne-tool-suite'

    @staticmethod
    def prefs_file():
        return Config.config_dir() / 'preferences.json'

    @staticmethod
    def load_preferences():
        """Load user preferences, merged over the defaults."""
        prefs = copy.deepcopy(DEFAULT_PREFERENCES)
        prefs_file = Config.prefs_file()
        if prefs_file.exists():
            try:
                with open(prefs_file, 'r') as f:
                    stored = json.load(f)
                _merge(prefs, stored)
            except Exception as e:
                print(f"Warning: could not load preferences from {prefs_file}: {e}")
        return prefs

    @staticmethod
    def save_preferences(prefs):
        """Save user preferences to the config file."""
        try:
            Config.config_dir().mkdir(parents=True, exist_ok=True)
            with open(Config.prefs_file(), 'w') as f:
                json.dump(prefs, f, indent=2)
        except Exception as e:
            print(f"Warning: could not save preferences: {e}")

    @staticmethod
    def get_output_dir():
        """Output directory with priority: env GNE_OUTPUT_DIR, then preferences."""
        env_dir = os.getenv('GNE_OUTPUT_DIR')
        if env_dir:
            return Path(env_dir)
        return Path(Config.load_preferences().get("output_dir", "results"))

    @staticmethod
    def get_log_level():
        env_level = os.getenv('GNE_LOG_LEVEL')
        if env_level:
            return env_level.upper()
        return str(Config.load_preferences().get("log_level", "INFO")).upper()

    @staticmethod
    def get_solver_defaults():
        """Solver defaults from preferences; GNE_MAX_ITERS overrides the iteration cap."""
        solver = dict(Config.load_preferences()["solver"])
        env_iters = os.getenv('GNE_MAX_ITERS')
        if env_iters:
            try:
                solver["max_iters"] = int(env_iters)
            except ValueError:
                print(f"Warning: ignoring non-integer GNE_MAX_ITERS={env_iters!r}")
        return solver

    @staticmethod
    def get_reference_defaults():
        return dict(Config.load_preferences()["reference"])

    @staticmethod
    def get_sampling_defaults():
        return dict(Config.load_preferences()["sampling"])


def _merge(base, override):
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _merge(base[key], value)
        else:
            base[key] = value


@dataclass
class ExperimentConfig:
    """
    One batch experiment: where the instance comes from, which solvers run,
    how they stop, which seeds, where results go, and how x* is obtained.
    """
    cournot: dict = None
    instance_file: str = None
    solvers: list = field(default_factory=lambda: list(SOLVER_NAMES))
    fp_tol: float = None
    kkt_tol: float = None
    max_iters: int = None
    seeds: list = field(default_factory=lambda: list(range(1, 11)))
    output_dir: str = None
    reference: str = "compute"

    def validate(self):
        # gne imports config, so the engine is imported lazily here.
        from gne.errors import ValidationError

        if not self.solvers:
            raise ValidationError("At least one solver is required.")
        unknown = [s for s in self.solvers if s not in SOLVER_NAMES]
        if unknown:
            raise ValidationError(f"Unknown solver(s): {', '.join(unknown)}")
        if not self.seeds:
            raise ValidationError("Seed list must not be empty.")
        if self.reference not in REFERENCE_POLICIES:
            raise ValidationError(f"Unknown reference policy '{self.reference}'")
        if self.cournot is not None and self.instance_file is not None:
            raise ValidationError("Give either generated Cournot params or an instance file, not both.")
        if self.fp_tol is None and self.kkt_tol is None and self.max_iters is None:
            raise ValidationError("At least one stopping criterion must be active.")
        return self

    @classmethod
    def from_file(cls, path):
        """Read a JSON experiment file mirroring the dataclass fields."""
        from gne.errors import ValidationError

        try:
            with open(path, 'r') as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ValidationError(f"Could not read config file {path}: {e}")

        instance = data.get("instance", {})
        stop = data.get("stop", {})
        return cls(
            cournot=instance.get("cournot"),
            instance_file=instance.get("file"),
            solvers=[s.lower() for s in data.get("solvers", list(SOLVER_NAMES))],
            fp_tol=stop.get("fp_tol"),
            kkt_tol=stop.get("kkt_tol"),
            max_iters=stop.get("max_iters"),
            seeds=list(data.get("seeds", list(range(1, 11)))),
            output_dir=data.get("output_dir"),
            reference=data.get("reference", "compute"),
        )

    def with_defaults(self):
        """Fill unset stopping criteria and output dir from preferences."""
        solver = Config.get_solver_defaults()
        if self.fp_tol is None and self.kkt_tol is None:
            self.fp_tol = solver["fp_tol"]
            self.kkt_tol = solver["kkt_tol"]
        if self.max_iters is None:
            self.max_iters = solver["max_iters"]
        if self.output_dir is None:
            self.output_dir = str(Config.get_output_dir())
        return self
