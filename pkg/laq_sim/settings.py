"""
Configuration for the LAQ simulator.
User settings come from a JSON file layered over built-in defaults.
Experiments are INI files (or built-in presets) with an [experiment] section
and optional per-algorithm sections; command-line flags override both.
"""

import configparser
import json
import logging
import os
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

from laq_sim.constants import (
    DEFAULT_CACHE_DIR, DEFAULT_OUTPUT_DIR, DEFAULT_SETTINGS_FILE, CACHE_DIR_ENV,
    REFERENCE_ITERATIONS, DEFAULT_D, Algorithm, ModelKind, PartitionMode, Errors
)
from laq_sim.criterion import experiment_xi, recipe_xi
from laq_sim.engine import RunConfig
from laq_sim.exceptions import ConfigError

logger = logging.getLogger(__name__)


class Settings:
    """Manages user settings"""

    def __init__(self, settings_file: str = DEFAULT_SETTINGS_FILE):
        self.settings_file = os.path.expanduser(settings_file)
        self._settings = self._load_default_settings()
        self.load()

    def _load_default_settings(self) -> Dict[str, Any]:
        """Load default settings"""
        return {
            "cache_dir": DEFAULT_CACHE_DIR,
            "output_dir": DEFAULT_OUTPUT_DIR,
            "log_level": "INFO",
            "reference_iterations": REFERENCE_ITERATIONS,
        }

    def load(self) -> None:
        """Load settings from file"""
        try:
            if os.path.exists(self.settings_file):
                with open(self.settings_file, 'r', encoding='utf-8') as f:
                    file_settings = json.load(f)
                if not isinstance(file_settings, dict):
                    raise ValueError("settings file must hold a JSON object")
                self._settings.update(file_settings)
        except (json.JSONDecodeError, OSError, ValueError) as e:
            logger.warning("Could not load settings from %s: %s", self.settings_file, e)

    def save(self) -> None:
        """Save settings to file"""
        try:
            os.makedirs(os.path.dirname(self.settings_file) or ".", exist_ok=True)
            with open(self.settings_file, 'w', encoding='utf-8') as f:
                json.dump(self._settings, f, indent=2)
        except OSError as e:
            logger.error("Could not save settings to %s: %s", self.settings_file, e)

    def get(self, key: str, default: Any = None) -> Any:
        return self._settings.get(key, default)

    def set(self, key: str, value: Any) -> None:
        self._settings[key] = value

    def reset_to_defaults(self) -> None:
        """Reset settings to defaults (in memory only)"""
        self._settings = self._load_default_settings()

    def to_dict(self) -> Dict[str, Any]:
        return self._settings.copy()

    def cache_dir(self, flag: Optional[str] = None) -> Path:
        """Flag, then environment variable, then settings file, then built-in default"""
        for candidate in (flag, os.environ.get(CACHE_DIR_ENV), self.get("cache_dir")):
            if candidate:
                return Path(candidate).expanduser()
        return Path(DEFAULT_CACHE_DIR).expanduser()


def _parse_bool(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text not in configparser.ConfigParser.BOOLEAN_STATES:
        raise ValueError(value)
    return configparser.ConfigParser.BOOLEAN_STATES[text]


def _parse_floats(value: Any) -> Tuple[float, ...]:
    if isinstance(value, (list, tuple)):
        return tuple(float(v) for v in value)
    return tuple(float(v) for v in str(value).replace(",", " ").split())


def _parse_optional_float(value: Any) -> Optional[float]:
    if value is None or str(value).strip().lower() in ("", "none"):
        return None
    return float(value)


# key -> (RunConfig field, parser); bigD and xi are resolved together
RUN_KEYS: Dict[str, Tuple[str, Callable[[Any], Any]]] = {
    "alpha": ("alpha", float),
    "bits": ("bits", int),
    "max_staleness": ("max_staleness", int),
    "workers": ("num_workers", int),
    "iters": ("max_iterations", int),
    "target_residual": ("target_residual", _parse_optional_float),
    "minibatch": ("minibatch", int),
    "seed": ("seed", int),
    "model": ("model", ModelKind),
    "dataset": ("dataset", str),
    "lambda": ("lam", float),
    "hidden": ("hidden", int),
    "partition": ("partition", PartitionMode),
    "p": ("dimension", int),
    "mu": ("mu", float),
    "smoothness": ("worker_smoothness", _parse_floats),
    "lipschitz": ("smoothness", _parse_optional_float),
    "samples": ("samples", int),
    "check_descent": ("check_descent", _parse_bool),
    "log_every": ("log_every", int),
}
XI_KEYS = ("bigD", "xi")
EXPERIMENT_ONLY_KEYS = ("algorithms", "seeds", "out", "sweep_bits")
EXPERIMENT_SECTION = "experiment"


def resolve_xi(depth: Optional[Any], xi: Optional[Any]) -> Optional[Tuple[float, ...]]:
    """Turn (bigD, xi) into a weight vector. xi may be `recipe`, `experiment`,
    one value repeated D times, or D explicit values"""
    if depth is None and xi is None:
        return None
    depth = None if depth is None else int(depth)
    if xi is None or str(xi).strip().lower() == "experiment":
        return experiment_xi(DEFAULT_D if depth is None else depth) if depth != 0 else ()
    if str(xi).strip().lower() == "recipe":
        return recipe_xi(DEFAULT_D if depth is None else depth) if depth != 0 else ()
    values = _parse_floats(xi)
    if len(values) == 1 and depth is not None:
        return values * depth
    if depth is not None and len(values) != depth:
        raise ConfigError(Errors.DIMENSION_MISMATCH.value.format(expected=depth, actual=len(values)))
    return values


PRESETS: Dict[str, Dict[str, Dict[str, str]]] = {
    "paper-gd-suite": {
        "experiment": {
            "dataset": "mnist", "model": "logistic", "algorithms": "gd qgd lag laq",
            "workers": "10", "alpha": "0.02", "bits": "3", "bigD": "10", "xi": "experiment",
            "max_staleness": "100", "lambda": "0.01", "iters": "10000", "target_residual": "1e-6",
        },
    },
    "paper-sgd-suite": {
        "experiment": {
            "dataset": "mnist", "model": "logistic", "algorithms": "sgd slaq",
            "workers": "10", "alpha": "0.008", "bits": "3", "bigD": "10", "xi": "experiment",
            "max_staleness": "100", "lambda": "0.01", "iters": "1000", "minibatch": "500",
        },
    },
    "paper-mlp-gd-suite": {
        "experiment": {
            "dataset": "mnist", "model": "mlp", "algorithms": "gd qgd lag laq",
            "workers": "10", "alpha": "0.02", "bits": "8", "bigD": "10", "xi": "experiment",
            "max_staleness": "100", "lambda": "0.01", "hidden": "200", "iters": "1000",
        },
    },
    "paper-mlp-sgd-suite": {
        "experiment": {
            "dataset": "mnist", "model": "mlp", "algorithms": "sgd slaq",
            "workers": "10", "alpha": "0.008", "bits": "8", "bigD": "10", "xi": "experiment",
            "max_staleness": "100", "lambda": "0.01", "hidden": "200", "iters": "1000",
            "minibatch": "500",
        },
    },
    "recipe-quadratic": {
        "experiment": {
            "dataset": "synthetic-quadratic", "model": "quadratic", "algorithms": "gd qgd lag laq",
            "workers": "5", "p": "20", "mu": "1", "smoothness": "2 2 2 2 2",
            "alpha": "0.0125", "bits": "8", "bigD": "5", "xi": "recipe", "max_staleness": "20",
            "iters": "5000", "target_residual": "1e-10",
        },
    },
    "mnist-bits-sweep": {
        "experiment": {
            "dataset": "mnist", "model": "logistic", "algorithms": "laq", "sweep_bits": "2 3 4 8",
            "workers": "10", "alpha": "0.02", "bigD": "10", "xi": "experiment",
            "max_staleness": "100", "lambda": "0.01", "iters": "10000", "target_residual": "1e-6",
        },
    },
    "mnist-heterogeneous": {
        "experiment": {
            "dataset": "mnist", "model": "logistic", "algorithms": "lag laq",
            "partition": "heterogeneous", "workers": "10", "alpha": "0.02", "bits": "3",
            "bigD": "10", "xi": "experiment", "max_staleness": "100", "lambda": "0.01",
            "iters": "10000", "target_residual": "1e-6",
        },
    },
}
# names kept for the MNIST suites
PRESET_ALIASES: Dict[str, str] = {
    "mnist-gd-suite": "paper-gd-suite",
    "mnist-sgd-suite": "paper-sgd-suite",
    "mnist-mlp-gd-suite": "paper-mlp-gd-suite",
    "mnist-mlp-sgd-suite": "paper-mlp-sgd-suite",
}
PRESET_NAMES: Tuple[str, ...] = tuple(sorted(set(PRESETS) | set(PRESET_ALIASES)))


class ExperimentFile:
    """Declarative description of one or more runs"""

    def __init__(self, parser: configparser.ConfigParser, source: str = "<experiment>"):
        self.parser = parser
        self.source = source
        self._validate()

    @classmethod
    def load(cls, path: str) -> 'ExperimentFile':
        parser = cls._new_parser()
        try:
            with open(path, "r", encoding="utf-8") as f:
                parser.read_file(f, source=str(path))
        except OSError as e:
            raise ConfigError(f"Cannot read experiment file {path}: {e}") from e
        except configparser.Error as e:
            raise ConfigError(f"Malformed experiment file {path}: {e}") from e
        return cls(parser, str(path))

    @classmethod
    def from_dict(cls, sections: Mapping[str, Mapping[str, Any]],
                  source: str = "<experiment>") -> 'ExperimentFile':
        parser = cls._new_parser()
        parser.read_dict({name: {k: str(v) for k, v in values.items()}
                          for name, values in sections.items()})
        if not parser.has_section(EXPERIMENT_SECTION):
            parser.add_section(EXPERIMENT_SECTION)
        return cls(parser, source)

    @classmethod
    def from_preset(cls, name: str) -> 'ExperimentFile':
        resolved = PRESET_ALIASES.get(name, name)
        if resolved not in PRESETS:
            raise ConfigError(Errors.INVALID_VALUE.value.format(key="preset", value=name))
        return cls.from_dict(PRESETS[resolved], f"preset {name}")

    @staticmethod
    def _new_parser() -> configparser.ConfigParser:
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        return parser

    def _validate(self) -> None:
        algorithm_names = {a.value for a in Algorithm}
        for section in self.parser.sections():
            if section == EXPERIMENT_SECTION:
                allowed = set(RUN_KEYS) | set(XI_KEYS) | set(EXPERIMENT_ONLY_KEYS)
            elif section in algorithm_names:
                allowed = set(RUN_KEYS) | set(XI_KEYS)
            else:
                raise ConfigError(Errors.UNKNOWN_SECTION.value.format(section=section, path=self.source))
            for key in self.parser[section]:
                if key not in allowed:
                    raise ConfigError(Errors.UNKNOWN_KEY.value.format(
                        key=key, section=section, path=self.source))
        self.algorithms()
        self.seeds()
        self.bits_sweep()

    def _section(self, name: str) -> Dict[str, str]:
        return dict(self.parser[name]) if self.parser.has_section(name) else {}

    def algorithms(self) -> List[Algorithm]:
        text = self._section(EXPERIMENT_SECTION).get("algorithms", Algorithm.LAQ.value)
        try:
            return [Algorithm(name) for name in text.replace(",", " ").split()]
        except ValueError as e:
            raise ConfigError(Errors.INVALID_VALUE.value.format(key="algorithms", value=text)) from e

    def seeds(self) -> List[int]:
        section = self._section(EXPERIMENT_SECTION)
        text = section.get("seeds", section.get("seed", "0"))
        try:
            return [int(s) for s in text.replace(",", " ").split()]
        except ValueError as e:
            raise ConfigError(Errors.INVALID_VALUE.value.format(key="seeds", value=text)) from e

    def bits_sweep(self) -> List[int]:
        """Code widths every quantized algorithm is repeated over; empty when not sweeping"""
        text = self._section(EXPERIMENT_SECTION).get("sweep_bits", "")
        try:
            return [int(b) for b in text.replace(",", " ").split()]
        except ValueError as e:
            raise ConfigError(Errors.INVALID_VALUE.value.format(key="sweep_bits", value=text)) from e

    @property
    def output_dir(self) -> Optional[str]:
        return self._section(EXPERIMENT_SECTION).get("out")

    def run_configs(self, overrides: Optional[Mapping[str, Any]] = None,
                    algorithms: Optional[Sequence[Algorithm]] = None,
                    seeds: Optional[Sequence[int]] = None) -> List[RunConfig]:
        """One RunConfig per (algorithm, width, seed); flags > algorithm section > [experiment] > defaults.
        A `sweep_bits` list repeats quantized algorithms once per width unless a bits flag is given"""
        flags = {k: v for k, v in (overrides or {}).items() if v is not None}
        seed_list = [int(flags["seed"])] if "seed" in flags else list(seeds or self.seeds())
        configs = []
        for algorithm in algorithms or self.algorithms():
            layered: Dict[str, Any] = {}
            layered.update({k: v for k, v in self._section(EXPERIMENT_SECTION).items()
                            if k not in EXPERIMENT_ONLY_KEYS})
            layered.update(self._section(algorithm.value))
            layered.update(flags)
            widths: List[Optional[int]] = [None]
            if algorithm.quantized and "bits" not in flags and self.bits_sweep():
                widths = list(self.bits_sweep())
            for bits in widths:
                values = layered if bits is None else dict(layered, bits=bits)
                for seed in seed_list:
                    configs.append(self._build(algorithm, dict(values, seed=seed)))
        return configs

    def _build(self, algorithm: Algorithm, values: Mapping[str, Any]) -> RunConfig:
        kwargs: Dict[str, Any] = {"algorithm": algorithm}
        for key, raw in values.items():
            if key in XI_KEYS:
                continue
            if key not in RUN_KEYS:
                raise ConfigError(Errors.UNKNOWN_KEY.value.format(
                    key=key, section="flags", path=self.source))
            name, parse = RUN_KEYS[key]
            try:
                kwargs[name] = parse(raw)
            except (TypeError, ValueError) as e:
                raise ConfigError(Errors.INVALID_VALUE.value.format(key=key, value=raw)) from e
        xi = resolve_xi(values.get("bigD"), values.get("xi"))
        if xi is not None:
            kwargs["xi"] = xi
        # the synthetic quadratic is both a dataset and a model
        if kwargs.get("model") == ModelKind.QUADRATIC and "dataset" not in kwargs:
            kwargs["dataset"] = "synthetic-quadratic"
        if kwargs.get("dataset") == "synthetic-quadratic" and "model" not in kwargs:
            kwargs["model"] = ModelKind.QUADRATIC
        return RunConfig(**kwargs).validate()
