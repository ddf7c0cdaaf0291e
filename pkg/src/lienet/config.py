"""Run configuration: typed defaults, INI files and command-line overrides.

Precedence is defaults < config file < flags. The resolved configuration is
echoed as INI so a run can be repeated from its output directory.
"""

import configparser
import io
from pathlib import Path

from .errors import ConfigError

ECHO_NAME = "config.echo.ini"

# value types follow the defaults; None marks an optional float
DEFAULTS = {
    "run": {"seed": 0, "out": "out"},
    "synth": {
        "classes": 4,
        "frames": 20,
        "sigma": 0.1,
        "samples_per_class": 50,
        "test_per_class": 50,
        "max_velocity": 0.08,
        "speed_min": 1.0,
        "speed_max": 1.0,
        "pose_sigma": 0.0,
        "max_offset": 0.0,
    },
    "extract": {"input": "", "length": 20, "mode": "geodesic", "output": "features"},
    "network": {
        "blocks": 1,
        "pool_window": 4,
        "threshold": None,
        "vectorize": "full",
        # geometry for --shapes-only without data; 0 means "take it from the data"
        "bones": 0,
        "frames": 0,
        "classes": 0,
    },
    "train": {
        "data": "",
        "validation": "",
        "length": 20,
        "learning_rate": 0.01,
        "batch_size": 30,
        "epochs": 50,
        "shuffle": True,
        "lr_decay": 1.0,
    },
    "eval": {"data": "", "checkpoint": "", "length": 20},
    "gradcheck": {
        "blocks": 1,
        "frames": 8,
        "classes": 3,
        "data_tol": 1e-4,
        "rotmap_tol": 1e-3,
        "step": 1e-6,
        "manifold_step": 1e-5,
        "directions": 3,
        "mutate": -1,
    },
}

_OPTIONAL_FLOAT = {("network", "threshold")}
_CHOICES = {
    ("extract", "mode"): ("geodesic", "nearest"),
    ("network", "vectorize"): ("full", "so3"),
}
_POSITIVE = {
    ("synth", "classes"), ("synth", "frames"), ("extract", "length"), ("train", "length"),
    ("eval", "length"), ("network", "pool_window"), ("train", "learning_rate"),
    ("train", "batch_size"), ("gradcheck", "frames"), ("gradcheck", "classes"),
    ("gradcheck", "data_tol"), ("gradcheck", "rotmap_tol"), ("gradcheck", "step"),
    ("gradcheck", "manifold_step"), ("gradcheck", "directions"),
}
_NON_NEGATIVE = {
    ("run", "seed"), ("synth", "sigma"), ("synth", "samples_per_class"),
    ("synth", "test_per_class"), ("synth", "max_velocity"), ("synth", "pose_sigma"),
    ("synth", "max_offset"), ("network", "blocks"), ("network", "bones"),
    ("network", "frames"), ("network", "classes"), ("train", "epochs"),
    ("gradcheck", "blocks"),
}


def _parse(section, key, text):
    default = DEFAULTS[section][key]
    text = text.strip()
    where = f"[{section}] {key}"
    try:
        if (section, key) in _OPTIONAL_FLOAT:
            return None if text.lower() in ("", "none") else float(text)
        if isinstance(default, bool):
            states = configparser.ConfigParser.BOOLEAN_STATES
            if text.lower() not in states:
                raise ValueError(text)
            return states[text.lower()]
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text!r}") from None
    return text


def _format(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    """Resolved settings, addressed as ``cfg[section, key]``."""

    def __init__(self, values=None):
        self._values = {s: dict(keys) for s, keys in DEFAULTS.items()}
        for (section, key), value in (values or {}).items():
            self.set(section, key, value)

    def __getitem__(self, item):
        section, key = item
        return self._values[section][key]

    def section(self, name):
        return dict(self._values[name])

    def set(self, section, key, value):
        """Set one value; strings are parsed with the key's type."""
        if section not in DEFAULTS or key not in DEFAULTS[section]:
            raise ConfigError(f"unknown setting [{section}] {key}")
        if isinstance(value, str) and not isinstance(DEFAULTS[section][key], str):
            value = _parse(section, key, value)
        self._values[section][key] = value

    def update_from_file(self, path):
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";",))
        parser.optionxform = str
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except configparser.Error as err:
            raise ConfigError(f"{path}: {' '.join(str(err).split())}") from None
        for section in parser.sections():
            for key, text in parser.items(section):
                self.set(section, key, text)

    def validate(self):
        for (section, key) in _POSITIVE:
            if not self[section, key] > 0:
                raise ConfigError(f"[{section}] {key} must be > 0, got {self[section, key]}")
        for (section, key) in _NON_NEGATIVE:
            if self[section, key] < 0:
                raise ConfigError(f"[{section}] {key} must be >= 0, got {self[section, key]}")
        for (section, key), allowed in _CHOICES.items():
            if self[section, key] not in allowed:
                raise ConfigError(f"[{section}] {key} must be one of {', '.join(allowed)}")
        if self["synth", "speed_min"] > self["synth", "speed_max"] or self["synth", "speed_min"] <= 0:
            raise ConfigError("[synth] need 0 < speed_min <= speed_max")
        if not 0 < self["train", "lr_decay"] <= 1:
            raise ConfigError("[train] lr_decay must lie in (0, 1]")
        return self

    def to_ini(self):
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        for section, keys in self._values.items():
            parser[section] = {k: _format(v) for k, v in keys.items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def echo(self, directory):
        path = Path(directory) / ECHO_NAME
        path.write_text(self.to_ini(), encoding="utf-8")
        return path


def resolve(config_path=None, overrides=()):
    """Defaults, then the optional file, then ``(section, key, value)`` overrides."""
    cfg = RunConfig()
    if config_path is not None:
        cfg.update_from_file(config_path)
    for section, key, value in overrides:
        if value is not None:
            cfg.set(section, key, value)
    return cfg.validate()
