"""Run configuration: INI-style key=value sections with CLI overrides.

Unknown sections or keys are rejected by name, and every run persists the
fully resolved configuration next to its outputs.
"""

from __future__ import annotations

import configparser
from pathlib import Path


class ConfigError(Exception):
    pass


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_floats(raw: str) -> tuple:
    return tuple(float(x) for x in raw.split(",") if x.strip() != "")


def _parse_ints(raw: str) -> tuple:
    return tuple(int(x) for x in raw.split(",") if x.strip() != "")


_PARSERS = {
    "str": str,
    "int": int,
    "float": float,
    "bool": _parse_bool,
    "floats": _parse_floats,
    "ints": _parse_ints,
}

# Per-command schema: section -> key -> (type name, default). A None default
# marks a required key.
SCHEMAS = {
    "train": {
        "run": {"seed": ("int", 0), "out": ("str", "")},
        "train": {"target": ("str", "flow"),
                  "flow_checkpoint": ("str", "")},
        "dataset": {"kind": ("str", None), "dim": ("int", 2),
                    "n_classes": ("int", 3), "spread": ("float", 0.5),
                    "means": ("str", "")},
        "model": {"hidden": ("ints", (128, 128, 128)),
                  "time_width": ("int", 16)},
        "training": {"batch_size": ("int", 128), "steps": ("int", 2000),
                     "learning_rate": ("float", 0.05),
                     "lr_decay": ("float", 0.9),
                     "momentum": ("float", 0.9),
                     "optimizer": ("str", "sgd-momentum")},
    },
    "guide": {
        "run": {"seed": ("int", 0), "out": ("str", "")},
        "guide": {"method": ("str", "anchored"),
                  "flow_checkpoint": ("str", None),
                  "s": ("float", 1.0), "iterations": ("int", 100),
                  "windows": ("int", 4), "tolerance": ("float", 1e-4),
                  "normalize_gradient": ("bool", True),
                  "return_policy": ("str", "best-objective"),
                  "lr": ("float", 0.4), "momentum": ("float", 0.9),
                  "l2_coeff": ("float", 1.0),
                  "oracle_steps": ("int", 200)},
        "objective": {"kind": ("str", "gaussian"),
                      "mean": ("str", "1,1"), "scale": ("float", 1.0),
                      "checkpoint": ("str", ""), "target_class": ("int", 0),
                      "reference": ("str", ""),
                      "encoder_checkpoint": ("str", ""),
                      "l1_reference": ("str", ""), "l1_coeff": ("float", 0.0)},
    },
    "ablate": {
        "run": {"seed": ("int", 0), "out": ("str", "")},
        "ablate": {"flow_checkpoint": ("str", None),
                   "s_grid": ("floats", (0.5, 1.0, 2.0)),
                   "n_grid": ("ints", (20, 50, 100)),
                   "seeds": ("int", 8), "windows": ("int", 4),
                   "workers": ("int", 1),
                   "normalize_gradient": ("bool", True)},
        "objective": {"kind": ("str", "gaussian"),
                      "mean": ("str", "1,1"), "scale": ("float", 1.0),
                      "checkpoint": ("str", ""), "target_class": ("int", 0),
                      "reference": ("str", ""),
                      "encoder_checkpoint": ("str", ""),
                      "l1_reference": ("str", ""), "l1_coeff": ("float", 0.0)},
    },
    "props": {
        "run": {"seed": ("int", 0), "out": ("str", "")},
        "props": {"s_grid": ("floats", (0.01, 0.1, 0.5, 1.0)),
                  "rate_grid": ("floats", (0.1, 0.25, 0.5, 0.9)),
                  "iterations": ("int", 100),
                  "lipschitz": ("float", 2.0)},
    },
    "report": {
        "run": {"seed": ("int", 0), "out": ("str", "")},
    },
}


class RunConfig:
    """Resolved configuration for one command."""

    def __init__(self, command: str, values: dict[str, dict]):
        self.command = command
        self.values = values

    def get(self, section: str, key: str):
        return self.values[section][key]

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def write(self, path) -> None:
        parser = configparser.ConfigParser(interpolation=None)
        for section, keys in self.values.items():
            parser[section] = {}
            for key, value in keys.items():
                if isinstance(value, tuple):
                    rendered = ",".join(repr(v) if isinstance(v, float) else str(v)
                                        for v in value)
                else:
                    rendered = str(value)
                parser[section][key] = rendered
        with open(path, "w") as fh:
            parser.write(fh)


def load_config(command: str, config_path=None, overrides=(),
                seed=None, out=None) -> RunConfig:
    """Parse + validate a config file and apply ``section.key=value`` overrides."""
    schema = SCHEMAS.get(command)
    if schema is None:
        raise ConfigError(f"unknown command '{command}'")
    raw: dict[str, dict[str, str]] = {}
    if config_path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        read = parser.read(str(config_path))
        if not read:
            raise ConfigError(f"config file not found: {config_path}")
        for section in parser.sections():
            if section not in schema:
                raise ConfigError(
                    f"unknown config section [{section}] for command '{command}'")
            raw[section] = dict(parser[section])
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value: {item!r}")
        dotted, value = item.split("=", 1)
        section, key = dotted.split(".", 1)
        raw.setdefault(section, {})[key] = value

    values: dict[str, dict] = {}
    for section, keys in schema.items():
        values[section] = {}
        given = raw.pop(section, {})
        for key, (type_name, default) in keys.items():
            if key in given:
                rendered = given.pop(key)
                try:
                    values[section][key] = _PARSERS[type_name](rendered)
                except (ValueError, TypeError) as exc:
                    raise ConfigError(
                        f"bad value for {section}.{key}: {rendered!r} ({exc})")
            elif default is None:
                raise ConfigError(f"missing required config key: {section}.{key}")
            else:
                values[section][key] = default
        if given:
            bad = sorted(given)[0]
            raise ConfigError(f"unknown config key: {section}.{bad}")
    if raw:
        raise ConfigError(f"unknown config section [{sorted(raw)[0]}] "
                          f"for command '{command}'")
    if seed is not None:
        values["run"]["seed"] = int(seed)
    if out is not None:
        values["run"]["out"] = str(out)
    return RunConfig(command, values)
