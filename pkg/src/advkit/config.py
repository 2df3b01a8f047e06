"""INI-style experiment configuration.

Sections: ``[run]`` (samples, seed), ``[train]`` (epochs, lr, batch_size),
``[attack]`` (defaults for every attack), one optional section per attack
name (``[finefool]``, ``[deepfool]``, ...) and ``[defense]``.  Keys use the
command-line spellings (``eps``, ``alpha``, ``iters``, ``mu``, ``kappa``,
``sigma``, ``kernel``...).
"""
from __future__ import annotations

import configparser
import io

from .errors import InvalidArgumentError

# key spelling -> (AttackConfig field, parser)
ATTACK_KEYS = {
    "eps": ("epsilon", float),
    "epsilon": ("epsilon", float),
    "alpha": ("alpha", float),
    "iters": ("iters", int),
    "mu": ("mu", float),
    "kappa": ("kappa", float),
    "c2": ("c2", float),
    "target": ("target", int),
    "seed": ("seed", int),
    "early_stop": ("early_stop", lambda s: s.lower() in ("1", "true", "yes", "on")),
    "step_norm": ("step_norm", str),
    "overshoot": ("overshoot", float),
    "deepfool_classes": ("deepfool_classes", int),
    "cw_steps": ("cw_steps", int),
    "cw_lr": ("cw_lr", float),
}

DEFENSE_KEYS = {
    "kind": ("kind", str),
    "sigma": ("sigma", float),
    "kernel": ("kernel_size", int),
    "kernel_size": ("kernel_size", int),
    "scale": ("transform_scale", int),
    "transform_scale": ("transform_scale", int),
    "levels": ("quantization_levels", int),
    "quantization_levels": ("quantization_levels", int),
}


def _convert(section, table):
    out = {}
    for key, raw in section.items():
        if key not in table:
            raise InvalidArgumentError(f"unknown key {key!r} in [{section.name}]")
        field, parse = table[key]
        raw = raw.strip()
        if raw in ("", "none", "None"):
            out[field] = None
            continue
        try:
            out[field] = parse(raw)
        except ValueError:
            raise InvalidArgumentError(f"bad value {raw!r} for {key} in [{section.name}]") from None
    return out


class ExperimentConfig:
    def __init__(self, parser: configparser.ConfigParser | None = None):
        self.parser = parser or configparser.ConfigParser()

    @classmethod
    def read(cls, path):
        p = configparser.ConfigParser()
        with open(path) as fh:
            p.read_file(fh)
        return cls(p)

    def section(self, name):
        return self.parser[name] if self.parser.has_section(name) else {}

    def attack_base(self):
        return _convert(self.section("attack"), ATTACK_KEYS) if self.parser.has_section("attack") else {}

    def per_attack(self, names):
        return {
            n: _convert(self.parser[n], ATTACK_KEYS) for n in names if self.parser.has_section(n)
        }

    def defense(self):
        return _convert(self.parser["defense"], DEFENSE_KEYS) if self.parser.has_section("defense") else {}

    def get(self, section, key, default, type_=str):
        if self.parser.has_option(section, key):
            return type_(self.parser.get(section, key))
        return default


def echo(sections: dict) -> str:
    """Render the effective settings as INI text (deterministic order)."""
    p = configparser.ConfigParser()
    for name in sorted(sections):
        p[name] = {k: "" if v is None else str(v) for k, v in sorted(sections[name].items())}
    buf = io.StringIO()
    p.write(buf)
    return buf.getvalue()
