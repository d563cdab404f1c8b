"""Run configuration: flat key=value files with section prefixes.

A config file looks like::

    model.n_layers=2
    model.embed_dim=64
    train.total_steps=600
    gen.strategy=greedy
    data.vocab_size=384

Sections are ``model``, ``train``, ``gen``, ``data``.  Values are coerced to
the type of the corresponding dataclass default; command-line flags override
file entries.  The merged view is embedded verbatim in every artifact a run
produces, so any run is re-executable from any of its outputs.
"""

from __future__ import annotations

from dataclasses import asdict

from .model import GenerationConfig, ModelConfig
from .trainer import TrainConfig

DATA_DEFAULTS = {"vocab_size": 384, "n_samples": 2500, "seed": 0, "img_size": 24}

_SECTIONS = ("model", "train", "gen", "data")


def _coerce(value: str, template):
    if isinstance(template, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"cannot parse {value!r} as bool")
    if isinstance(template, int):
        return int(value)
    if isinstance(template, float):
        return float(value)
    if isinstance(template, (tuple, list)):
        return type(template)(float(v) for v in value.split(","))
    return value


def parse_config_file(path) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {s: {} for s in _SECTIONS}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            key = key.strip()
            if "." not in key:
                raise ValueError(f"{path}:{lineno}: key {key!r} lacks a section prefix")
            section, name = key.split(".", 1)
            if section not in _SECTIONS:
                raise ValueError(f"{path}:{lineno}: unknown section {section!r}")
            out[section][name] = value.strip()
    return out


def build_run_config(config_path=None, overrides: dict | None = None) -> dict:
    """Defaults, then file entries, then explicit overrides.

    ``overrides`` maps "section.key" to an already-typed value (CLI flags).
    Returns {"model": {...}, "train": {...}, "gen": {...}, "data": {...}}.
    """
    from .model import CondMode  # local import to avoid cycle at module load

    base = {
        "model": ModelConfig().to_dict(),
        "train": asdict(TrainConfig()),
        "gen": asdict(GenerationConfig()),
        "data": dict(DATA_DEFAULTS),
    }
    if config_path:
        for section, entries in parse_config_file(config_path).items():
            for name, value in entries.items():
                if name not in base[section]:
                    raise ValueError(f"unknown config key {section}.{name}")
                base[section][name] = _coerce(value, base[section][name])
    for dotted, value in (overrides or {}).items():
        section, name = dotted.split(".", 1)
        if name not in base[section]:
            raise ValueError(f"unknown config key {dotted}")
        base[section][name] = value
    if isinstance(base["model"]["cond_mode"], CondMode):
        base["model"]["cond_mode"] = base["model"]["cond_mode"].value
    return base


def model_config_from(run_config: dict) -> ModelConfig:
    return ModelConfig(**run_config["model"])


def train_config_from(run_config: dict) -> TrainConfig:
    d = dict(run_config["train"])
    d["betas"] = tuple(d["betas"])
    return TrainConfig(**d)


def generation_config_from(run_config: dict) -> GenerationConfig:
    return GenerationConfig(**run_config["gen"])
