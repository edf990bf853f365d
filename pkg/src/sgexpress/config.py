"""Run configuration: nested defaults, a JSON config file and ``--set`` overrides.

Precedence is command line > file > defaults. A resolved config is plain
JSON data, so every artifact can embed exactly the settings it used.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict
from pathlib import Path
from typing import Any, Iterable, Mapping

from .model import ModelConfig
from .perception import EncoderConfig, SceneConfig
from .sge import SGEConfig
from .training import StagePlan, configure_stage
from .vlm import LLMConfig

OUTPUT_ROOT_ENV = "SGEXPRESS_OUT"


class ConfigError(ValueError):
    pass


def _llm_defaults() -> dict:
    d = asdict(LLMConfig())
    d.pop("vocab_size")  # always derived from the category count
    return d


# Desk-scale preset. The stage 2/3 learning rate is raised from the full-scale
# 2e-5 because desk runs are a few thousand steps from random initialization.
DEFAULTS: dict[str, Any] = {
    "scene": SceneConfig().to_dict(),
    "encoder": asdict(EncoderConfig()),
    "sge": {k: v for k, v in asdict(SGEConfig()).items() if k not in ("d_e", "d_t", "use_mp", "use_prompt")},
    "llm": _llm_defaults(),
    "flags": {"sg": True, "mp": True, "prompt": True, "sge_d": True, "sge_t": True},
    "data": {"caption": 2000, "relation": 4000, "count": 2000,
             "test_relation": 500, "test_count": 300, "test_caption": 200},
    "stages": {
        "1": {"steps": 300, "learning_rate": 2e-3, "batch_size": 16},
        "2": {"steps": 1500, "learning_rate": 1e-3, "batch_size": 16},
        "3": {"steps": 6000, "learning_rate": 1e-3, "batch_size": 16},
    },
    "seed": 0,
    "seeds": [0, 1, 2, 3, 4],
}


def defaults() -> dict:
    return copy.deepcopy(DEFAULTS)


def _merge(base: dict, update: Mapping, path: str = "") -> None:
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, Mapping):
                raise ConfigError(f"config key {where!r} expects a mapping")
            _merge(base[key], value, where + ".")
        else:
            base[key] = copy.deepcopy(value)


def parse_override(text: str) -> tuple[list[str], Any]:
    """``"stages.3.steps=100"`` -> (["stages", "3", "steps"], 100). Values parse as JSON, else as strings."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ConfigError(f"override {text!r} has an empty key")
    return parts, value


def apply_overrides(config: dict, overrides: Iterable[str]) -> dict:
    for text in overrides:
        parts, value = parse_override(text)
        node = config
        for i, p in enumerate(parts[:-1]):
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"unknown config key {'.'.join(parts[:i + 1])!r}")
            node = node[p]
        last = parts[-1]
        if last not in node:
            raise ConfigError(f"unknown config key {'.'.join(parts)!r}")
        if isinstance(node[last], dict):
            if not isinstance(value, Mapping):
                raise ConfigError(f"config key {'.'.join(parts)!r} expects a mapping")
            _merge(node[last], value, ".".join(parts) + ".")
        else:
            node[last] = value
    return config


def load_config(path: str | os.PathLike | None = None, overrides: Iterable[str] = ()) -> dict:
    config = defaults()
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(data, Mapping):
            raise ConfigError(f"{path}: top level must be a JSON object")
        _merge(config, data)
    apply_overrides(config, overrides)
    validate(config)
    return config


def validate(config: Mapping) -> None:
    flags = config["flags"]
    if (flags["mp"] or flags["prompt"]) and not flags["sg"]:
        raise ConfigError("flags: mp or prompt requires sg")
    if flags["sge_t"] and not (flags["sg"] and flags["sge_d"]):
        raise ConfigError("flags: a separate graph stage (sge_t) requires sg and sge_d")
    if not config["seeds"]:
        raise ConfigError("seeds must not be empty")
    for name, n in config["data"].items():
        if not isinstance(n, int) or n < 0:
            raise ConfigError(f"data.{name} must be a non-negative integer")
    model_config(config).sge.validate()
    SceneConfig.from_dict(config["scene"]).validate()
    stage_plans(config)


def dumps(config: Mapping) -> str:
    return json.dumps(config, sort_keys=True, indent=2) + "\n"


# ---------------------------------------------------------------------------
# typed views
# ---------------------------------------------------------------------------

def model_config(config: Mapping, seed: int | None = None, flags: Mapping | None = None) -> ModelConfig:
    flags = dict(config["flags"] if flags is None else flags)
    scene = SceneConfig.from_dict(config["scene"])
    encoder = EncoderConfig(**config["encoder"])
    d_llm = config["llm"]["d_llm"]
    sge = SGEConfig(d_e=encoder.d_e, d_t=d_llm, use_mp=flags["mp"], use_prompt=flags["prompt"], **config["sge"])
    llm = LLMConfig(**config["llm"])
    return ModelConfig(scene, encoder, sge, llm, use_graph=flags["sg"],
                       seed=config["seed"] if seed is None else seed)


def stage_plans(config: Mapping, seed: int | None = None, sge_d: bool | None = None) -> dict[int, StagePlan]:
    """Stage plans from the config; without relation data stage 3 drops it too."""
    seed = config["seed"] if seed is None else seed
    sge_d = config["flags"]["sge_d"] if sge_d is None else sge_d
    plans = {}
    for k in (1, 2, 3):
        overrides = dict(config["stages"].get(str(k), {}))
        overrides.setdefault("seed", seed)
        plans[k] = configure_stage(k, overrides)
    if not sge_d:
        from dataclasses import replace

        plans[2] = replace(plans[2], steps=0)
        plans[3] = replace(plans[3], datasets=tuple(d for d in plans[3].datasets if d != "relation"))
    return plans


def output_root(explicit: str | os.PathLike | None = None) -> Path:
    """Explicit path, else $SGEXPRESS_OUT, else ./runs."""
    if explicit is not None:
        return Path(explicit)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
