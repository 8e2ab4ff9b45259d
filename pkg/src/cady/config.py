"""TOML experiment configuration with strict schema validation.

Unknown keys are rejected up front so typos fail loudly instead of silently
falling back to defaults. Sections mirror the module configs; every field is
optional and falls back to the module default.
"""

from __future__ import annotations

import sys

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import envs, training
from .causal import AttributionConfig, DEFAULT_RHO_MIN
from .planners import CemConfig, MppiConfig


class ConfigError(ValueError):
    pass


_NUMBER = (int, float)

SCHEMA = {
    "environment": str,           # cartpole | diffdrive
    "mode": str,                  # mbrl | sysid
    "seeds": list,
    "out_dir": str,
    "model": {
        "decoder_hidden_size": int,
        "decoder_hidden_layers": int,
        "activation": str,
    },
    "training": {
        "batch_size": int,
        "max_epochs": int,
        "loss_delta_stop": _NUMBER,
        "learning_rate": _NUMBER,
    },
    "attribution": {
        "riemann_steps": int,
        "num_inputs": int,
    },
    "distribution": {
        "rho_min": _NUMBER,
    },
    "cem": {
        "horizon": int,
        "population": int,
        "elite_ratio": _NUMBER,
        "alpha": _NUMBER,
        "iterations": int,
        "replan_frequency": int,
    },
    "mppi": {
        "horizon": int,
        "num_samples": int,
        "gamma": _NUMBER,
        "sigma": _NUMBER,
        "beta": _NUMBER,
    },
    "mbrl": {
        "trials": int,
        "max_steps": int,
    },
    "sysid": {
        "transitions": int,
        "rollout_len": int,
    },
    "mission": {
        "waypoints": list,
        "arrival_radius": _NUMBER,
        "time_limit": _NUMBER,
    },
    "freeze": {
        "onset": _NUMBER,
        "runs": int,
    },
    "noise": {
        "sigma2": _NUMBER,
        "trials": int,
        "sweep": list,
    },
    "ablation": {
        "repetitions": int,
        "threshold": _NUMBER,
    },
    "intervention": {
        "onset_step": int,
        "total_steps": int,
        "gain_schedules": dict,
        "runs": int,
        "finetune_epochs": int,
    },
    "checkpoints": {
        "cady": str,
        "baseline": str,
    },
    "dataset": str,
}


def _validate(data, schema, prefix=""):
    for key, val in data.items():
        if key not in schema:
            raise ConfigError(f"unknown config key: {prefix}{key}")
        expected = schema[key]
        if isinstance(expected, dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{prefix}{key} must be a table")
            _validate(val, expected, prefix=f"{prefix}{key}.")
        elif not isinstance(val, expected):
            raise ConfigError(
                f"{prefix}{key} has wrong type {type(val).__name__}")


def load_config(path):
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"invalid TOML in {path}: {e}")
    _validate(data, SCHEMA)
    return data


# -- section builders ---------------------------------------------------------

def train_config(cfg):
    return training.TrainConfig(**cfg.get("training", {}))


def attribution_config(cfg):
    return AttributionConfig(**cfg.get("attribution", {}))


def rho_min(cfg):
    return cfg.get("distribution", {}).get("rho_min", DEFAULT_RHO_MIN)


def cem_config(cfg):
    return CemConfig(**cfg.get("cem", {}))


def mppi_config(cfg):
    return MppiConfig(**cfg.get("mppi", {}))


def mission(cfg):
    section = dict(cfg.get("mission", {}))
    if "waypoints" not in section:
        raise ConfigError("mission.waypoints is required for mission runs")
    section["waypoints"] = [tuple(w) for w in section["waypoints"]]
    return envs.Mission(**section)


def model_spec(cfg):
    from .model import ModelSpec

    env_name = cfg.get("environment", "cartpole")
    dims = {"cartpole": (4, 1), "diffdrive": (3, 2)}
    if env_name not in dims:
        raise ConfigError(f"unknown environment: {env_name}")
    n, p = dims[env_name]
    section = cfg.get("model", {})
    defaults = {"cartpole": 3, "diffdrive": 20}
    return ModelSpec(
        n=n, p=p,
        decoder_hidden_size=section.get("decoder_hidden_size",
                                        defaults[env_name]),
        decoder_hidden_layers=section.get("decoder_hidden_layers", 3),
        activation=section.get("activation", "tanh"))
