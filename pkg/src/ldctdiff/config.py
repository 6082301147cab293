"""Run configuration: YAML file with five sections plus ``section.key=value`` overrides."""

from __future__ import annotations

import copy
from pathlib import Path

import yaml

from .geometry import FanBeamGeometry, preset
from .nn import ArchSpec, TrainConfig
from .physics import (
    AlphaBarSchedule,
    LambdaSchedule,
    NoiseModelParams,
    make_alpha_bar_schedule,
    make_lambda_schedule,
)

__all__ = ["ConfigError", "SCHEMA", "defaults", "load_config", "apply_overrides", "dump_config",
           "describe", "geometry_from", "noise_params_from", "lambda_schedule_from", "alpha_schedule_from",
           "arch_from", "train_config_from"]


class ConfigError(ValueError):
    pass


_NET = {
    "width": (16, "base channel count of the regressor"),
    "levels": (2, "number of downsampling levels"),
    "emb_dim": (32, "timestep embedding size"),
    "learning_rate": (1e-3, "Adam step size"),
    "batch_size": (8, "patches per iteration"),
    "iterations": (2000, "training iterations"),
    "crop": (64, "training patch edge in pixels (0 = whole grid)"),
    "seed": (1, "weight-initialisation and sampling seed"),
    "lr_schedule": ("cosine", "learning-rate schedule (constant, cosine)"),
}

# section -> key -> (default, help)
SCHEMA: dict[str, dict[str, tuple]] = {
    "geometry": {
        "preset": ("desk128", "named scanner geometry (desk128, mayo2016_sim)"),
        "n_views": (None, "override: projection angles over 360 degrees"),
        "n_bins": (None, "override: detector bins"),
        "bin_spacing": (None, "override: detector bin pitch in mm"),
        "sid": (None, "override: source-to-isocentre distance in mm"),
        "did": (None, "override: detector-to-isocentre distance in mm"),
        "width": (None, "override: image width in pixels"),
        "height": (None, "override: image height in pixels"),
        "pixel_size": (None, "override: pixel size in mm"),
        "fbp_window": ("ram-lak", "ramp filter apodisation (ram-lak, cosine)"),
    },
    "physics": {
        "i0": (2.5e5, "normal-dose incident photons per bin"),
        "sigma_e2": (10.0, "electronic noise variance"),
        "mu_water": (0.0192, "water attenuation in 1/mm for HU conversion"),
        "tau": (10, "number of projection-domain diffusion steps"),
        "lambda_hi": (3e5, "photon level at the clean end of the schedule"),
        "lambda_lo": (2.5e4, "photon level at step tau"),
        "lambda_endpoint_at": (0, "step that carries lambda_hi (0 or 1)"),
        "t_max": (1000, "image-domain diffusion steps"),
        "beta_lo": (1e-4, "first beta of the linear schedule"),
        "beta_hi": (0.02, "last beta of the linear schedule"),
    },
    "spdiff": dict(_NET),
    "dgdiff": {
        **_NET,
        "seed": (2, "weight-initialisation and sampling seed"),
        "iterations": (12000, "training iterations"),
        "t_focus": (50, "half of each batch draws t from 1..t_focus (0 disables)"),
        "s2": (0.8, "weight of the network estimate in the denoised guidance"),
    },
    "pipeline": {
        "seed": (0, "corpus and noise seed"),
        "n_phantoms": (72, "phantoms generated (train + test)"),
        "n_test": (8, "held-out phantoms, taken from the end of the corpus"),
        "doses": ([0.5, 0.25, 0.125, 0.1], "dose fractions of i0 for sweeps"),
        "methods": (["fbp", "spdiff", "need"], "reconstruction methods for sweeps"),
        "log_floor": (1e-6, "transmission clamp before the log"),
        "hu_lo": (-1000.0, "display window lower bound (HU)"),
        "hu_hi": (1000.0, "display window upper bound (HU)"),
        "record_timing": (False, "write wall-clock seconds into CSVs (breaks byte-identity)"),
        "workers": (1, "worker processes for sweeps"),
    },
}


def defaults() -> dict:
    return {sec: {k: copy.deepcopy(v[0]) for k, v in keys.items()} for sec, keys in SCHEMA.items()}


def _check_value(sec: str, key: str, value):
    default = SCHEMA[sec][key][0]
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{sec}.{key} must be true or false")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{sec}.{key} must be a number")
        return float(value)
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{sec}.{key} must be an integer")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{sec}.{key} must be a list")
        return value
    if not isinstance(value, type(default)):
        raise ConfigError(f"{sec}.{key} must be a {type(default).__name__}")
    return value


def _merge(cfg: dict, data: dict, origin: str) -> dict:
    if not isinstance(data, dict):
        raise ConfigError(f"{origin}: top level must be a mapping")
    for sec, body in data.items():
        if sec not in SCHEMA:
            raise ConfigError(f"{origin}: unknown section {sec!r}")
        if body is None:
            continue
        if not isinstance(body, dict):
            raise ConfigError(f"{origin}: section {sec!r} must be a mapping")
        for key, value in body.items():
            if key not in SCHEMA[sec]:
                raise ConfigError(f"{origin}: unknown key {sec}.{key}")
            cfg[sec][key] = _check_value(sec, key, value)
    return cfg


def apply_overrides(cfg: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars or lists."""
    cfg = copy.deepcopy(cfg)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        dotted, raw = item.split("=", 1)
        parts = dotted.strip().split(".")
        if len(parts) != 2:
            raise ConfigError(f"override key {dotted!r} must be section.key")
        sec, key = parts
        if sec not in SCHEMA or key not in SCHEMA[sec]:
            raise ConfigError(f"unknown key {dotted}")
        cfg[sec][key] = _check_value(sec, key, yaml.safe_load(raw))
    return cfg


def load_config(path=None, overrides=()) -> dict:
    cfg = defaults()
    if path is not None:
        text = Path(path).read_text()
        data = yaml.safe_load(text) or {}
        cfg = _merge(cfg, data, str(path))
    return apply_overrides(cfg, overrides)


def dump_config(cfg: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg, sort_keys=True, default_flow_style=False))
    return path


def describe(sections) -> str:
    """Help text listing every key of the given sections with its default."""
    lines = ["config keys (override with --set section.key=value):"]
    for sec in sections:
        for key, (default, doc) in SCHEMA[sec].items():
            lines.append(f"  {sec}.{key} = {default!r}: {doc}")
    return "\n".join(lines)


def geometry_from(cfg: dict) -> FanBeamGeometry:
    g = cfg["geometry"]
    over = {k: v for k, v in g.items() if k not in ("preset", "fbp_window") and v is not None}
    return preset(g["preset"], **over)


def noise_params_from(cfg: dict) -> NoiseModelParams:
    p = cfg["physics"]
    return NoiseModelParams(i0=p["i0"], sigma_e2=p["sigma_e2"])


def lambda_schedule_from(cfg: dict) -> LambdaSchedule:
    p = cfg["physics"]
    return make_lambda_schedule(p["tau"], p["lambda_hi"], p["lambda_lo"], endpoint_at=p["lambda_endpoint_at"])


def alpha_schedule_from(cfg: dict) -> AlphaBarSchedule:
    p = cfg["physics"]
    return make_alpha_bar_schedule(p["t_max"], p["beta_lo"], p["beta_hi"])


def arch_from(cfg: dict, section: str) -> ArchSpec:
    s = cfg[section]
    return ArchSpec(in_channels=2, width=s["width"], levels=s["levels"], emb_dim=s["emb_dim"])


def train_config_from(cfg: dict, section: str) -> TrainConfig:
    s = cfg[section]
    return TrainConfig(learning_rate=s["learning_rate"], batch_size=s["batch_size"], iterations=s["iterations"],
                       seed=s["seed"], loss="restoration" if section == "spdiff" else "epsilon", crop=s["crop"],
                       lr_schedule=s["lr_schedule"])
