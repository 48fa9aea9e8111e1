"""Declarative experiment configuration.

Configs are TOML files with sections data / augment / pretrain / eval /
split / output. Two profiles provide the defaults: "paper" (batch 512,
300 epochs, residual-18-style encoder) and "desk" (batch 64, 60 epochs
with the ramp rescaled proportionally, small encoder). Unknown keys are
rejected and every run persists the fully resolved config next to its
outputs.
"""

from __future__ import annotations

import copy
import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .augment import AugmentConfig
from .clustering import ScheduleConfig
from .data import Perturbation, SplitSpec, SynthConfig
from .discrimination import BIDConfig
from .errors import ConfigurationError
from .trainer import PretrainConfig

DEFAULTS: dict = {
    "data": {
        "source": "synth",          # or "folder"
        "path": "",                 # class-per-subdirectory root for "folder"
        "test_path": "",            # optional dedicated test folder
        "size": 0,                  # 0: keep the loader's automatic common size
        "synth": {
            "num_classes": 10,
            "samples_per_class": 50,
            "image_size": 64,
            "speckle_level": 0.5,
            "pose_angle_range": 45.0,
            "seed": 10,
            "test_samples_per_class": 0,   # 0: evaluate on the split remainder
        },
    },
    "augment": {
        "crop_scale": [0.85, 1.0],
        "out_size": 64,
        "max_degrees": 30.0,
        "brightness": 0.4,
        "contrast": 0.4,
        "saturation": 0.0,
        "flip_prob": 0.5,
        "noise_density": 0.1,
        "blur_radius": [0.1, 2.0],
        "enabled": ["CR", "RR", "CJ", "RHF", "GN"],
    },
    "pretrain": {
        "k": 5,
        "temperature": 2.0,
        "batch_size": 512,
        "epochs": 300,
        "t1": 30,
        "t2": 150,
        "alpha_f": 1.0,
        "momentum": 0.999,
        "seed": 10,
        "encoder": "resnet18",
        "embedding_dim": 512,
        "ce_step_mode": "per_pass",
        "dwv_dim_reduce": "mean",
        "stop_mean_gradient": False,
        "ema_mode": "shadow",
    },
    "eval": {
        "protocol": "linear",       # or "fine_tuned"
        "classifier": "logistic_regression",
        "lr": 0.03,
        "epochs": 200,
        "batch_size": 256,
        "prefer_ema": True,
        "select": "best",           # fine-tune epoch selection; "stable" for noisy labels
        "write_projection": True,
    },
    "split": {
        "kind": "proportional",
        "ratio_denominator": 32,
        "shots": 1,
        "label_noise_ratio": 0.0,
        "seed": 10,
        "perturbation": {"kind": "", "strength": 0.0},
    },
    "output": {"dir": "runs"},
}

# desk profile keeps t1/epochs and t2/epochs ratios of the full-scale recipe
PROFILES: dict[str, dict] = {
    "paper": {},
    "desk": {
        "pretrain": {"batch_size": 64, "epochs": 60, "t1": 6, "t2": 30,
                     "encoder": "small", "embedding_dim": 128},
        "eval": {"epochs": 30, "batch_size": 32},
    },
}


def _merge(base: dict, override: dict, path: str = "") -> None:
    """Recursive in-place merge; keys absent from ``base`` are rejected."""
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigurationError(f"unknown config key: {where}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigurationError(f"{where} must be a table")
            _merge(base[key], value, where)
        else:
            base[key] = value


def parse_override(text: str):
    """Parse a --set key=value override; the value uses TOML syntax."""
    if "=" not in text:
        raise ConfigurationError(f"override must look like section.key=value, got {text!r}")
    key, _, raw = text.partition("=")
    key = key.strip()
    raw = raw.strip()
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw  # bare string
    return key, value


def _apply_dotted(cfg: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = cfg
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigurationError(f"unknown config key: {dotted}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigurationError(f"unknown config key: {dotted}")
    node[parts[-1]] = value


def load_config(path=None, profile: str | None = None, overrides: list[str] | None = None,
                seed: int | None = None, out: str | None = None) -> dict:
    """Resolve defaults + profile + file + --set/--seed/--out into one dict."""
    file_cfg: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigurationError(f"config file not found: {p}")
        try:
            with open(p, "rb") as fh:
                file_cfg = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigurationError(f"invalid TOML in {p}: {exc}") from exc

    profile = profile or file_cfg.pop("profile", None) or "paper"
    if profile not in PROFILES:
        raise ConfigurationError(f"unknown profile {profile!r} (choices: {sorted(PROFILES)})")

    cfg = copy.deepcopy(DEFAULTS)
    _merge(cfg, copy.deepcopy(PROFILES[profile]))
    _merge(cfg, file_cfg)
    for text in overrides or []:
        key, value = parse_override(text)
        _apply_dotted(cfg, key, value)
    if seed is not None:
        cfg["pretrain"]["seed"] = seed
        cfg["split"]["seed"] = seed
        cfg["data"]["synth"]["seed"] = seed
    if out is not None:
        cfg["output"]["dir"] = out
    cfg["profile"] = profile
    validate_config(cfg)
    return cfg


# ---------------------------------------------------------------------------
# typed views

def augment_config(cfg: dict) -> AugmentConfig:
    a = cfg["augment"]
    return AugmentConfig(
        crop_scale=tuple(a["crop_scale"]), out_size=a["out_size"], max_degrees=a["max_degrees"],
        brightness=a["brightness"], contrast=a["contrast"], saturation=a["saturation"],
        flip_prob=a["flip_prob"], noise_density=a["noise_density"],
        blur_radius=tuple(a["blur_radius"]), enabled=frozenset(a["enabled"]))


def pretrain_config(cfg: dict) -> PretrainConfig:
    p = cfg["pretrain"]
    return PretrainConfig(
        bid=BIDConfig(k=p["k"], temperature=p["temperature"], batch_size=p["batch_size"]),
        schedule=ScheduleConfig(t1=p["t1"], t2=p["t2"], alpha_f=p["alpha_f"]),
        augment=augment_config(cfg),
        epochs=p["epochs"], momentum=p["momentum"], seed=p["seed"],
        encoder=p["encoder"], embedding_dim=p["embedding_dim"],
        ce_step_mode=p["ce_step_mode"], dwv_dim_reduce=p["dwv_dim_reduce"],
        stop_mean_gradient=p["stop_mean_gradient"], ema_mode=p["ema_mode"])


def split_spec(cfg: dict) -> SplitSpec:
    s = cfg["split"]
    perturbation = None
    if s["perturbation"]["kind"]:
        perturbation = Perturbation(kind=s["perturbation"]["kind"],
                                    strength=s["perturbation"]["strength"])
    return SplitSpec(kind=s["kind"], ratio_denominator=s["ratio_denominator"],
                     shots=s["shots"], label_noise_ratio=s["label_noise_ratio"],
                     perturbation=perturbation, seed=s["seed"])


def synth_config(cfg: dict) -> SynthConfig:
    s = cfg["data"]["synth"]
    return SynthConfig(num_classes=s["num_classes"], samples_per_class=s["samples_per_class"],
                       image_size=s["image_size"], speckle_level=s["speckle_level"],
                       pose_angle_range=s["pose_angle_range"], seed=s["seed"])


def validate_config(cfg: dict) -> None:
    if cfg["data"]["source"] not in ("synth", "folder"):
        raise ConfigurationError(f"data.source must be 'synth' or 'folder', got {cfg['data']['source']!r}")
    if cfg["data"]["source"] == "folder" and not cfg["data"]["path"]:
        raise ConfigurationError("data.source='folder' requires data.path")
    if cfg["eval"]["protocol"] not in ("linear", "fine_tuned"):
        raise ConfigurationError(f"eval.protocol must be 'linear' or 'fine_tuned', got {cfg['eval']['protocol']!r}")
    augment_config(cfg).validate()
    pretrain_config(cfg).validate()
    split_spec(cfg).validate()
    if cfg["data"]["source"] == "synth":
        synth_config(cfg).validate()


# ---------------------------------------------------------------------------
# resolved-config persistence (restricted TOML emitter)

def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_format_value(v) for v in value) + "]"
    raise ConfigurationError(f"cannot serialize config value of type {type(value).__name__}")


def dump_toml(cfg: dict) -> str:
    """Serialize a resolved config (nested tables of scalars/lists) to TOML."""
    lines: list[str] = []

    def emit(table: dict, prefix: str) -> None:
        scalars = {k: v for k, v in table.items() if not isinstance(v, dict)}
        subtables = {k: v for k, v in table.items() if isinstance(v, dict)}
        if prefix and scalars:
            lines.append(f"[{prefix}]")
        for k, v in scalars.items():
            lines.append(f"{k} = {_format_value(v)}")
        if prefix and scalars:
            lines.append("")
        for k, v in subtables.items():
            emit(v, f"{prefix}.{k}" if prefix else k)

    top_scalars = {k: v for k, v in cfg.items() if not isinstance(v, dict)}
    for k, v in top_scalars.items():
        lines.append(f"{k} = {_format_value(v)}")
    if top_scalars:
        lines.append("")
    for k, v in cfg.items():
        if isinstance(v, dict):
            emit(v, k)
    return "\n".join(lines) + "\n"


def write_resolved_config(path, cfg: dict) -> None:
    Path(path).write_text(dump_toml(cfg), encoding="utf-8")
