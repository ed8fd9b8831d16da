"""Flat key=value run configuration.

A config file holds ``key = value`` lines (# comments allowed); every key
can also be overridden on the command line as ``--key value``.  Defaults
encode the published operating point: 1000 training timesteps on a linear
schedule, 150 sampling steps, gamma 0.5, alpha 0.1, feedback-loss weight
1e-4.
"""
from __future__ import annotations

from .data import DatasetSpec
from .gate import GateConfig
from .network import NetConfig
from .train import TrainConfig

DEFAULTS: dict[str, object] = {
    # diffusion schedule
    "timesteps": 1000,
    "beta_start": 1e-4,
    "beta_end": 0.02,
    "sample_steps": 150,
    # divergence gate
    "gamma": 0.5,
    "alpha": 0.1,
    "dfl_weight": 1e-4,
    "paper_literal_dfl": False,
    # network
    "image_size": 32,
    "base_channels": 32,
    "channel_mults": "1,2,2",
    "blocks_per_level": 1,
    "time_embed_dim": 128,
    "groupnorm_groups": 8,
    "reduction_ratio": 4,
    "attention_dim": 64,
    # training
    "steps": 2000,
    "batch": 8,
    "lr": 1e-4,
    "beta1": 0.9,
    "beta2": 0.999,
    "grad_clip": 1.0,
    "seed": 0,
    "log_interval": 50,
    "ckpt_interval": 0,
    # data
    "count": 512,
    "corrupt_fraction": 0.5,
    "train_fraction": 0.875,
    "val_fraction": 0.125,
    # evaluation
    "eval_batch": 16,
    "max_samples": 0,  # 0 = the whole split
}

_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def _parse_value(key: str, raw, default):
    if isinstance(raw, type(default)) and not isinstance(raw, str):
        return raw
    s = str(raw).strip()
    if isinstance(default, bool):
        low = s.lower()
        if low in _BOOL_TRUE:
            return True
        if low in _BOOL_FALSE:
            return False
        raise ValueError(f"config key {key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(s)
    if isinstance(default, float):
        return float(s)
    return s


def read_config_file(path) -> dict[str, str]:
    kv = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line.rstrip()!r}")
            key, _, value = stripped.partition("=")
            kv[key.strip()] = value.strip()
    return kv


def resolve(file_kv: dict | None = None, overrides: dict | None = None) -> dict:
    """Defaults <- config file <- command-line overrides, type-checked."""
    cfg = dict(DEFAULTS)
    for source in (file_kv or {}), (overrides or {}):
        for key, raw in source.items():
            if key not in DEFAULTS:
                raise ValueError(f"unknown config key {key!r}")
            if raw is None:
                continue
            cfg[key] = _parse_value(key, raw, DEFAULTS[key])
    return cfg


def config_text(cfg: dict) -> str:
    lines = [f"{k} = {cfg[k]}" for k in DEFAULTS]
    return "\n".join(lines) + "\n"


def net_config(cfg: dict) -> NetConfig:
    return NetConfig(
        image_size=cfg["image_size"],
        base_channels=cfg["base_channels"],
        channel_mults=tuple(int(m) for m in str(cfg["channel_mults"]).split(",")),
        blocks_per_level=cfg["blocks_per_level"],
        time_embed_dim=cfg["time_embed_dim"],
        groupnorm_groups=cfg["groupnorm_groups"],
        reduction_ratio=cfg["reduction_ratio"],
        attention_dim=cfg["attention_dim"],
    ).validate()


def gate_config(cfg: dict) -> GateConfig:
    return GateConfig(gamma=cfg["gamma"], alpha=cfg["alpha"],
                      dfl_weight=cfg["dfl_weight"], literal_dfl=cfg["paper_literal_dfl"])


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        steps=cfg["steps"], batch=cfg["batch"], lr=cfg["lr"],
        beta1=cfg["beta1"], beta2=cfg["beta2"], grad_clip=cfg["grad_clip"],
        seed=cfg["seed"], timesteps=cfg["timesteps"],
        beta_start=cfg["beta_start"], beta_end=cfg["beta_end"],
        sample_steps=cfg["sample_steps"], log_interval=cfg["log_interval"],
        ckpt_interval=cfg["ckpt_interval"], gate=gate_config(cfg), net=net_config(cfg),
    )


def dataset_spec(cfg: dict) -> DatasetSpec:
    return DatasetSpec(
        count=cfg["count"], image_size=cfg["image_size"],
        corrupt_fraction=cfg["corrupt_fraction"], seed=cfg["seed"],
        train_fraction=cfg["train_fraction"], val_fraction=cfg["val_fraction"],
    )
