"""YAML run configuration -> typed config objects.

Parsing is strict: unknown keys anywhere raise ConfigError with the
dotted path, so typos fail fast instead of silently using defaults.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import yaml

from .errors import ConfigError
from .training import StageSpec, validate_schedule

_REQUIRED = object()


def _as_bool(v):
    if isinstance(v, bool):
        return v
    raise ConfigError(f"expected true/false, got {v!r}")


def _as_int_list(v):
    if not isinstance(v, (list, tuple)):
        raise ConfigError(f"expected a list, got {v!r}")
    return [int(x) for x in v]


def _parse_section(raw, fields, path):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must be a mapping")
    raw = dict(raw)
    out = {}
    for name, (conv, default) in fields.items():
        if name in raw:
            try:
                out[name] = conv(raw.pop(name))
            except ConfigError:
                raise
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{path}.{name}: {exc}") from None
        elif default is _REQUIRED:
            raise ConfigError(f"{path}.{name} is required")
        else:
            out[name] = default
    if raw:
        unknown = ", ".join(f"{path}.{k}" for k in sorted(raw))
        raise ConfigError(f"unknown config key(s): {unknown}")
    return out


@dataclass
class DataConfig:
    kind: str = "sequence"
    path: str | None = None
    classes: int = 4
    channels: int = 8
    length: int = 64
    side: int = 16
    train: int = 1200
    val: int = 400
    test: int = 1000
    shift_max: int = 4
    amp_jitter: float = 0.25
    noise_std: float = 0.4
    seed: int = 0


@dataclass
class ModelConfig:
    arch: str = "kws"
    in_channels: int = 39
    embed_units: int = 100
    filters: int = 45
    kernel: int = 3
    dilations: list = field(default_factory=lambda: [1, 2, 4, 8, 16, 32, 64])
    classes: int = 12
    input_bits: int = 4
    depth: int = 2
    widths: list = field(default_factory=lambda: [8, 16])


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.01
    lr_decay: float = 0.98
    optimizer: str = "adam"
    momentum: float = 0.9
    weight_decay: float = 0.0
    distill_temperature: float = 4.0
    distill_alpha: float = 0.9
    calib_count: int = 64


@dataclass
class FinetuneConfig:
    epochs: int = 10
    lr: float = 0.002


@dataclass
class NoiseConfig:
    sigma_w: float = 0.0
    sigma_a: float = 0.0
    sigma_mac: float = 0.0
    repetitions: int = 10
    freeze_weights: bool = False
    ladder: list = field(default_factory=list)  # list of [w, a, mac] triples


@dataclass
class RunConfig:
    seed: int
    data: DataConfig
    model: ModelConfig
    train: TrainConfig
    finetune: FinetuneConfig
    noise: NoiseConfig
    stages: list          # list[StageSpec]
    raw: dict


def _parse_stage(raw, path):
    fields = {
        "name": (str, _REQUIRED),
        "weight_bits": (int, _REQUIRED),
        "act_bits": (int, _REQUIRED),
        "epochs": (int, _REQUIRED),
        "lr": (float, _REQUIRED),
        "init": (str, "fp"),
        "teacher": (lambda v: None if v is None else str(v), "fp"),
    }
    return StageSpec(**_parse_section(raw, fields, path))


def parse_config(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    top = dict(raw)
    seed = int(top.pop("seed", 0))

    data = DataConfig(**_parse_section(top.pop("data", None), {
        "kind": (str, "sequence"), "path": (lambda v: v, None),
        "classes": (int, 4), "channels": (int, 8), "length": (int, 64),
        "side": (int, 16), "train": (int, 1200), "val": (int, 400),
        "test": (int, 1000), "shift_max": (int, 4),
        "amp_jitter": (float, 0.25), "noise_std": (float, 0.4),
        "seed": (int, 0),
    }, "data"))
    if data.kind not in ("sequence", "image"):
        raise ConfigError(f"data.kind must be sequence or image, got {data.kind!r}")

    model = ModelConfig(**_parse_section(top.pop("model", None), {
        "arch": (str, "kws"), "in_channels": (int, 39),
        "embed_units": (int, 100), "filters": (int, 45), "kernel": (int, 3),
        "dilations": (_as_int_list, [1, 2, 4, 8, 16, 32, 64]),
        "classes": (int, 12), "input_bits": (int, 4),
        "depth": (int, 2), "widths": (_as_int_list, [8, 16]),
    }, "model"))
    if model.arch not in ("kws", "resblock"):
        raise ConfigError(f"model.arch must be kws or resblock, got {model.arch!r}")

    train = TrainConfig(**_parse_section(top.pop("train", None), {
        "epochs": (int, 30), "batch_size": (int, 64), "lr": (float, 0.01),
        "lr_decay": (float, 0.98), "optimizer": (str, "adam"),
        "momentum": (float, 0.9), "weight_decay": (float, 0.0),
        "distill_temperature": (float, 4.0), "distill_alpha": (float, 0.9),
        "calib_count": (int, 64),
    }, "train"))
    if train.optimizer not in ("adam", "nesterov"):
        raise ConfigError(
            f"train.optimizer must be adam or nesterov, got {train.optimizer!r}")

    finetune = FinetuneConfig(**_parse_section(top.pop("finetune", None), {
        "epochs": (int, 10), "lr": (float, 0.002),
    }, "finetune"))

    noise = NoiseConfig(**_parse_section(top.pop("noise", None), {
        "sigma_w": (float, 0.0), "sigma_a": (float, 0.0),
        "sigma_mac": (float, 0.0), "repetitions": (int, 10),
        "freeze_weights": (_as_bool, False),
        "ladder": (lambda v: [[float(x) for x in row] for row in v], []),
    }, "noise"))
    for row in noise.ladder:
        if len(row) != 3:
            raise ConfigError("noise.ladder rows must be [w, a, mac] triples")

    raw_stages = top.pop("stages", None)
    stages = []
    if raw_stages is not None:
        if not isinstance(raw_stages, list):
            raise ConfigError("stages must be a list")
        stages = [_parse_stage(s, f"stages[{i}]")
                  for i, s in enumerate(raw_stages)]
        validate_schedule(stages)

    if top:
        unknown = ", ".join(sorted(top))
        raise ConfigError(f"unknown config key(s): {unknown}")
    return RunConfig(seed, data, model, train, finetune, noise, stages, raw)


def load_config(path: str) -> RunConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file {path!r} does not exist")
    with open(path) as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML ({exc})") from None
    if raw is None:
        raw = {}
    return parse_config(raw)


def config_hash(cfg: RunConfig) -> str:
    """Stable digest of the raw config document (used as provenance)."""
    canon = json.dumps(cfg.raw, sort_keys=True, separators=(",", ":"),
                       default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]
