"""Run configuration: flat ``key = value`` files with ``#`` comments.

Precedence, lowest first: built-in defaults, ``--preset``, ``--config`` file,
``OSLR_<KEY>`` environment variables, explicit command-line flags.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

from .errors import FormatError
from .model import ModelConfig
from .synth import GenConfig
from .train import TrainSettings

ENV_PREFIX = "OSLR_"


def _floats(value) -> tuple[float, ...]:
    if isinstance(value, str):
        return tuple(float(v) for v in value.replace(" ", "").split(",") if v)
    return tuple(float(v) for v in value)


def _bool(value) -> bool:
    if isinstance(value, bool):
        return value
    low = str(value).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


@dataclass
class RunConfig:
    # model (mirrors ModelConfig)
    query_size: int = 16
    target_size: int = 64
    num_stages: int = 4
    stage_channels: str = "8,16,32,64"
    latent_dim: int = 64
    cond_channels: str = "8,16,32,64"
    cond_convs_per_stage: str = "1,1,1,1"
    seg_convs_per_stage: int = 2
    variant: str = "multi_scale"
    fuse_bottleneck: bool = True
    init_mode: str = "fan_in_scaled"
    precision: str = "single"
    # training
    seed: int = 0
    batch_size: int = 8
    iterations: int = 500
    learning_rate: float = 0.02
    lr_schedule: str = "constant"
    momentum: float = 0.9
    weight_decay: float = 0.0005
    checkpoint_every: int = 500
    # data
    regime: str = "one_shot"
    classes: int = 16
    train_classes: int = 12
    per_class: int = 8
    test_per_class: int = 4
    scale_range: str = "0.2,0.6"
    clutter_level: float = 0.5
    jitter: int = 12
    dropout: float = 0.15
    # paths
    train_data: str = ""
    val_data: str = ""
    test_data: str = ""
    out_dir: str = "runs/default"
    checkpoint: str = ""
    # evaluation
    eval_threshold: float = 0.5
    iou_threshold: float = 0.5
    k: int = 1
    global_box: bool = False

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            cast = _bool if f.type in ("bool", bool) else {"int": int, "float": float, "str": str}.get(str(f.type), str)
            try:
                setattr(self, f.name, cast(value))
            except (TypeError, ValueError) as exc:
                raise ValueError(f"bad value for {f.name}: {value!r}") from exc
        if self.regime not in ("traditional", "one_shot"):
            raise ValueError(f"regime must be traditional or one_shot, not {self.regime!r}")
        if self.lr_schedule != "constant":
            raise ValueError("only the constant learning-rate schedule is supported")
        if self.k < 1:
            raise ValueError("k must be >= 1")

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            query_size=self.query_size,
            target_size=self.target_size,
            num_stages=self.num_stages,
            stage_channels=self.stage_channels,
            latent_dim=self.latent_dim,
            cond_channels=self.cond_channels,
            cond_convs_per_stage=self.cond_convs_per_stage,
            seg_convs_per_stage=self.seg_convs_per_stage,
            fusion_mode=self.variant,
            fuse_bottleneck=self.fuse_bottleneck,
            init_mode=self.init_mode,
            precision=self.precision,
        )

    def train_settings(self) -> TrainSettings:
        return TrainSettings(
            seed=self.seed,
            batch_size=self.batch_size,
            iterations=self.iterations,
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            checkpoint_every=self.checkpoint_every,
        )

    def gen_config(self) -> GenConfig:
        lo, hi = _floats(self.scale_range)
        return GenConfig(self.query_size, self.target_size, (lo, hi), self.clutter_level, self.jitter, self.dropout)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    known = set(RunConfig.keys())
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or not key:
            raise FormatError(f"{source}:{lineno}: expected 'key = value'")
        if key not in known:
            raise FormatError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = value.strip()
    return out


def preset_text(name: str) -> str:
    try:
        return resources.files("oslr.presets").joinpath(f"{name}.conf").read_text()
    except FileNotFoundError as exc:
        raise FormatError(f"no preset named {name!r}") from exc


def load_run_config(
    preset: str | None = None,
    path: str | os.PathLike | None = None,
    overrides: dict[str, str] | None = None,
    environ: dict[str, str] | None = None,
) -> RunConfig:
    values: dict[str, str] = {}
    if preset:
        values.update(parse_config_text(preset_text(preset), f"preset:{preset}"))
    if path:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise FormatError(f"cannot read config {p}: {exc}") from exc
        values.update(parse_config_text(text, str(p)))
    env = os.environ if environ is None else environ
    for key in RunConfig.keys():
        env_key = ENV_PREFIX + key.upper()
        if env_key in env:
            values[key] = env[env_key]
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig(**values)
