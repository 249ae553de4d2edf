"""Run configuration: one JSON document with a section per module."""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from typing import Any, Optional

from .errors import ConfigError
from .mae import MAEConfig
from .metrics import PostprocessConfig
from .patching import validate_geometry
from .schedule import DiffusionConfig
from .simplex import SimplexParams
from .training import TrainConfig
from .unet import UNetConfig


@dataclass(frozen=True)
class PlanConfig:
    H: int = 64
    W: int = 64
    p: int = 32
    s: int = 16
    r: int = 16


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 40
    n_val: int = 8
    n_test: int = 8
    seed: int = 0


@dataclass(frozen=True)
class InferenceConfig:
    seed: int = 1234
    per_patch_noise: bool = False
    patch_batch: int = 16


@dataclass(frozen=True)
class RunConfig:
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    simplex: SimplexParams = field(default_factory=SimplexParams)
    plan: PlanConfig = field(default_factory=PlanConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)
    mae: MAEConfig = field(default_factory=MAEConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    postprocess: PostprocessConfig = field(default_factory=PostprocessConfig)
    data: DataConfig = field(default_factory=DataConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)

    def validate(self) -> "RunConfig":
        self.diffusion.validate()
        self.simplex.validate()
        pl = self.plan
        validate_geometry(pl.H, pl.W, pl.p, pl.s, pl.r)
        if pl.r % 4:
            raise ConfigError(f"plan.r={pl.r} must be a multiple of 4 (grid cells on the H/4 feature map)")
        if pl.H % 4 or pl.W % 4:
            raise ConfigError(f"plan image size {pl.H}x{pl.W} must be divisible by 4")
        self.unet.validate()
        if self.unet.use_mae:
            self.mae.validate()
            if self.mae.d1 % 4 or self.mae.d2 % 4:
                raise ConfigError("mae.d1 and mae.d2 must be divisible by 4 (2D sin-cos position embeddings)")
        self.train.validate(self.diffusion.T)
        self.postprocess.validate()
        if min(self.data.n_train, self.data.n_val, self.data.n_test) < 0:
            raise ConfigError("data split counts must be non-negative")
        if self.inference.patch_batch < 1:
            raise ConfigError("inference.patch_batch must be positive")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _coerce(tp, value):
    """Turn JSON values back into the annotated field type (lists -> tuples)."""
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return None if value is None else _coerce(args[0], value)
    if origin is tuple and isinstance(value, (list, tuple)):
        args = typing.get_args(tp)
        inner = args[0] if args else Any
        return tuple(_coerce(inner, v) for v in value)
    if tp is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def _build(cls, data: dict):
    if not isinstance(data, dict):
        raise ConfigError(f"expected an object for {cls.__name__}, got {data!r}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    for k, v in data.items():
        if dataclasses.is_dataclass(hints[k]):
            kwargs[k] = _build(hints[k], v)
        else:
            kwargs[k] = _coerce(hints[k], v)
    return cls(**kwargs)


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data)


def _merge(base: dict, upd: dict) -> dict:
    out = dict(base)
    for k, v in upd.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError(f"override must look like section.key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    data = cfg.to_dict()
    for text in overrides:
        path, value = parse_override(text)
        node = data
        for part in path[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown config section in override {text!r}")
            node = node[part]
        if path[-1] not in node:
            raise ConfigError(f"unknown config key in override {text!r}")
        node[path[-1]] = value
    return from_dict(data)


def preset(name: str = "desk") -> RunConfig:
    """``desk``: 64x64 phantoms and a small MAE, CPU friendly.

    ``full``: 96x96 images with 48-pixel patches and the full-size MAE.
    """
    if name == "desk":
        return RunConfig(
            unet=UNetConfig(base_channels=32),
            mae=MAEConfig(d1=128, enc_blocks=4, enc_heads=4, d2=128, dec_blocks=2, dec_heads=4),
            train=TrainConfig(max_steps=300, batch_size=16, learning_rate=1e-3, grad_clip=1.0,
                              val_every=50, val_pairs=2),
        )
    if name == "full":
        return RunConfig(plan=PlanConfig(H=96, W=96, p=48, s=16, r=16), data=DataConfig())
    raise ConfigError(f"unknown preset {name!r}; expected 'desk' or 'full'")


def load_config(path: Optional[str] = None, overrides: Optional[list[str]] = None,
                base: str = "desk") -> RunConfig:
    """Load a JSON config (partial documents are merged over the ``base`` preset)."""
    data = preset(base).to_dict()
    if path:
        with open(path) as fh:
            try:
                user = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        if "preset" in user:
            data = preset(user.pop("preset")).to_dict()
        data = _merge(data, user)
    cfg = from_dict(data)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg.validate()
