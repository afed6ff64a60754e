"""Run configuration: one JSON file plus ``key=value`` overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .gaussian_decode import ALPHA_CULL, DEFAULT_K
from .optimizer import DESK_STEPS, LAMBDA_SSIM, LAMBDA_VOL, REGISTRATION_ITERS, TRAIN_STEPS

PRESETS = {"desk": DESK_STEPS, "full": TRAIN_STEPS}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # scene and model
    voxel_scale: float | None = None  # None: scene extent / 32
    feature_dim: int = 32
    k: int = DEFAULT_K
    use_image_features: bool = True
    alpha_cull: float = ALPHA_CULL
    background: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    test_every: int = 8
    train_poses: str = "noisy"  # which pose set of a synthetic scene to train from: noisy | gt
    # training
    preset: str = "desk"
    steps: int | None = None  # None: taken from the preset
    levels: int = 3
    lambda_ssim: float = LAMBDA_SSIM
    lambda_vol: float = LAMBDA_VOL
    lr_model: float = 1e-3
    lr_pose: float = 1e-3
    pose_level_decay: float = 0.5
    optimize_poses: bool = True
    seed: int = 0
    # registration
    reg_iterations: int = REGISTRATION_ITERS
    reg_lr: float = 1e-2
    reg_lr_floor: float = 0.2
    reg_levels: int = 3
    reg_init: str = "noisy"  # initial test poses: noisy | gt
    # ablation
    ablation_seeds: list = field(default_factory=lambda: [0, 1, 2])

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")
        for name in ("train_poses", "reg_init"):
            if getattr(self, name) not in ("noisy", "gt"):
                raise ConfigError(f"{name} must be 'noisy' or 'gt'")
        if self.steps is not None and self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.reg_iterations < 1:
            raise ConfigError("reg_iterations must be >= 1")
        if self.levels < 1 or self.reg_levels < 1:
            raise ConfigError("pyramid levels must be >= 1")

    @property
    def train_steps(self) -> int:
        return self.steps if self.steps is not None else PRESETS[self.preset]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        return cls(**d)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path=None, overrides=()) -> RunConfig:
    """Config file (JSON object) first, then ``key=value`` overrides in order."""
    d = {}
    if path is not None:
        try:
            with open(path) as fh:
                d = json.load(fh)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e.msg}") from None
        if not isinstance(d, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        d[key.strip()] = _parse_value(value)
    return RunConfig.from_dict(d)
