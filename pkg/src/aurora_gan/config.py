"""Configuration tree (YAML on disk, dataclasses in memory)."""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml


class ConfigError(ValueError):
    """Raised for invalid or unknown configuration values."""


def _default_channels():
    return {4: 256, 8: 256, 16: 128, 32: 128, 64: 64}


@dataclass
class ModelConfig:
    z_dim: int = 512
    w_dim: int = 512
    text_dim: int = 256
    context_length: int = 77
    vocab_size: int = 4096
    encoder_layers: int = 2
    encoder_heads: int = 4
    encoder_seed: int = 1234
    adapter_layers: int = 2
    mapping_layers: int = 4
    mapping_lr_mul: float = 0.01
    resolutions: list = field(default_factory=lambda: [4, 8, 16, 32, 64])
    channels: dict = field(default_factory=_default_channels)
    num_kernels: int = 4
    num_experts: int = 8
    expert_ratio: int = 4
    attn_heads: int = 4
    attn_min_res: int = 4
    mtm_max_res: int = 16
    mtm_sampling: str = "bilinear"
    disc_channels: dict = field(default_factory=_default_channels)
    disc_feature_dim: int = 256
    embed_seed: int = 4321

    def channels_at(self, res):
        return int(self.channels[res])


@dataclass
class LossConfig:
    r1_gamma: float = 1.0
    r1_every: int = 16
    lambda_match: float = 1.0
    lambda_clip: float = 1.0
    moe_alpha: float = 0.01
    clip_temperature: float = 0.07


@dataclass
class OptimConfig:
    lr: float = 0.0025
    beta1: float = 0.0
    beta2: float = 0.99
    weight_decay: float = 1e-5
    ema_decay: float = 0.999
    ema_rampup: bool = True
    use_ema_for_eval: bool = True


@dataclass
class DataConfig:
    kind: str = "synthetic"
    path: str = ""
    n: int = 2000
    shapes: list = field(default_factory=lambda: ["circle", "square", "triangle"])
    colors: list = field(default_factory=lambda: [
        "red", "green", "blue", "yellow", "cyan", "magenta", "orange", "purple"])
    backgrounds: list = field(default_factory=lambda: ["black", "white", "gray"])
    image_size: int = 64
    seed: int = 0


@dataclass
class TrainConfig:
    batch_size: int = 16
    max_steps_per_stage: list = field(default_factory=lambda: [2000, 2000, 3000, 4000, 5000])
    eval_every: int = 500
    fid_n: int = 500
    reference_n: int = 500
    tau: float = 1.0
    seed: int = 0
    out_dir: str = "runs/default"
    ckpt_every: int = 1000
    log_every: int = 1
    feature_dim: int = 192
    feature_seed: int = 777


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self):
        return dataclasses.asdict(self)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def max_steps(self, stage_index):
        caps = self.train.max_steps_per_stage
        if isinstance(caps, int):
            return caps
        return int(caps[min(stage_index, len(caps) - 1)])

    def validate(self):
        m = self.model
        if sorted(m.resolutions) != list(m.resolutions) or m.resolutions[0] != 4:
            raise ConfigError("resolutions must start at 4 and increase")
        for a, b in zip(m.resolutions, m.resolutions[1:]):
            if b != 2 * a:
                raise ConfigError(f"resolutions must double, got {a} -> {b}")
        for r in m.resolutions:
            if r not in m.channels or r not in m.disc_channels:
                raise ConfigError(f"missing channel count for resolution {r}")
        for r, c in m.channels.items():
            if int(c) % m.attn_heads:
                raise ConfigError(f"channels at {r} not divisible by attn_heads")
        if m.num_experts < 1:
            raise ConfigError("num_experts must be >= 1")
        if m.text_dim % m.encoder_heads:
            raise ConfigError("text_dim must be divisible by encoder_heads")
        if m.mtm_sampling not in ("bilinear", "nearest"):
            raise ConfigError(f"unknown mtm_sampling {m.mtm_sampling!r}")
        return self


def _build(cls, values, where):
    if values is None:
        return cls()
    if not isinstance(values, dict):
        raise ConfigError(f"section {where!r} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where!r}: {sorted(unknown)}")
    kwargs = dict(values)
    for key in ("channels", "disc_channels"):
        if key in kwargs:
            kwargs[key] = {int(k): int(v) for k, v in kwargs[key].items()}
    return cls(**kwargs)


def config_from_dict(tree):
    tree = dict(tree or {})
    sections = {f.name: f.type for f in dataclasses.fields(Config)}
    unknown = set(tree) - set(sections)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    classes = {"model": ModelConfig, "loss": LossConfig, "optim": OptimConfig,
               "data": DataConfig, "train": TrainConfig}
    cfg = Config(**{name: _build(cls, tree.get(name), name) for name, cls in classes.items()})
    return cfg.validate()


def load_config(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        return config_from_dict(yaml.safe_load(fh))


def save_config(cfg, path):
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)


def small_config(**train_overrides):
    """A reduced-width configuration for CPU smoke runs and tests."""
    chans = {4: 32, 8: 32, 16: 32, 32: 16, 64: 16}
    cfg = Config(
        model=ModelConfig(z_dim=64, w_dim=64, text_dim=64, context_length=16,
                          vocab_size=512, channels=dict(chans), disc_channels=dict(chans),
                          num_experts=4, num_kernels=2, disc_feature_dim=64),
        train=TrainConfig(batch_size=8, fid_n=200, reference_n=200, eval_every=200),
    )
    for k, v in train_overrides.items():
        setattr(cfg.train, k, v)
    return cfg.validate()
