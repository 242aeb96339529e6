"""Run configuration: typed schema, strict YAML parsing, presets, seeding.

A run config unions the model topology, degradation ranges, training
hyper-parameters, loss weights, and paths. Parsing is strict: unknown keys
are rejected with their full dotted path. One global seed feeds every
consumer through namespaced derivation so adding a consumer never reshuffles
the streams of existing ones.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union, get_args, get_origin, get_type_hints

import yaml

from .codec import CodecConfig
from .degradation import DegradationRanges
from .errors import ConfigError
from .generator import GeneratorConfig
from .losses import LossWeights
from .schedule import channel_schedule

__all__ = [
    "ModelConfig",
    "TrainConfig",
    "PathsConfig",
    "RunConfig",
    "OPTIMIZER_GROUPS",
    "DEFAULT_LEARNING_RATES",
    "desk_preset",
    "paper_preset",
    "load_run_config",
    "run_config_from_dict",
    "config_to_dict",
    "config_hash",
    "derive_seed",
    "schema_keys",
]

OPTIMIZER_GROUPS = ("codec", "disc_global", "disc_local", "generator", "noise_branches")

DEFAULT_LEARNING_RATES = {
    "codec": 2e-3,
    "disc_global": 2e-5,
    "disc_local": 2e-3,
    "generator": 2e-4,
    "noise_branches": 2e-3,
}


@dataclass
class ModelConfig:
    """Network topology shared by the codec, generator, and discriminators."""

    base_resolution: int = 64
    min_resolution: int = 4
    latent_dim: int = 512
    channel_base: int = 32
    channel_max: int = 512
    disc_channel_base: int = 32
    disc_channel_max: int = 512
    local_channel_base: int = 16
    local_channel_max: int = 256
    mmrb_per_scale_encoder: int = 2
    mmrb_per_scale_decoder: int = 1
    mapping_layers: int = 4
    roi_size: int = 64
    roi_margin: float = 0.15
    share_branch_kernels: bool = False
    per_block_latent: bool = False

    def channels(self) -> dict[int, int]:
        return channel_schedule(
            self.base_resolution, self.channel_base, self.channel_max, self.min_resolution
        )

    def codec_config(self, use_mmrb: bool = True) -> CodecConfig:
        return CodecConfig(
            base_resolution=self.base_resolution,
            min_resolution=self.min_resolution,
            latent_dim=self.latent_dim,
            channels=self.channels(),
            mmrb_per_scale_encoder=self.mmrb_per_scale_encoder,
            mmrb_per_scale_decoder=self.mmrb_per_scale_decoder,
            use_mmrb=use_mmrb,
            share_branch_kernels=self.share_branch_kernels,
            per_block_latent=self.per_block_latent,
        ).validate()

    def generator_config(self) -> GeneratorConfig:
        channels = self.channels()
        return GeneratorConfig(
            base_resolution=self.base_resolution,
            latent_dim=self.latent_dim,
            mapping_layers=self.mapping_layers,
            channels=channels,
            noise_channels={r: c for r, c in channels.items() if r >= 8},
        ).validate()

    def validate(self) -> "ModelConfig":
        self.codec_config()
        self.generator_config()
        if self.roi_size < 8 or self.roi_size & (self.roi_size - 1):
            raise ConfigError(f"roi_size must be a power of two >= 8, got {self.roi_size}")
        if not 0.0 <= self.roi_margin <= 1.0:
            raise ConfigError(f"roi_margin must be in [0, 1], got {self.roi_margin}")
        return self


@dataclass
class TrainConfig:
    """Optimization schedule, per-group learning rates, and ablation switches."""

    total_iterations: int = 700
    batch_size: int = 4
    learning_rates: dict[str, float] = field(
        default_factory=lambda: dict(DEFAULT_LEARNING_RATES)
    )
    adam_betas: tuple[float, float] = (0.0, 0.99)
    adam_eps: float = 1e-8
    decay_milestones: tuple[float, ...] = (0.6, 0.8)
    decay_factor: float = 0.5
    use_mmrb: bool = True
    use_local_d: bool = True
    finetune_prior: bool = True
    freeze_d: bool = True
    n_frozen: int | None = None
    r1_gamma: float = 0.0
    checkpoint_interval: int = 350
    preload_limit: int = 256

    def validate(self) -> "TrainConfig":
        if self.total_iterations < 1:
            raise ConfigError("total_iterations must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if set(self.learning_rates) != set(OPTIMIZER_GROUPS):
            raise ConfigError(
                f"learning_rates must define exactly {sorted(OPTIMIZER_GROUPS)}, "
                f"got {sorted(self.learning_rates)}"
            )
        for group, lr in self.learning_rates.items():
            if lr <= 0:
                raise ConfigError(f"learning rate for {group} must be > 0, got {lr}")
        prev = 0.0
        for m in self.decay_milestones:
            if not (prev < m <= 1.0):
                raise ConfigError(
                    f"decay_milestones must be strictly increasing in (0, 1], got {self.decay_milestones}"
                )
            prev = m
        if not 0.0 < self.decay_factor <= 1.0:
            raise ConfigError("decay_factor must be in (0, 1]")
        if self.n_frozen is not None and self.n_frozen < 0:
            raise ConfigError("n_frozen must be >= 0")
        if self.checkpoint_interval < 1:
            raise ConfigError("checkpoint_interval must be >= 1")
        return self


@dataclass
class PathsConfig:
    hq_dir: str | None = None
    pairs_dir: str | None = None
    out_dir: str | None = None
    landmarks: str | None = None
    extractor_container: str | None = None


@dataclass
class RunConfig:
    seed: int = 0
    extractor_profile: str = "test"  # test | identity | pretrained
    model: ModelConfig = field(default_factory=ModelConfig)
    degradation: DegradationRanges = field(default_factory=DegradationRanges)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> "RunConfig":
        if self.extractor_profile not in ("test", "identity", "pretrained"):
            raise ConfigError(
                f"extractor_profile must be test, identity, or pretrained, "
                f"got {self.extractor_profile!r}"
            )
        self.model.validate()
        self.degradation.validate()
        self.train.validate()
        self.loss.validate()
        return self


def desk_preset() -> RunConfig:
    """Small CPU-friendly configuration: 64x64, narrow channels, 700 iterations."""
    cfg = RunConfig()
    cfg.model = ModelConfig(
        base_resolution=64,
        latent_dim=64,
        channel_base=8,
        channel_max=32,
        disc_channel_base=8,
        disc_channel_max=32,
        local_channel_base=8,
        local_channel_max=32,
        mapping_layers=4,
        roi_size=32,
    )
    return cfg.validate()


def paper_preset() -> RunConfig:
    """Production-scale configuration: 512x512, full channels, 700k iterations."""
    cfg = RunConfig()
    cfg.extractor_profile = "pretrained"
    cfg.model = ModelConfig(
        base_resolution=512,
        latent_dim=512,
        channel_base=32,
        channel_max=512,
        mapping_layers=8,
        roi_size=64,
    )
    cfg.train = TrainConfig(total_iterations=700_000, n_frozen=5, checkpoint_interval=10_000)
    return cfg.validate()


PRESETS = {"desk": desk_preset, "paper": paper_preset}


def _coerce(value, hint, path: str):
    origin = get_origin(hint)
    if dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping")
        return _from_mapping(hint, value, path)
    if origin is Union:
        args = get_args(hint)
        if value is None and type(None) in args:
            return None
        for arm in args:
            if arm is type(None):
                continue
            try:
                return _coerce(value, arm, path)
            except ConfigError:
                continue
        raise ConfigError(f"{path}: value {value!r} matches no allowed type")
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a sequence")
        args = get_args(hint)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"{path}: expected {len(args)} entries, got {len(value)}")
        return tuple(_coerce(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping")
        key_t, val_t = get_args(hint)
        return {
            _coerce(k, key_t, f"{path}<key>"): _coerce(v, val_t, f"{path}.{k}")
            for k, v in value.items()
        }
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported config type {hint}")


def _from_mapping(cls, data: dict, path: str):
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = path or cls.__name__
        raise ConfigError(f"unknown config keys under {where}: {unknown}")
    kwargs = {
        name: _coerce(value, hints[name], f"{path}.{name}" if path else name)
        for name, value in data.items()
    }
    return cls(**kwargs)


def run_config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("run config must be a mapping")
    return _from_mapping(RunConfig, data, "").validate()


def config_to_dict(cfg) -> dict:
    """Dataclass tree -> plain dict with JSON/YAML-safe values."""

    def convert(value):
        if dataclasses.is_dataclass(value) and not isinstance(value, type):
            return {f.name: convert(getattr(value, f.name)) for f in dataclasses.fields(value)}
        if isinstance(value, tuple):
            return [convert(v) for v in value]
        if isinstance(value, dict):
            return {k: convert(v) for k, v in value.items()}
        return value

    return convert(cfg)


def load_run_config(path: str | Path | None, preset: str = "desk") -> RunConfig:
    """Load and validate a YAML run config; with no path, return the preset."""
    if path is None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}, expected one of {sorted(PRESETS)}")
        return PRESETS[preset]()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if data is None:
        data = {}
    if isinstance(data, dict) and isinstance(data.get("preset"), str):
        base = PRESETS.get(data.pop("preset"))
        if base is None:
            raise ConfigError(f"unknown preset referenced in {path}")
        merged = config_to_dict(base())
        _deep_update(merged, data)
        data = merged
    return run_config_from_dict(data)


def _deep_update(base: dict, overlay: dict) -> None:
    for key, value in overlay.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def derive_seed(master: int, name: str) -> int:
    """Stable per-consumer seed: hash of the master seed and a namespace string."""
    digest = hashlib.sha256(f"{master}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def schema_keys(cls=RunConfig, prefix: str = "") -> list[str]:
    """All dotted config keys; used to make --help enumerate the schema."""
    keys = []
    for f in dataclasses.fields(cls):
        dotted = f"{prefix}{f.name}"
        hint = get_type_hints(cls)[f.name]
        if dataclasses.is_dataclass(hint):
            keys.extend(schema_keys(hint, dotted + "."))
        else:
            keys.append(dotted)
    return keys
