"""Configuration dataclasses for all pipeline stages.

Every config serializes to/from plain dicts so a run directory can store the
exact JSON that produced it. ``RunConfig.apply_override`` implements the
dotted-key CLI override mechanism (``train.iterations=500``); unknown keys
raise ``ConfigError`` naming the offending key.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    """Bad configuration value or unknown key."""


@dataclass
class IoConfig:
    # Side length after aspect-preserving resize + center crop.
    image_size: int = 128

    def validate(self):
        if self.image_size < 16 or self.image_size % 16 != 0:
            raise ConfigError(f"image_size must be a positive multiple of 16, got {self.image_size}")


@dataclass
class ObjectiveConfig:
    tau: float = 1.0
    lambda_kp: float = 10.0
    lambda_equi: float = 1.0
    lambda_tv: float = 9000.0
    lambda_recon: float = 1.0
    lambda_parts: float = 10.0
    huber_delta: float = 1.0
    # "learned" loads pretrained perceptual weights from perceptual_weights;
    # "fallback" is the dependency-free multi-scale structural metric.
    perceptual_metric: str = "fallback"
    perceptual_weights: str | None = None
    # Average the keypoint loss over both pair orderings (pairs are unordered).
    symmetrize_kp: bool = True
    bce_eps: float = 1e-6

    def validate(self):
        for name in ("lambda_kp", "lambda_equi", "lambda_tv", "lambda_recon", "lambda_parts"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.tau <= 0:
            raise ConfigError("tau must be > 0")
        if self.huber_delta <= 0:
            raise ConfigError("huber_delta must be > 0")
        if self.perceptual_metric not in ("learned", "fallback"):
            raise ConfigError(f"perceptual_metric must be 'learned' or 'fallback', got {self.perceptual_metric!r}")


@dataclass
class TrainConfig:
    iterations: int = 20000
    batch_size: int = 20  # images per iteration, consumed as batch_size/2 pairs
    learning_rate: float = 0.001
    seed: int = 0
    checkpoint_every: int = 1000
    tps_strength: float = 0.1
    grid_size: int = 256
    base_channels: int = 32
    grad_clip: float = 10.0  # global-norm guard; <= 0 disables
    log_path: str | None = None

    def validate(self):
        if self.batch_size < 2 or self.batch_size % 2 != 0:
            raise ConfigError(f"batch_size must be even and >= 2 (images are consumed as pairs), got {self.batch_size}")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.tps_strength <= 0:
            raise ConfigError("tps_strength must be > 0")
        if self.grid_size < 2:
            raise ConfigError("grid_size must be >= 2")


@dataclass
class PckConfig:
    alphas: tuple = (0.05, 0.1)
    use_bbox: bool = True  # threshold base max(H_bbox, W_bbox), else max(H, W)

    def validate(self):
        if not self.alphas or any(a <= 0 for a in self.alphas):
            raise ConfigError("all PCK alphas must be > 0")


@dataclass
class RunConfig:
    io: IoConfig = field(default_factory=IoConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pck: PckConfig = field(default_factory=PckConfig)
    collection_dir: str | None = None

    _SECTIONS = ("io", "objective", "train", "pck")

    def validate(self):
        for name in self._SECTIONS:
            getattr(self, name).validate()

    def to_dict(self) -> dict:
        d = {name: dataclasses.asdict(getattr(self, name)) for name in self._SECTIONS}
        d["pck"]["alphas"] = list(self.pck.alphas)
        d["collection_dir"] = self.collection_dir
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        cfg = cls()
        for key, value in data.items():
            if key == "collection_dir":
                cfg.collection_dir = value
                continue
            if key not in cls._SECTIONS:
                raise ConfigError(f"unknown config section {key!r}")
            section = getattr(cfg, key)
            for k, v in value.items():
                if not hasattr(section, k):
                    raise ConfigError(f"unknown config key {key}.{k!r}")
                if k == "alphas":
                    v = tuple(v)
                setattr(section, k, v)
        cfg.validate()
        return cfg

    def apply_override(self, dotted_key: str, raw_value: str):
        """Set ``section.key`` from its string form, e.g. ``train.seed=3``."""
        if "." not in dotted_key:
            raise ConfigError(f"unknown config key {dotted_key!r} (expected section.key)")
        section_name, key = dotted_key.split(".", 1)
        if section_name not in self._SECTIONS:
            raise ConfigError(f"unknown config section {section_name!r}")
        section = getattr(self, section_name)
        if not hasattr(section, key):
            raise ConfigError(f"unknown config key {dotted_key!r}")
        current = getattr(section, key)
        setattr(section, key, _parse_value(raw_value, current))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _parse_value(raw: str, current):
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"cannot parse boolean from {raw!r}")
    if isinstance(current, int) and not isinstance(current, bool):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        return tuple(float(x) for x in raw.split(","))
    if current is None or isinstance(current, str):
        return raw
    raise ConfigError(f"cannot parse override value {raw!r}")
