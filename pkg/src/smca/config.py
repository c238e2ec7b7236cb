"""Scene and training configuration, read from flat ``key = value`` files."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .decoder import MODULATIONS
from .encoder import parse_arrangement


class ConfigError(ValueError):
    pass


@dataclass
class SceneConfig:
    image_size: int = 64
    min_objects: int = 1
    max_objects: int = 4
    num_classes: int = 3
    min_side: int = 4
    max_side: int = 24
    noise: float = 0.1

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ConfigError(f"bad object count range {self.min_objects}..{self.max_objects}")
        if self.min_side < 4:
            raise ConfigError("min_side must be at least 4 px")
        if self.max_side < self.min_side or self.max_side > self.image_size:
            raise ConfigError(f"side range {self.min_side}..{self.max_side} does not fit a {self.image_size} px image")
        # non-overlapping placement of max_objects minimal squares must be possible
        if self.max_objects * (self.min_side + 1) ** 2 > self.image_size**2 // 2:
            raise ConfigError("image too small for the requested number of objects")
        if self.noise < 0:
            raise ConfigError("noise must be non-negative")


@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 30
    train_scenes: int = 300
    val_scenes: int = 100
    lr: float = 1e-3
    lr_backbone: float = 1e-4
    lr_drop_epoch: int = -1  # -1: at 80% of the schedule
    weight_decay: float = 1e-4
    accumulate: int = 8
    clip_norm: float = 0.1
    beta: float = 1.0
    dim: int = 32
    heads: int = 4
    ffn_dim: int = 64
    num_queries: int = 12
    decoder_depth: int = 3
    encoder: str = "2Intra-Multi-2Intra"
    modulation: str = "shared"
    scales: tuple = (4, 8, 16)
    backbone_channels: tuple = (16, 32, 32, 32)
    scale_init: float = -1.0
    box_reference: bool = True  # modulated layers predict boxes relative to the prior center
    jitter: int = 4
    cls_cost: str = "focal"
    scene: SceneConfig = field(default_factory=SceneConfig)

    @property
    def drop_epoch(self) -> int:
        return int(0.8 * self.epochs) if self.lr_drop_epoch == -1 else self.lr_drop_epoch

    def lr_factor(self, epoch: int) -> float:
        return 0.1 if epoch >= self.drop_epoch else 1.0

    def validate(self) -> None:
        if self.lr <= 0 or self.lr_backbone <= 0:
            raise ConfigError("learning rates must be positive")
        if self.lr_drop_epoch != -1 and not 0 <= self.lr_drop_epoch < max(self.epochs, 1):
            raise ConfigError(f"lr_drop_epoch {self.lr_drop_epoch} must be below epochs {self.epochs}")
        if self.modulation not in MODULATIONS:
            raise ConfigError(f"modulation must be one of {MODULATIONS}")
        if self.dim % self.heads or self.dim % 4:
            raise ConfigError("dim must be divisible by heads and by 4")
        if not self.scales or any(s not in (4, 8, 16) for s in self.scales) or list(self.scales) != sorted(set(self.scales)):
            raise ConfigError(f"scales must be increasing strides drawn from 4, 8, 16, got {self.scales}")
        if self.cls_cost not in ("focal", "neg_prob"):
            raise ConfigError("cls_cost must be focal or neg_prob")
        if self.accumulate < 1 or self.num_queries < self.scene.max_objects:
            raise ConfigError("accumulate must be >= 1 and num_queries >= max_objects")
        try:
            parse_arrangement(self.encoder)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        self.scene.validate()


def _flat_fields(cfg: TrainConfig) -> dict:
    out = {}
    for f in fields(cfg):
        if f.name == "scene":
            for g in fields(cfg.scene):
                out[f"scene.{g.name}"] = getattr(cfg.scene, g.name)
        else:
            out[f.name] = getattr(cfg, f.name)
    return out


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _parse(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() not in ("true", "false", "1", "0"):
            raise ConfigError(f"expected a boolean, got {raw!r}")
        return raw.lower() in ("true", "1")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(int(v) for v in raw.split(",") if v.strip())
    return raw


def dumps(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {_format(v)}\n" for k, v in _flat_fields(cfg).items())


def loads(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse ``key = value`` lines over the defaults; unknown keys are errors."""
    cfg = dataclasses.replace(base or TrainConfig())
    cfg.scene = dataclasses.replace(cfg.scene)
    known = _flat_fields(cfg)
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            value = _parse(raw, known[key])
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {raw!r}") from exc
        if key.startswith("scene."):
            setattr(cfg.scene, key[len("scene.") :], value)
        else:
            setattr(cfg, key, value)
    cfg.validate()
    return cfg


def load(path) -> TrainConfig:
    return loads(Path(path).read_text())
