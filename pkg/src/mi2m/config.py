"""Run configuration and its flat ``section.key = value`` text format."""
from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ArgumentError, ConfigurationError

CONFIG_HEADER = "# mi2m run config v1"


@dataclass
class SynthSettings:
    activities: int = 6
    subjects: int = 4
    frames_per_recording: int = 100
    csi_shape: tuple[int, int, int] = (3, 114, 10)
    image_shape: tuple[int, int, int] = (3, 224, 224)
    noise: float = 0.05
    environment: str = "A"
    frame_rate: float = 100.0


@dataclass
class DataConfig:
    pretrain: str = ""
    finetune: str = ""  # empty: same as pretrain
    pretrain_fraction: float = 0.8


@dataclass
class GeometryConfig:
    csi_patch: tuple[int, int] = (6, 5)
    image_patch: tuple[int, int] = (16, 16)


@dataclass
class TokenizerConfig:
    codebook_size: int = 8192
    hidden: int = 64
    lr: float = 1e-3
    epochs: int = 10
    batch_size: int = 512
    tau_start: float = 1.0
    tau_end: float = 0.0625
    hard_fraction: float = 1 / 3
    max_patches: int = 0  # 0: every patch of the pretraining split


@dataclass
class EncoderConfig:
    layers: int = 6
    width: int = 384
    heads: int = 6
    ffn_mult: int = 4
    mask_ratio: float = 0.4
    lr: float = 5e-4
    batch_size: int = 128
    epochs: int = 80
    weight_decay: float = 0.0


@dataclass
class FinetuneConfig:
    lr: float = 4e-4
    batch_size: int = 32
    epochs: int = 10
    seq_len: int = 8
    budget_seconds: float = 60.0
    freeze_encoder: bool = True
    hidden: int = 256
    bypass_sigmoid: bool = False
    standardize: bool = True
    photometric_gammas: tuple[float, ...] = (1.0,)


@dataclass
class EvalConfig:
    task: str = "activity"  # activity | joint
    condition: str = "normal"  # normal | dark
    gamma: float = 3.0
    seeds: tuple[int, ...] = (1, 2, 3)
    modalities: tuple[str, ...] = ("wifi", "vision")


@dataclass
class RunConfig:
    synth: SynthSettings = field(default_factory=SynthSettings)
    data: DataConfig = field(default_factory=DataConfig)
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = field(default_factory=lambda: os.environ.get("MI2M_HOME", "mi2m_runs"))
    seed: int = 0

    def validate(self) -> "RunConfig":
        problems = []
        if not 0 < self.data.pretrain_fraction < 1:
            problems.append("data.pretrain_fraction must be in (0, 1)")
        if not 0 < self.encoder.mask_ratio < 1:
            problems.append("encoder.mask_ratio must be in (0, 1)")
        if self.encoder.width % max(self.encoder.heads, 1) or self.encoder.heads < 1:
            problems.append("encoder.width must be divisible by encoder.heads")
        if self.encoder.layers < 0:
            problems.append("encoder.layers must be >= 0")
        for name, v in (("tokenizer.codebook_size", self.tokenizer.codebook_size),
                        ("tokenizer.epochs", self.tokenizer.epochs), ("encoder.batch_size", self.encoder.batch_size),
                        ("finetune.seq_len", self.finetune.seq_len), ("finetune.hidden", self.finetune.hidden),
                        ("finetune.batch_size", self.finetune.batch_size)):
            if v < 1:
                problems.append(f"{name} must be >= 1")
        for name, v in (("tokenizer.lr", self.tokenizer.lr), ("encoder.lr", self.encoder.lr),
                        ("finetune.lr", self.finetune.lr), ("finetune.budget_seconds", self.finetune.budget_seconds),
                        ("eval.gamma", self.eval.gamma), ("tokenizer.tau_start", self.tokenizer.tau_start),
                        ("tokenizer.tau_end", self.tokenizer.tau_end)):
            if not v > 0:
                problems.append(f"{name} must be positive")
        if self.eval.task not in ("activity", "joint"):
            problems.append("eval.task must be 'activity' or 'joint'")
        if self.eval.condition not in ("normal", "dark"):
            problems.append("eval.condition must be 'normal' or 'dark'")
        if not self.eval.seeds:
            problems.append("eval.seeds must not be empty")
        if not set(self.eval.modalities) <= {"wifi", "vision"} or not self.eval.modalities:
            problems.append("eval.modalities must be a non-empty subset of wifi,vision")
        if not self.finetune.photometric_gammas or any(not g > 0 for g in self.finetune.photometric_gammas):
            problems.append("finetune.photometric_gammas must be a non-empty list of positive values")
        if self.synth.activities < 1 or self.synth.subjects < 1 or self.synth.frames_per_recording < 1:
            problems.append("synth.activities, synth.subjects and synth.frames_per_recording must be >= 1")
        if any(p < 1 for p in (*self.geometry.csi_patch, *self.geometry.image_patch)):
            problems.append("patch sizes must be positive")
        if problems:
            raise ConfigurationError("invalid config: " + "; ".join(problems))
        return self


def desk_config(**overrides) -> RunConfig:
    """Tiny settings that run the whole pipeline on a laptop CPU in a couple of minutes."""
    cfg = RunConfig()
    cfg.synth.image_shape = (3, 32, 32)
    cfg.synth.frames_per_recording = 200
    cfg.geometry = GeometryConfig(csi_patch=(19, 5), image_patch=(8, 8))
    cfg.tokenizer = TokenizerConfig(epochs=4, batch_size=256, max_patches=8192)
    cfg.encoder = EncoderConfig(layers=2, width=64, heads=4, lr=1e-3, batch_size=64, epochs=6)
    cfg.finetune = FinetuneConfig(lr=3e-3, batch_size=16, epochs=60, budget_seconds=0.64, hidden=64)
    for key, value in overrides.items():
        section, _, name = key.partition("__")
        setattr(getattr(cfg, section), name, value) if name else setattr(cfg, section, value)
    return cfg


def _sections(cfg: RunConfig):
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            for sub in dataclasses.fields(value):
                yield f"{f.name}.{sub.name}", value, sub.name, sub.type
        else:
            yield f.name, cfg, f.name, f.type


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _hints(obj) -> dict:
    return typing.get_type_hints(type(obj))


def _parse(text: str, hint, key: str):
    origin = typing.get_origin(hint)
    try:
        if origin is tuple:
            args = typing.get_args(hint)
            item = args[0]
            parts = [p.strip() for p in text.split(",") if p.strip()] if text.strip() else []
            if len(args) != 2 or args[1] is not Ellipsis:
                if len(parts) != len(args):
                    raise ValueError(f"expected {len(args)} comma-separated values")
            return tuple(_parse(p, item, key) for p in parts)
        if hint is bool:
            low = text.strip().lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError("expected true/false")
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        return text.strip()
    except ValueError as exc:
        raise ConfigurationError(f"{key}: cannot parse {text!r} ({exc})") from exc


def to_text(cfg: RunConfig) -> str:
    lines = [CONFIG_HEADER]
    for key, obj, name, _ in _sections(cfg):
        lines.append(f"{key} = {_format(getattr(obj, name))}")
    return "\n".join(lines) + "\n"


def set_value(cfg: RunConfig, key: str, text: str) -> None:
    for k, obj, name, _ in _sections(cfg):
        if k == key:
            setattr(obj, name, _parse(text, _hints(obj)[name], key))
            return
    raise ArgumentError(f"unknown config key {key!r}")


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    for item in overrides or ():
        if "=" not in item:
            raise ArgumentError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        set_value(cfg, key.strip(), text.strip())
    return cfg


def from_text(text: str) -> RunConfig:
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        try:
            set_value(cfg, key.strip(), value.strip())
        except ArgumentError as exc:
            raise ConfigurationError(f"config line {lineno}: {exc}") from exc
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    return from_text(path.read_text())


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(to_text(cfg))
