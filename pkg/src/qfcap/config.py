"""Versioned experiment configuration (JSON on disk)."""
from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

from .errors import ContractError

CONFIG_VERSION = 1
CONFIG_ENV = "QFCAP_CONFIG"


@dataclass
class ModelConfig:
    width: int = 64
    heads: int = 4
    text_width: int | None = None      # text-encoder width; None means same as ``width``
    frames: int = 4
    channels: int = 3
    image_size: tuple[int, int] = (16, 16)
    patch: int = 4
    vision_layers: int = 1
    image_queries: int = 8             # per-frame tokens out of the image Q-Former
    video_queries: int = 9             # 1 contrastive + content tokens
    text_queries: int = 9
    image_qformer_layers: int = 2
    qformer_layers: int = 2            # cascaded and text Q-Formers
    text_layers: int = 2
    text_max_len: int = 64
    lm_width: int = 64
    lm_heads: int = 4
    lm_layers: int = 2
    lm_max_len: int = 96
    temporal_embedding: bool = True
    modality_embedding: bool = True
    asr_pooled: bool = False
    freeze_text_encoder: bool = False

    @property
    def content_queries(self) -> int:
        return self.video_queries - 1

    @property
    def encoder_width(self) -> int:
        return self.text_width or self.width

    @classmethod
    def paper_scale(cls) -> "ModelConfig":
        return cls(width=768, heads=12, frames=8, image_size=(224, 224), patch=14, vision_layers=12,
                   image_queries=32, video_queries=33, text_queries=33, image_qformer_layers=12,
                   qformer_layers=5, text_layers=12, text_max_len=128, lm_width=4096, lm_heads=32,
                   lm_layers=32, lm_max_len=2048)


@dataclass
class LossConfig:
    lambda_text: float = 1.0
    lambda_align: float = 1.0
    temperature: float = 0.07
    use_contrastive: bool = True
    stop_gradient_on_text: bool = False
    align_tokens: str = "content"      # "content" or "all"

    def __post_init__(self):
        if not (self.temperature > 0):
            raise ContractError("contrastive temperature must be positive")
        if self.lambda_text < 0 or self.lambda_align < 0:
            raise ContractError("loss weights must be non-negative")
        if self.align_tokens not in ("content", "all"):
            raise ContractError(f"align_tokens must be 'content' or 'all', got {self.align_tokens!r}")


@dataclass
class StageConfig:
    stage: int = 1
    data: str = ""
    steps: int = 2000
    batch_size: int = 16
    lr: float = 3e-4
    warmup: int = 100
    clip: float = 1.0
    target: str = "captions"
    blank_asr: bool = False
    corpus_limit: int | None = None    # stage 1: cap on distinct sentences


@dataclass
class LMPretrainConfig:
    steps: int = 1500
    batch_size: int = 16
    lr: float = 1e-3


@dataclass
class SCSTConfig:
    steps: int = 200
    batch_size: int = 32
    lr: float = 2e-5
    temperature: float = 1.0
    max_len: int = 24


@dataclass
class Config:
    version: int = CONFIG_VERSION
    seed: int = 0
    lm_seed: int = 1234
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    lm_pretrain: LMPretrainConfig = field(default_factory=LMPretrainConfig)
    stage1: StageConfig = field(default_factory=lambda: StageConfig(stage=1, steps=2000))
    stage2: StageConfig = field(default_factory=lambda: StageConfig(stage=2, steps=4000))
    stage3: StageConfig = field(default_factory=lambda: StageConfig(stage=3, steps=1000))
    scst: SCSTConfig = field(default_factory=SCSTConfig)
    caption_max_len: int = 24
    summary_max_len: int = 64

    def stage(self, k: int) -> StageConfig:
        if k not in (1, 2, 3):
            raise ContractError(f"stage must be 1, 2 or 3, got {k}")
        return getattr(self, f"stage{k}")

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps() + "\n", encoding="utf-8")

    @classmethod
    def from_dict(cls, data: dict) -> "Config":
        version = data.get("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ContractError(f"config version {version} is not supported (expected {CONFIG_VERSION})")
        return _build(cls, data)

    @classmethod
    def load(cls, path) -> "Config":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def with_overrides(self, overrides: dict[str, Any]) -> "Config":
        """Copy with dotted-key overrides applied, e.g. ``{"loss.lambda_align": 0.0}``."""
        data = self.to_dict()
        for key, value in overrides.items():
            node = data
            parts = key.split(".")
            for part in parts[:-1]:
                if part not in node or not isinstance(node[part], dict):
                    raise ContractError(f"unknown config key {key!r}")
                node = node[part]
            if parts[-1] not in node:
                raise ContractError(f"unknown config key {key!r}")
            node[parts[-1]] = value
        return Config.from_dict(data)


def _build(cls, data: dict):
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ContractError(f"unknown config keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        if is_dataclass(current) and isinstance(value, dict):
            kwargs[name] = _build(type(current), value)
        elif isinstance(current, tuple) and isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = copy.deepcopy(value)
    return cls(**kwargs)


def resolve_config(path: str | None) -> Config:
    """Explicit path, else the ``QFCAP_CONFIG`` environment variable, else defaults."""
    path = path or os.environ.get(CONFIG_ENV)
    return Config.load(path) if path else Config()
