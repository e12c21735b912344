"""Frames + ASR -> fixed-length video representation via a cascade of Q-Formers."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .errors import DegenerateInputError, ShapeError
from .nn import AttentionConfig, Embedding, Linear, Module, key_padding_mask
from .qformer import QFormer
from .tensor import Tensor, add, concat, embedding, mean, mul, reshape, tsum


@dataclass
class Representation:
    """Q-Former output split into the contrastive slot (row 0) and content rows (1..)."""

    tokens: Tensor

    @property
    def contrastive_token(self) -> Tensor:
        return self.tokens[..., 0, :]

    @property
    def content_tokens(self) -> Tensor:
        return self.tokens[..., 1:, :]

    @property
    def num_content(self) -> int:
        return self.tokens.shape[-2] - 1


class VideoFusion(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        att = AttentionConfig(cfg.width, cfg.heads)
        self.max_frames = cfg.frames
        self.image_queries = cfg.image_queries
        self.width = cfg.width
        self.image_qformer = QFormer(cfg.image_queries, att, cfg.image_qformer_layers, rng)
        self.temporal = Embedding(cfg.frames, cfg.width, rng) if cfg.temporal_embedding else None
        self.modality = Embedding(2, cfg.width, rng) if cfg.modality_embedding else None
        self.asr_proj = Linear(cfg.encoder_width, cfg.width, rng) if cfg.encoder_width != cfg.width else None
        self.cascaded = QFormer(cfg.video_queries, att, cfg.qformer_layers, rng)

    def encode_frames(self, vision_tokens) -> Tensor:
        """Frozen patch features (B, F, N_p, E) -> R_vision (B, F*Q_i, E), temporal order kept."""
        vision_tokens = vision_tokens if isinstance(vision_tokens, Tensor) else Tensor(vision_tokens)
        if vision_tokens.ndim != 4:
            raise ShapeError(f"expected (B, F, N_p, E) vision features, got {vision_tokens.shape}")
        B, F, Np, E = vision_tokens.shape
        if F == 0:
            raise DegenerateInputError("video has no frames")
        if self.temporal is not None and F > self.max_frames:
            raise ShapeError(f"{F} frames exceed the {self.max_frames} temporal embeddings")
        q = self.image_qformer(reshape(vision_tokens, (B * F, Np, E)))
        q = reshape(q, (B, F, self.image_queries, E))
        if self.temporal is not None:
            q = add(q, reshape(embedding(self.temporal.weight, np.arange(F)), (1, F, 1, E)))
        return reshape(q, (B, F * self.image_queries, E))

    def fuse(self, r_vision: Tensor, r_asr: Tensor, asr_lengths) -> Representation:
        """Cascaded Q-Former over concat(R_vision, R_ASR); ASR padding is masked out."""
        B, Lv, E = r_vision.shape
        if r_asr.shape[0] != B:
            raise ShapeError(f"batch mismatch: vision {r_vision.shape} vs asr {r_asr.shape}")
        if self.asr_proj is not None:
            r_asr = self.asr_proj(r_asr)
        if r_asr.shape[2] != E:
            raise ShapeError(f"ASR width {r_asr.shape[2]} does not match vision width {E}")
        if self.modality is not None:
            r_vision = add(r_vision, self.modality.weight[0])
            r_asr = add(r_asr, self.modality.weight[1])
        kv = concat([r_vision, r_asr], axis=1)
        La = r_asr.shape[1]
        lengths = np.asarray(asr_lengths)
        mask = key_padding_mask(Lv + lengths, Lv + La) if (lengths < La).any() else None
        return Representation(self.cascaded(kv, mask))


def pool_asr(r_asr: Tensor, lengths) -> tuple[Tensor, np.ndarray]:
    """Masked mean over ASR positions -> a single (B, 1, E) token."""
    B, T, E = r_asr.shape
    lengths = np.asarray(lengths)
    w = (np.arange(T)[None, :] < lengths[:, None]) / lengths[:, None]
    pooled = tsum(mul(r_asr, w[:, :, None]), axis=1, keepdims=True)
    return pooled, np.ones(B, dtype=np.int64)


def llm_prompt_length(cfg: ModelConfig) -> int:
    """Soft-prompt tokens the LM reads per video with the cascaded design."""
    return cfg.content_queries


def baseline_concat_length(cfg: ModelConfig, frames: int | None = None) -> int:
    """Prompt tokens if per-frame image Q-Former outputs were fed to the LM directly."""
    return (cfg.frames if frames is None else frames) * cfg.image_queries
