"""Frozen patch vision encoder and the bidirectional text encoder."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ContractError, DegenerateInputError, ShapeError
from .nn import (
    AttentionConfig, Embedding, EncoderLayer, LayerNorm, Linear, Module, key_padding_mask,
    set_frozen,
)
from .tensor import Tensor, add, embedding, no_grad, reshape


def patchify(frames: np.ndarray, patch: int) -> np.ndarray:
    """(N, C, H, W) -> (N, (H/P)*(W/P), C*P*P), patches in row-major order."""
    N, C, H, W = frames.shape
    if H % patch or W % patch:
        raise ShapeError(f"frame size {H}x{W} is not divisible by patch size {patch}")
    x = frames.reshape(N, C, H // patch, patch, W // patch, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(N, (H // patch) * (W // patch), C * patch * patch)


class VisionEncoder(Module):
    """Stand-in for a pretrained ViT: random weights, frozen at construction."""

    def __init__(self, width: int, heads: int, layers: int, patch: int, rng: np.random.Generator,
                 channels: int = 3, image_size: tuple[int, int] = (16, 16)):
        H, W = image_size
        if H % patch or W % patch:
            raise ShapeError(f"image size {H}x{W} is not divisible by patch size {patch}")
        self.patch = patch
        self.channels = channels
        self.image_size = (H, W)
        self.num_patches = (H // patch) * (W // patch)
        self.proj = Linear(channels * patch * patch, width, rng)
        self.pos = Embedding(self.num_patches, width, rng, std=0.1)
        cfg = AttentionConfig(width, heads)
        self.layers = [EncoderLayer(cfg, rng) for _ in range(layers)]
        self.ln = LayerNorm(width)
        set_frozen(self)

    def encode(self, frames: np.ndarray) -> Tensor:
        """(N, C, H, W) -> (N, N_p, E)."""
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 4 or frames.shape[1] != self.channels:
            raise ShapeError(f"expected (N, {self.channels}, H, W) frames, got {frames.shape}")
        if frames.shape[2] % self.patch or frames.shape[3] % self.patch:
            raise ShapeError(f"frame size {frames.shape[2:]} is not divisible by patch size {self.patch}")
        patches = patchify(frames, self.patch)
        if patches.shape[1] != self.num_patches:
            raise ShapeError(f"got {patches.shape[1]} patches, encoder built for {self.num_patches}")
        with no_grad():
            x = add(self.proj(patches), self.pos.weight)
            for layer in self.layers:
                x = layer(x)
            return self.ln(x)

    def encode_frame(self, frame: np.ndarray) -> Tensor:
        """(C, H, W) -> (N_p, E)."""
        out = self.encode(np.asarray(frame)[None])
        return reshape(out, out.shape[1:])


class TextEncoder(Module):
    """BERT-like bidirectional encoder; one instance serves both ASR and target text."""

    def __init__(self, vocab_size: int, width: int, heads: int, layers: int, max_len: int,
                 rng: np.random.Generator):
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.tok = Embedding(vocab_size, width, rng, std=0.1)
        self.pos = Embedding(max_len, width, rng, std=0.1)
        cfg = AttentionConfig(width, heads)
        self.layers = [EncoderLayer(cfg, rng) for _ in range(layers)]
        self.ln = LayerNorm(width)

    def __call__(self, ids: np.ndarray, lengths: Sequence[int]) -> Tensor:
        """Padded ids (B, T) with true lengths -> last hidden states (B, T, E)."""
        ids = np.asarray(ids, dtype=np.int64)
        B, T = ids.shape
        lengths = np.asarray(lengths)
        if T == 0 or (lengths < 1).any():
            raise DegenerateInputError("text encoder needs at least one token per sequence")
        if T > self.max_len:
            raise ContractError(f"sequence length {T} exceeds encoder max length {self.max_len}")
        if ids.max() >= self.vocab_size or ids.min() < 0:
            raise ContractError("token id outside the encoder vocabulary")
        x = add(embedding(self.tok.weight, ids), embedding(self.pos.weight, np.arange(T)))
        mask = key_padding_mask(lengths, T) if (lengths < T).any() else None
        for layer in self.layers:
            x = layer(x, mask)
        return self.ln(x)

    def encode_text(self, tokens: Sequence[int]) -> Tensor:
        """Single sequence -> (T, E)."""
        if len(tokens) == 0:
            raise DegenerateInputError("cannot encode an empty token list")
        out = self(np.asarray([tokens]), [len(tokens)])
        return reshape(out, out.shape[1:])


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    T = int(lengths.max()) if len(seqs) else 0
    out = np.full((len(seqs), T), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out, lengths
