"""Querying transformer: a fixed set of learnable queries reads an arbitrary-length sequence."""
from __future__ import annotations

import numpy as np

from .errors import DegenerateInputError, ShapeError
from .nn import AttentionConfig, FeedForward, LayerNorm, Module, MultiHeadAttention
from .tensor import Tensor, add, parameter, reshape


class QFormerLayer(Module):
    """Query self-attention, then cross-attention into kv, then feed-forward (all pre-LN)."""

    def __init__(self, config: AttentionConfig, rng: np.random.Generator):
        self.ln_self = LayerNorm(config.width)
        self.self_attn = MultiHeadAttention(config, rng)
        self.ln_cross = LayerNorm(config.width)
        self.ln_kv = LayerNorm(config.width)
        self.cross_attn = MultiHeadAttention(config, rng)
        self.ln_ffn = LayerNorm(config.width)
        self.ffn = FeedForward(config.width, rng)

    def __call__(self, q: Tensor, kv: Tensor, kv_mask: np.ndarray | None) -> Tensor:
        h = self.ln_self(q)
        q = add(q, self.self_attn(h, h))
        q = add(q, self.cross_attn(self.ln_cross(q), self.ln_kv(kv), kv_mask))
        return add(q, self.ffn(self.ln_ffn(q)))


class QFormer(Module):
    def __init__(self, num_queries: int, config: AttentionConfig, num_layers: int,
                 rng: np.random.Generator):
        self.num_queries = num_queries
        self.width = config.width
        self.queries = parameter(rng.normal(0.0, 0.02, size=(num_queries, config.width)))
        self.layers = [QFormerLayer(config, rng) for _ in range(num_layers)]
        self.ln_out = LayerNorm(config.width)

    def __call__(self, kv: Tensor, kv_mask: np.ndarray | None = None) -> Tensor:
        """Map kv ``(B, L, E)`` (or ``(L, E)``) to ``(B, Q, E)`` (or ``(Q, E)``)."""
        squeeze = kv.ndim == 2
        if squeeze:
            kv = reshape(kv, (1,) + kv.shape)
        B, L, E = kv.shape
        if L == 0:
            raise DegenerateInputError("Q-Former needs at least one key/value token")
        if E != self.width:
            raise ShapeError(f"Q-Former width {self.width} does not match kv {kv.shape}")
        q = add(np.zeros((B, 1, 1)), reshape(self.queries, (1,) + self.queries.shape))
        for layer in self.layers:
            q = layer(q, kv, kv_mask)
        out = self.ln_out(q)
        return reshape(out, out.shape[1:]) if squeeze else out
