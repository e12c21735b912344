"""Transformer building blocks on top of the tensor engine.

All blocks take batched ``(B, T, E)`` inputs; 2-D ``(T, E)`` inputs are
accepted by the attention entry points and treated as a batch of one.
Masks are additive float arrays (0 for visible, a large negative number
for hidden) broadcastable to ``(B, heads, T_q, T_k)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import ContractError, DegenerateInputError, ShapeError
from .tensor import (
    Tensor, add, embedding, gelu, layer_norm, linear, matmul, mul, parameter, reshape, softmax,
    transpose,
)

NEG_INF = -1e9


class Module:
    """Parameter container; discovers Tensor attributes and sub-modules in insertion order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Tensor]:
        return [p for p in self.parameters() if p.requires_grad]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def _name_params(self):
        for name, p in self.named_parameters():
            p.name = name


def _init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = parameter(_init(rng, d_in, (d_in, d_out)))
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x) -> Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = 1e-5):
        self.gain = parameter(np.ones(width))
        self.bias = parameter(np.zeros(width))
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, count: int, width: int, rng: np.random.Generator, std: float = 0.02):
        self.weight = parameter(rng.normal(0.0, std, size=(count, width)))

    def __call__(self, ids) -> Tensor:
        return embedding(self.weight, ids)


@dataclass(frozen=True)
class AttentionConfig:
    width: int
    heads: int

    def __post_init__(self):
        if self.width % self.heads:
            raise ContractError(f"head count {self.heads} does not divide width {self.width}")

    @property
    def head_width(self) -> int:
        return self.width // self.heads


class MultiHeadAttention(Module):
    def __init__(self, config: AttentionConfig, rng: np.random.Generator):
        E = config.width
        self.config = config
        self.q = Linear(E, E, rng)
        self.k = Linear(E, E, rng)
        self.v = Linear(E, E, rng)
        self.out = Linear(E, E, rng)

    def __call__(self, x_q: Tensor, x_kv: Tensor, mask: np.ndarray | None = None) -> Tensor:
        cfg = self.config
        B, Tq, E = x_q.shape
        Tk = x_kv.shape[1]
        if E != cfg.width or x_kv.shape[2] != cfg.width:
            raise ShapeError(f"attention width {cfg.width} does not match inputs {x_q.shape}, {x_kv.shape}")
        h, d = cfg.heads, cfg.head_width
        q = transpose(reshape(self.q(x_q), (B, Tq, h, d)), (0, 2, 1, 3))
        k = transpose(reshape(self.k(x_kv), (B, Tk, h, d)), (0, 2, 3, 1))
        v = transpose(reshape(self.v(x_kv), (B, Tk, h, d)), (0, 2, 1, 3))
        scores = mul(matmul(q, k), 1.0 / np.sqrt(d))
        if mask is not None:
            scores = add(scores, mask)
        ctx = matmul(softmax(scores, axis=-1), v)
        ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (B, Tq, E))
        return self.out(ctx)


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return reshape(x, (1,) + x.shape), True
    return x, False


def key_padding_mask(lengths, total: int) -> np.ndarray:
    """Additive mask of shape (B, 1, 1, total) hiding positions >= length."""
    lengths = np.asarray(lengths)
    visible = np.arange(total)[None, :] < lengths[:, None]
    return np.where(visible, 0.0, NEG_INF)[:, None, None, :]


def causal_mask(T: int) -> np.ndarray:
    """Additive (1, 1, T, T) mask; entry [i, j] is hidden iff j > i."""
    return np.triu(np.full((T, T), NEG_INF), k=1)[None, None]


def cross_attention(attn: MultiHeadAttention, queries: Tensor, kv: Tensor,
                    mask: np.ndarray | None = None) -> Tensor:
    """Queries attend over kv; output has one row per query whatever kv's length."""
    if kv.shape[-2] == 0:
        raise DegenerateInputError("cross_attention over an empty key/value sequence")
    q, squeeze = _batched(queries)
    k, _ = _batched(kv)
    if k.shape[0] != q.shape[0]:
        raise ShapeError(f"batch mismatch between queries {q.shape} and kv {k.shape}")
    out = attn(q, k, mask)
    return reshape(out, out.shape[1:]) if squeeze else out


def causal_self_attention(attn: MultiHeadAttention, x: Tensor,
                          mask: np.ndarray | None = None) -> Tensor:
    """Self-attention where position t only sees positions <= t."""
    xb, squeeze = _batched(x)
    full = causal_mask(xb.shape[1])
    if mask is not None:
        full = full + mask
    out = attn(xb, xb, full)
    return reshape(out, out.shape[1:]) if squeeze else out


class FeedForward(Module):
    def __init__(self, width: int, rng: np.random.Generator, ratio: int = 4):
        self.up = Linear(width, ratio * width, rng)
        self.down = Linear(ratio * width, width, rng)

    def __call__(self, x) -> Tensor:
        return self.down(gelu(self.up(x)))


class EncoderLayer(Module):
    """Pre-LN transformer layer; ``causal=True`` turns it into a decoder-only layer."""

    def __init__(self, config: AttentionConfig, rng: np.random.Generator, causal: bool = False):
        self.ln1 = LayerNorm(config.width)
        self.attn = MultiHeadAttention(config, rng)
        self.ln2 = LayerNorm(config.width)
        self.ffn = FeedForward(config.width, rng)
        self.causal = causal

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        h = self.ln1(x)
        if self.causal:
            x = add(x, causal_self_attention(self.attn, h, mask))
        else:
            x = add(x, self.attn(h, h, mask))
        return add(x, self.ffn(self.ln2(x)))


# ---------------------------------------------------------------------------
# freezing
# ---------------------------------------------------------------------------

def set_frozen(module: Module, frozen: bool = True) -> None:
    for p in module.parameters():
        p.requires_grad = not frozen
        if frozen:
            p.grad = None


def snapshot(module: Module) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in module.named_parameters()}


def frozen_drift(module: Module, snap: dict[str, np.ndarray]) -> list[str]:
    """Names of parameters that differ bit-wise from ``snap``."""
    params = dict(module.named_parameters())
    if params.keys() != snap.keys():
        raise ContractError(f"snapshot keys differ from module parameters: "
                            f"{sorted(params.keys() ^ snap.keys())[:5]}")
    drifted = []
    for name, p in params.items():
        ref = snap[name]
        if ref.shape != p.data.shape:
            raise ContractError(f"snapshot shape {ref.shape} != parameter shape {p.data.shape} for {name!r}")
        if ref.tobytes() != p.data.tobytes():
            drifted.append(name)
    return drifted


def assert_frozen_unchanged(module: Module, snap: dict[str, np.ndarray]) -> bool:
    return not frozen_drift(module, snap)
