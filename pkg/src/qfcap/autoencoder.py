"""Text auto-encoder: text encoder + text Q-Former compress a sentence into a soft prompt
that the frozen LM expands back into the same sentence."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .backbones import TextEncoder, pad_batch
from .config import ModelConfig
from .errors import DegenerateInputError
from .fusion import Representation
from .lm import FrozenLM
from .nn import AttentionConfig, Linear, Module, key_padding_mask
from .qformer import QFormer
from .tensor import Tensor


class TextAutoEncoder(Module):
    """Owns the text Q-Former and the projection into LM width.

    The projection is also what turns video content tokens into the LM
    prompt, so an aligned video representation decodes the same way the
    text representation does.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        att = AttentionConfig(cfg.encoder_width, cfg.heads)
        self.text_qformer = QFormer(cfg.text_queries, att, cfg.qformer_layers, rng)
        self.proj = Linear(cfg.encoder_width, cfg.lm_width, rng)

    def encode(self, encoder: TextEncoder, token_seqs: Sequence[Sequence[int]]) -> Representation:
        if any(len(s) == 0 for s in token_seqs):
            raise DegenerateInputError("cannot encode empty text")
        ids, lengths = pad_batch(token_seqs)
        return self.encode_hidden(encoder(ids, lengths), lengths)

    def encode_hidden(self, hidden: Tensor, lengths) -> Representation:
        T = hidden.shape[1]
        lengths = np.asarray(lengths)
        mask = key_padding_mask(lengths, T) if (lengths < T).any() else None
        return Representation(self.text_qformer(hidden, mask))

    def prompt(self, rep: Representation) -> Tensor:
        """Content tokens only, projected to LM width."""
        return self.proj(rep.content_tokens)

    def reconstruction_loss(self, lm: FrozenLM, rep: Representation,
                            token_seqs: Sequence[Sequence[int]]) -> Tensor:
        return lm.teacher_forced_loss(self.prompt(rep), token_seqs)
