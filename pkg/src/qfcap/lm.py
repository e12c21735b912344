"""Small causal language model used as the frozen decoder for soft prompts.

Sequence layout for a prompt of K vectors and target ``y_1..y_n``::

    position  0 .. K-1 | K     | K+1 .. K+n
    input     prompt   | <bos> | y_1 .. y_n
    predicts  -        | y_1   | y_2 .. y_n, <eos>

Only the n+1 target positions contribute to the loss.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .backbones import pad_batch
from .errors import ContractError, DegenerateInputError, ShapeError
from .nn import AttentionConfig, Embedding, EncoderLayer, LayerNorm, Linear, Module, NEG_INF, set_frozen
from .tensor import (
    AdamState, Tensor, adam_step, add, as_tensor, backward, clip_grad_norm, concat,
    cross_entropy, embedding, linear, matmul, mul, no_grad, parameter, reshape, token_logprobs,
    transpose, tsum,
)


class FrozenLM(Module):
    def __init__(self, vocab_size: int, width: int, heads: int, layers: int, max_len: int,
                 rng: np.random.Generator, bos_id: int = 1, eos_id: int = 2, pad_id: int = 0):
        self.vocab_size = vocab_size
        self.width = width
        self.max_len = max_len
        self.bos_id, self.eos_id, self.pad_id = bos_id, eos_id, pad_id
        self.tok = Embedding(vocab_size, width, rng, std=0.1)
        self.pos = Embedding(max_len, width, rng, std=0.1)
        cfg = AttentionConfig(width, heads)
        self.layers = [EncoderLayer(cfg, rng, causal=True) for _ in range(layers)]
        self.ln = LayerNorm(width)

    def freeze(self) -> None:
        set_frozen(self, True)

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())

    # -- core forward --------------------------------------------------
    def logits(self, prompt: Tensor, ids: np.ndarray) -> Tensor:
        """prompt (B, K, E), ids (B, T) -> logits (B, K+T, V)."""
        prompt = as_tensor(prompt)
        B, K, E = prompt.shape
        if E != self.width:
            raise ShapeError(f"prompt width {E} does not match LM width {self.width}")
        T = ids.shape[1]
        if K + T > self.max_len:
            raise ContractError(f"sequence of {K + T} positions exceeds LM context {self.max_len}")
        x = concat([prompt, embedding(self.tok.weight, ids)], axis=1) if K else embedding(self.tok.weight, ids)
        x = add(x, embedding(self.pos.weight, np.arange(K + T)))
        for layer in self.layers:
            x = layer(x)
        h = self.ln(x)
        return matmul(h, transpose(self.tok.weight, (1, 0)))

    def _check_targets(self, targets: Sequence[Sequence[int]]):
        if len(targets) == 0:
            raise DegenerateInputError("no target sequences")
        for t in targets:
            if len(t) == 0:
                raise DegenerateInputError("empty target sequence")
            if min(t) < 0 or max(t) >= self.vocab_size:
                raise ContractError(f"target token outside vocabulary [0, {self.vocab_size})")

    def _teacher_batch(self, targets: Sequence[Sequence[int]], append_eos: bool = True):
        seq_in = [[self.bos_id] + list(t) for t in targets]
        seq_out = [list(t) + [self.eos_id] for t in targets] if append_eos else \
            [list(t) + [self.pad_id] for t in targets]
        ids, lengths = pad_batch(seq_in, self.pad_id)
        out, _ = pad_batch(seq_out, self.pad_id)
        mask = (np.arange(ids.shape[1])[None, :] < lengths[:, None]).astype(np.float64)
        if not append_eos:
            mask[np.arange(len(targets)), lengths - 1] = 0.0
        return ids, out, mask

    def teacher_forced_loss(self, prompt: Tensor, targets: Sequence[Sequence[int]]) -> Tensor:
        """Mean token cross-entropy of ``targets`` (each followed by <eos>) given soft prompts."""
        self._check_targets(targets)
        prompt = as_tensor(prompt)
        if prompt.ndim == 2:
            prompt = reshape(prompt, (1,) + prompt.shape)
        ids, out, mask = self._teacher_batch(targets)
        K = prompt.shape[1]
        logits = self.logits(prompt, ids)
        return cross_entropy(logits[:, K:, :], out, mask)

    # -- decoding ------------------------------------------------------
    def _step_mask(self, first: bool) -> np.ndarray:
        mask = np.zeros(self.vocab_size)
        for sid in (self.pad_id, self.bos_id):
            if sid != self.eos_id:
                mask[sid] = NEG_INF
        if first:
            mask[self.eos_id] = NEG_INF
        return mask

    def _cached_forward(self, x: np.ndarray, caches) -> np.ndarray:
        """Final-LN hidden states for new positions ``x`` (B, t, E), appending keys/values to ``caches``.

        Same arithmetic as :meth:`logits` but each decode step only runs the
        newest position through the stack.
        """
        for layer, cache in zip(self.layers, caches):
            a = layer.attn
            B, t, E = x.shape
            H, d = a.config.heads, a.config.head_width
            h = layer.ln1(x).data
            q = a.q(h).data.reshape(B, t, H, d).transpose(0, 2, 1, 3)
            k = a.k(h).data.reshape(B, t, H, d).transpose(0, 2, 3, 1)
            v = a.v(h).data.reshape(B, t, H, d).transpose(0, 2, 1, 3)
            cache[0] = k if cache[0] is None else np.concatenate([cache[0], k], axis=3)
            cache[1] = v if cache[1] is None else np.concatenate([cache[1], v], axis=2)
            T = cache[0].shape[3]
            scores = (q @ cache[0]) * (1.0 / np.sqrt(d)) + np.triu(np.full((t, T), NEG_INF), k=T - t + 1)
            scores = np.exp(scores - scores.max(axis=-1, keepdims=True))
            ctx = (scores / scores.sum(axis=-1, keepdims=True)) @ cache[1]
            x = x + a.out(ctx.transpose(0, 2, 1, 3).reshape(B, t, E)).data
            x = x + layer.ffn(layer.ln2(x)).data
        return self.ln(x).data

    def _decode(self, prompt, max_len: int, temperature: float | None, rng):
        if max_len < 1:
            raise ContractError("max_len must be at least 1")
        prompt = as_tensor(prompt)
        if prompt.ndim == 2:
            prompt = reshape(prompt, (1,) + prompt.shape)
        B, K, _ = prompt.shape
        if K + max_len > self.max_len:
            raise ContractError(f"sequence of {K + max_len} positions exceeds LM context {self.max_len}")
        caches: list[list[np.ndarray | None]] = [[None, None] for _ in self.layers]
        done = np.zeros(B, dtype=bool)
        out: list[list[int]] = [[] for _ in range(B)]
        logp = np.zeros(B)
        with no_grad():
            x = np.concatenate([prompt.data, self.tok.weight.data[np.full((B, 1), self.bos_id)]], axis=1)
            h = self._cached_forward(x + self.pos.weight.data[:K + 1], caches)
            for step in range(max_len):
                logits = h[:, -1, :] @ self.tok.weight.data.T + self._step_mask(step == 0)
                if temperature is None:
                    nxt = logits.argmax(axis=-1)
                else:
                    z = logits / temperature
                    z = z - z.max(axis=-1, keepdims=True)
                    lp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
                    p = np.exp(lp)
                    cdf = np.cumsum(p, axis=-1)
                    u = rng.random(B) * cdf[:, -1]
                    nxt = np.minimum((cdf < u[:, None]).sum(axis=-1), self.vocab_size - 1)
                    logp += np.where(done, 0.0, lp[np.arange(B), nxt])
                for b in range(B):
                    if not done[b]:
                        if nxt[b] == self.eos_id:
                            done[b] = True
                        else:
                            out[b].append(int(nxt[b]))
                if done.all() or step == max_len - 1:
                    break
                x = self.tok.weight.data[nxt][:, None, :] + self.pos.weight.data[K + 1 + step]
                h = self._cached_forward(x, caches)
        return out, logp, done

    def generate_greedy(self, prompt, max_len: int = 24) -> list[list[int]]:
        """Argmax decoding; stops at <eos> or after ``max_len`` tokens. Never returns an empty sequence."""
        return self._decode(prompt, max_len, None, None)[0]

    def generate_sample(self, prompt, temperature: float = 1.0, seed=0, max_len: int = 24):
        """Ancestral sampling from softmax(logits / temperature).

        Returns ``(tokens, logprob, ended)``: ``logprob[b]`` is the summed
        log-probability of the emitted tokens (plus <eos> when ``ended[b]``)
        under the same tempered distribution, which
        :meth:`sequence_logprob` reproduces with gradients.
        """
        if not temperature > 0:
            raise ContractError("temperature must be positive; use generate_greedy for argmax decoding")
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        return self._decode(prompt, max_len, float(temperature), rng)

    def sequence_logprob(self, prompt: Tensor, sequences: Sequence[Sequence[int]], ended: Sequence[bool],
                         temperature: float = 1.0) -> Tensor:
        """Differentiable (B,) summed log-probabilities of decoded sequences, decode masks included."""
        prompt = as_tensor(prompt)
        if prompt.ndim == 2:
            prompt = reshape(prompt, (1,) + prompt.shape)
        B = len(sequences)
        seq_in = [[self.bos_id] + list(s) for s in sequences]
        seq_out = [list(s) + ([self.eos_id] if e else []) for s, e in zip(sequences, ended)]
        ids, _ = pad_batch(seq_in, self.pad_id)
        T = ids.shape[1]
        tgt = np.full((B, T), self.pad_id, dtype=np.int64)
        mask = np.zeros((B, T))
        for b, s in enumerate(seq_out):
            tgt[b, :len(s)] = s
            mask[b, :len(s)] = 1.0
        K = prompt.shape[1]
        logits = self.logits(prompt, ids)[:, K:, :]
        step_mask = np.stack([self._step_mask(t == 0) for t in range(T)])
        logits = add(mul(logits, 1.0 / temperature), step_mask / temperature)
        lp = token_logprobs(logits, tgt)
        return tsum(mul(lp, mask), axis=1)


class PrefixEncoder(Module):
    """Throw-away encoder used only while pretraining the LM to read soft prefixes."""

    def __init__(self, vocab_size: int, width: int, prefix_len: int, max_len: int,
                 rng: np.random.Generator):
        self.tok = Embedding(vocab_size, width, rng, std=0.1)
        self.pos = Embedding(max_len, width, rng, std=0.1)
        self.mix = parameter(rng.normal(0.0, 1.0 / np.sqrt(max_len), size=(prefix_len, max_len)))
        self.out = Linear(width, width, rng)

    def __call__(self, targets: Sequence[Sequence[int]]) -> Tensor:
        ids, lengths = pad_batch(targets)
        T = ids.shape[1]
        visible = (np.arange(T)[None, :] < lengths[:, None]).astype(np.float64)[:, :, None]
        u = mul(add(embedding(self.tok.weight, ids), embedding(self.pos.weight, np.arange(T))), visible)
        mixed = matmul(self.mix[:, :T], u)
        return self.out(mixed)


def pretrain_lm(lm: FrozenLM, corpus: Sequence[Sequence[int]], prefix_len: int, steps: int,
                batch_size: int = 16, lr: float = 1e-3, seed: int = 0, log_every: int = 0) -> list[float]:
    """Teach the LM the corpus grammar and to decode content carried by a K-vector prefix, then freeze it."""
    rng = np.random.default_rng(seed)
    aux = PrefixEncoder(lm.vocab_size, lm.width, prefix_len, max(len(s) for s in corpus) + 1, rng)
    params = lm.trainable_parameters() + aux.trainable_parameters()
    state = AdamState.create(params, lr=lr)
    losses = []
    order = rng.permutation(len(corpus))
    cursor = 0
    for step in range(steps):
        if cursor + batch_size > len(order):
            order = rng.permutation(len(corpus))
            cursor = 0
        batch = [corpus[i] for i in order[cursor:cursor + batch_size]]
        cursor += batch_size
        loss = lm.teacher_forced_loss(aux(batch), batch)
        backward(loss)
        clip_grad_norm(params, 1.0)
        state.lr = lr * min(1.0, (step + 1) / 100)
        adam_step(params, state)
        losses.append(loss.item())
        if log_every and step % log_every == 0:
            print(f"lm-pretrain step {step} loss {loss.item():.4f}")
    lm.freeze()
    return losses
