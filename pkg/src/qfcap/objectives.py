"""Training objectives: reconstruction, contrastive, alignment, their weighted sum, and SCST."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .backbones import pad_batch
from .config import LossConfig
from .data import VideoSample
from .errors import ContractError, DegenerateInputError, ShapeError
from .fusion import Representation, pool_asr
from .metrics import CorpusRefs, cider_d, words
from .model import CaptionModel
from .tensor import (
    Tensor, add, concat, cross_entropy, l2_normalize, matmul, mse, mul, stop_gradient, transpose,
    tsum,
)


def contrastive_loss(video_first: Tensor, text_first: Tensor, temperature: float = 0.07) -> Tensor:
    """Symmetric InfoNCE over cosine similarities; matching pairs sit on the diagonal."""
    B = video_first.shape[0]
    if B < 2:
        raise DegenerateInputError("contrastive loss needs at least two pairs")
    if video_first.shape != text_first.shape:
        raise ShapeError(f"contrastive inputs differ: {video_first.shape} vs {text_first.shape}")
    v = l2_normalize(video_first, axis=-1)
    t = l2_normalize(text_first, axis=-1)
    logits = mul(matmul(v, transpose(t, (1, 0))), 1.0 / temperature)
    labels = np.arange(B)
    v2t = cross_entropy(logits, labels)
    t2v = cross_entropy(transpose(logits, (1, 0)), labels)
    return mul(add(v2t, t2v), 0.5)


def alignment_loss(video_tokens: Tensor, text_tokens: Tensor, stop_gradient_on_text: bool = False) -> Tensor:
    """Token-by-token MSE between video and text representations."""
    if video_tokens.shape != text_tokens.shape:
        raise ShapeError(f"alignment shape mismatch: {video_tokens.shape} vs {text_tokens.shape}")
    if stop_gradient_on_text:
        text_tokens = stop_gradient(text_tokens)
    return mse(video_tokens, text_tokens)


@dataclass
class LossBreakdown:
    L_video: float
    L_contra: float
    L_text: float
    L_align: float
    L_total: float
    total: Tensor | None = field(default=None, repr=False)

    def as_record(self) -> dict:
        return {"L_video": self.L_video, "L_contra": self.L_contra, "L_text": self.L_text,
                "L_align": self.L_align, "L_total": self.L_total}


def _target_nll(model: CaptionModel, prompts: Tensor, targets: Sequence[Sequence[int]], groups: int):
    """Run the LM once over ``groups`` stacked prompt blocks sharing the same targets."""
    lm = model.lm
    stacked = list(targets) * groups
    ids, out, mask = lm._teacher_batch(stacked)
    K = prompts.shape[1]
    logits = lm.logits(prompts, ids)[:, K:, :]
    B = len(targets)
    losses = []
    for g in range(groups):
        sl = slice(g * B, (g + 1) * B)
        losses.append(cross_entropy(logits[sl], out[sl], mask[sl]))
    return losses


def total_loss(model: CaptionModel, samples: Sequence[VideoSample], texts: Sequence[str],
               weights: LossConfig) -> LossBreakdown:
    """L_total = L_video + L_contra + lambda_text * L_text + lambda_align * L_align.

    ``texts[i]`` is the reference that sample i is trained towards; it is both
    the auto-encoder input and the LM target of both branches.
    """
    if len(samples) != len(texts):
        raise ContractError("one target text per sample is required")
    targets = model.tokenize(texts)
    asr_ids = model.tokenize([s.asr for s in samples])
    B = len(samples)
    # one pass of the shared text encoder over ASR and target text together
    ids, lengths = pad_batch(list(asr_ids) + list(targets), model.tokenizer.pad_id)
    hidden = model.text_encoder(ids, lengths)
    asr_len, tgt_len = lengths[:B], lengths[B:]
    r_asr = hidden[:B, :int(asr_len.max()), :]
    r_txt = hidden[B:, :int(tgt_len.max()), :]
    if model.cfg.asr_pooled:
        r_asr, asr_len = pool_asr(r_asr, asr_len)
    video = model.video_representation(samples, r_asr=(r_asr, asr_len))
    text = model.autoencoder.encode_hidden(r_txt, tgt_len)

    prompts = model.prompt(Representation(concat([video.tokens, text.tokens], axis=0)))
    l_video, l_text = _target_nll(model, prompts, targets, 2)

    if weights.use_contrastive:
        l_contra = contrastive_loss(video.contrastive_token, text.contrastive_token, weights.temperature)
    else:
        l_contra = Tensor(0.0)
    if weights.align_tokens == "all":
        l_align = alignment_loss(video.tokens, text.tokens, weights.stop_gradient_on_text)
    else:
        l_align = alignment_loss(video.content_tokens, text.content_tokens, weights.stop_gradient_on_text)

    total = add(add(l_video, l_contra), add(mul(l_text, weights.lambda_text), mul(l_align, weights.lambda_align)))
    return LossBreakdown(l_video.item(), l_contra.item(), l_text.item(), l_align.item(), total.item(), total)


def text_loss(model: CaptionModel, texts: Sequence[str]) -> Tensor:
    """Stage-1 objective: reconstruct each text from its own representation."""
    targets = model.tokenize(texts)
    rep = model.autoencoder.encode(model.text_encoder, targets)
    return model.autoencoder.reconstruction_loss(model.lm, rep, targets)


@dataclass
class SCSTOutput:
    loss: Tensor
    sampled_reward: np.ndarray
    greedy_reward: np.ndarray
    sampled: list[str]
    greedy: list[str]


def scst_loss(model: CaptionModel, samples: Sequence[VideoSample], corpus: CorpusRefs,
              item_index: Sequence[int], rng: np.random.Generator, temperature: float = 1.0,
              max_len: int = 24) -> SCSTOutput:
    """Self-critical REINFORCE: advantage = CIDEr-D(sample) - CIDEr-D(greedy).

    ``item_index[i]`` locates sample i's references inside ``corpus``.
    The greedy caption only supplies a baseline and gets no gradient.
    """
    if any(len(corpus.refs[j]) == 0 for j in item_index):
        raise ContractError("SCST needs at least one reference per item")
    prompt = model.prompt(model.video_representation(samples))
    frozen_prompt = Tensor(prompt.data)
    greedy_ids = model.lm.generate_greedy(frozen_prompt, max_len)
    sampled_ids, _, ended = model.lm.generate_sample(frozen_prompt, temperature, rng, max_len)
    greedy = model.decode(greedy_ids)
    sampled = model.decode(sampled_ids)
    r_greedy = cider_d([words(g) for g in greedy], corpus, item_index).per_item
    r_sampled = cider_d([words(s) for s in sampled], corpus, item_index).per_item
    advantage = r_sampled - r_greedy
    logprob = model.lm.sequence_logprob(prompt, sampled_ids, ended, temperature)
    loss = mul(tsum(mul(logprob, advantage)), -1.0 / len(samples))
    return SCSTOutput(loss, r_sampled, r_greedy, sampled, greedy)
