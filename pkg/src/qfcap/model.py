"""The full captioner: frozen vision encoder and LM around the trainable fusion and auto-encoder."""
from __future__ import annotations

import hashlib
from typing import Sequence

import numpy as np

from .autoencoder import TextAutoEncoder
from .backbones import TextEncoder, VisionEncoder, pad_batch
from .config import ModelConfig
from .data import NONE_ASR, Tokenizer, VideoSample
from .errors import ContractError, ShapeError
from .fusion import Representation, VideoFusion, pool_asr
from .lm import FrozenLM
from .nn import Module, set_frozen
from .tensor import Tensor, no_grad

# parameter groups: which ones each training phase may update
GROUPS = ("vision", "text_encoder", "autoencoder", "fusion", "lm")
STAGE_GROUPS = {
    1: ("text_encoder", "autoencoder"),
    2: ("text_encoder", "autoencoder", "fusion"),
    3: ("text_encoder", "autoencoder", "fusion"),
    "scst": ("text_encoder", "autoencoder.proj", "fusion"),
}
FROZEN_GROUPS = ("vision", "lm")


class CaptionModel(Module):
    def __init__(self, cfg: ModelConfig, tokenizer: Tokenizer, seed: int = 0, backbone_seed: int = 1234):
        self.cfg = cfg
        self.tokenizer = tokenizer
        brng = np.random.default_rng([backbone_seed, 0])
        lrng = np.random.default_rng([backbone_seed, 1])
        rng = np.random.default_rng([seed, 2])
        self.vision = VisionEncoder(cfg.width, cfg.heads, cfg.vision_layers, cfg.patch, brng,
                                    cfg.channels, tuple(cfg.image_size))
        self.text_encoder = TextEncoder(len(tokenizer), cfg.encoder_width, cfg.heads, cfg.text_layers,
                                        cfg.text_max_len, rng)
        self.autoencoder = TextAutoEncoder(cfg, rng)
        self.fusion = VideoFusion(cfg, rng)
        self.lm = FrozenLM(len(tokenizer), cfg.lm_width, cfg.lm_heads, cfg.lm_layers, cfg.lm_max_len,
                           lrng, tokenizer.bos_id, tokenizer.eos_id, tokenizer.pad_id)
        if cfg.freeze_text_encoder:
            set_frozen(self.text_encoder)
        self._name_params()
        self._vision_cache: dict[bytes, np.ndarray] = {}

    # -- parameter bookkeeping -----------------------------------------
    def group_parameters(self, group: str) -> list[tuple[str, Tensor]]:
        prefix = group + "."
        return [(n, p) for n, p in self.named_parameters() if n.startswith(prefix)]

    def trainable_for(self, phase) -> list[tuple[str, Tensor]]:
        out = []
        for group in STAGE_GROUPS[phase]:
            out.extend((n, p) for n, p in self.group_parameters(group) if p.requires_grad)
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        """Copy arrays in; every key must exist with an identical shape."""
        params = {n: p for n, p in self.named_parameters() if n.startswith(prefix)}
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        diffs = [f"{n}: checkpoint {tuple(state[n].shape)} vs model {p.shape}"
                 for n, p in params.items() if n in state and tuple(state[n].shape) != p.shape]
        if missing or unexpected or diffs:
            raise ShapeError("checkpoint does not fit model: "
                             + "; ".join(diffs + [f"missing {m}" for m in missing[:5]]
                                         + [f"unexpected {u}" for u in unexpected[:5]]))
        for n, p in params.items():
            p.data[...] = state[n]

    # -- text helpers --------------------------------------------------
    def tokenize(self, texts: Sequence[str]) -> list[list[int]]:
        return [self.tokenizer.tokenize(t) for t in texts]

    def decode(self, seqs: Sequence[Sequence[int]]) -> list[str]:
        return [self.tokenizer.detokenize(s) for s in seqs]

    # -- video branch --------------------------------------------------
    def vision_features(self, frames_batch: Sequence[np.ndarray]) -> np.ndarray:
        """Frozen patch features (B, F, N_p, E); cached by frame content."""
        feats = []
        for frames in frames_batch:
            frames = np.asarray(frames, dtype=np.float64)
            key = hashlib.sha1(frames.tobytes() + str(frames.shape).encode()).digest()
            hit = self._vision_cache.get(key)
            if hit is None:
                hit = self.vision.encode(frames).data
                self._vision_cache[key] = hit
            feats.append(hit)
        shapes = {f.shape for f in feats}
        if len(shapes) != 1:
            raise ShapeError(f"videos in a batch must share frame count, got {sorted(shapes)}")
        return np.stack(feats)

    def encode_frames(self, frames) -> Tensor:
        """(F, C, H, W) -> (F*Q_i, E), or a batch (B, F, C, H, W) -> (B, F*Q_i, E)."""
        frames = np.asarray(frames, dtype=np.float64)
        single = frames.ndim == 4
        batch = [frames] if single else list(frames)
        out = self.fusion.encode_frames(self.vision_features(batch))
        return out[0] if single else out

    def encode_asr(self, asr: Sequence[str]) -> tuple[Tensor, np.ndarray]:
        ids, lengths = pad_batch(self.tokenize(asr), self.tokenizer.pad_id)
        hidden = self.text_encoder(ids, lengths)
        if self.cfg.asr_pooled:
            return pool_asr(hidden, lengths)
        return hidden, lengths

    def video_representation(self, samples: Sequence[VideoSample], asr_override: str | None = None,
                             r_asr: tuple[Tensor, np.ndarray] | None = None) -> Representation:
        r_vision = self.fusion.encode_frames(self.vision_features([s.frames for s in samples]))
        if r_asr is None:
            r_asr = self.encode_asr([asr_override if asr_override is not None else s.asr for s in samples])
        return self.fusion.fuse(r_vision, *r_asr)

    def text_representation(self, texts: Sequence[str]) -> Representation:
        return self.autoencoder.encode(self.text_encoder, self.tokenize(texts))

    def prompt(self, rep: Representation) -> Tensor:
        return self.autoencoder.prompt(rep)

    # -- generation ----------------------------------------------------
    def caption(self, samples: Sequence[VideoSample], max_len: int = 24, asr_override: str | None = None,
                batch_size: int = 64) -> list[str]:
        out = []
        with no_grad():
            for i in range(0, len(samples), batch_size):
                chunk = samples[i:i + batch_size]
                prompt = self.prompt(self.video_representation(chunk, asr_override))
                out.extend(self.decode(self.lm.generate_greedy(prompt, max_len)))
        return out

    def reconstruct(self, texts: Sequence[str], max_len: int = 24, batch_size: int = 64) -> list[list[int]]:
        out = []
        with no_grad():
            for i in range(0, len(texts), batch_size):
                prompt = self.prompt(self.text_representation(texts[i:i + batch_size]))
                out.extend(self.lm.generate_greedy(prompt, max_len))
        return out


def blank_asr(samples: Sequence[VideoSample]) -> list[VideoSample]:
    return [s.with_asr(NONE_ASR) for s in samples]
