"""Deterministic checkpoint files.

Layout::

    b"QFCKPT\\0\\0" | u32 version | 32-byte sha256(payload) | payload
    payload = u64 header length | JSON header | raw little-endian float64 arrays

The header lists every array (name, shape, byte offset) in a fixed order
together with the stage, step counter and config snapshot, and is written
with sorted keys, so saving the same state twice yields identical bytes.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import Config
from .data import Tokenizer
from .errors import IntegrityError, ShapeError
from .model import CaptionModel
from .tensor import AdamState

MAGIC = b"QFCKPT\0\0"
CHECKPOINT_VERSION = 1
_PREFIX = len(MAGIC) + 4 + 32


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: Config
    stage: int
    step: int
    optimizer: AdamState | None
    vocabulary: list[str]
    version: int = CHECKPOINT_VERSION


def _optimizer_arrays(opt: AdamState | None) -> tuple[dict, dict[str, np.ndarray]]:
    if opt is None:
        return {}, {}
    meta = {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps, "t": opt.t,
            "slots": len(opt.m)}
    arrays = {}
    for i, (m, v) in enumerate(zip(opt.m, opt.v)):
        arrays[f"__opt.m.{i:04d}"] = m
        arrays[f"__opt.v.{i:04d}"] = v
    return meta, arrays


def save_checkpoint(path, model: CaptionModel, cfg: Config, stage: int = 0, step: int = 0,
                    optimizer: AdamState | None = None) -> None:
    opt_meta, opt_arrays = _optimizer_arrays(optimizer)
    arrays = dict(model.state_dict())
    arrays.update(opt_arrays)
    entries = []
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format": "qfcap-checkpoint",
        "stage": int(stage),
        "step": int(step),
        "config": cfg.to_dict(),
        "vocabulary": model.tokenizer.words,
        "optimizer": opt_meta,
        "arrays": entries,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = struct.pack("<Q", len(hbytes)) + hbytes + b"".join(blobs)
    digest = hashlib.sha256(payload).digest()
    Path(path).write_bytes(MAGIC + struct.pack("<I", CHECKPOINT_VERSION) + digest + payload)


def read_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < _PREFIX + 8 or data[:len(MAGIC)] != MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack("<I", data[len(MAGIC):len(MAGIC) + 4])
    if version != CHECKPOINT_VERSION:
        raise IntegrityError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    digest = data[len(MAGIC) + 4:_PREFIX]
    payload = data[_PREFIX:]
    if hashlib.sha256(payload).digest() != digest:
        raise IntegrityError(f"{path}: checksum mismatch, file is corrupt")
    (hlen,) = struct.unpack("<Q", payload[:8])
    header = json.loads(payload[8:8 + hlen].decode("utf-8"))
    body = payload[8 + hlen:]
    arrays = {}
    for e in header["arrays"]:
        raw = body[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    opt = None
    meta = header.get("optimizer") or {}
    if meta:
        n = meta["slots"]
        opt = AdamState(lr=meta["lr"], beta1=meta["beta1"], beta2=meta["beta2"], eps=meta["eps"], t=meta["t"],
                        m=[arrays.pop(f"__opt.m.{i:04d}") for i in range(n)],
                        v=[arrays.pop(f"__opt.v.{i:04d}") for i in range(n)])
    return Checkpoint(arrays, Config.from_dict(header["config"]), header["stage"], header["step"], opt,
                      header["vocabulary"], version)


def load_checkpoint(path, cfg: Config | None = None) -> tuple[CaptionModel, Checkpoint]:
    """Rebuild the model a checkpoint was saved from.

    With ``cfg`` the model is built from that config instead, and any
    parameter whose shape disagrees is reported in a :class:`ShapeError`.
    """
    ckpt = read_checkpoint(path)
    cfg = cfg or ckpt.config
    model = CaptionModel(cfg.model, Tokenizer(ckpt.vocabulary), seed=cfg.seed, backbone_seed=cfg.lm_seed)
    model.lm.freeze()
    model.load_state_dict(ckpt.params)
    return model, ckpt


def checkpoint_config(path) -> Config:
    return read_checkpoint(path).config


__all__ = ["Checkpoint", "save_checkpoint", "read_checkpoint", "load_checkpoint", "ShapeError"]
