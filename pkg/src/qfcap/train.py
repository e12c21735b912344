"""Three-stage training, SCST fine-tuning, evaluation and the ablation harness.

Stage 1 trains the text auto-encoder alone. Stages 2 and 3 run the full
multimodal loss through one function and differ only in their data. The
vision encoder and the LM are frozen throughout; every phase snapshots them
first and checks them bit-for-bit at the end.
"""
from __future__ import annotations

import itertools
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import Config, LossConfig, SCSTConfig, StageConfig
from .data import (
    NONE_ASR, Tokenizer, VideoSample, generate_items, load_jsonl, sentence_corpus, split_counts,
)
from .errors import ContractError, FrozenParameterDrift
from .lm import pretrain_lm
from .metrics import (
    CorpusRefs, cider_d, corpus_bleu4, corpus_rouge_l, cosine_similarity_matrix, recall_at_k,
    write_report,
)
from .model import FROZEN_GROUPS, STAGE_GROUPS, CaptionModel, blank_asr
from .nn import frozen_drift, snapshot
from .objectives import LossBreakdown, scst_loss, text_loss, total_loss
from .tensor import AdamState, adam_step, backward, clip_grad_norm, no_grad

log = logging.getLogger("qfcap.train")


# ---------------------------------------------------------------------------
# model construction
# ---------------------------------------------------------------------------

_LM_CACHE: dict[str, dict[str, np.ndarray]] = {}


def lm_corpus(cfg: Config, tokenizer: Tokenizer, n_items: int = 600) -> list[list[int]]:
    """Captions and summaries of a world sample drawn with the LM seed (never the training data)."""
    items = generate_items(cfg.lm_seed + 7919, n_items)
    texts = sentence_corpus(items, "captions") + sentence_corpus(items, "summaries")
    return [tokenizer.tokenize(t) for t in texts]


def _lm_key(cfg: Config, tokenizer: Tokenizer) -> str:
    m = cfg.model
    dims = (m.lm_width, m.lm_heads, m.lm_layers, m.lm_max_len, m.content_queries)
    return json.dumps([cfg.lm_seed, dims, vars(cfg.lm_pretrain), tokenizer.words])


def build_model(cfg: Config, tokenizer: Tokenizer | None = None, pretrain: bool = True) -> CaptionModel:
    """Fresh model for ``cfg.seed``; the LM is pretrained once per LM seed and reused.

    The LM and vision encoder depend only on ``cfg.lm_seed``, so twin runs
    across seeds share identical frozen backbones.
    """
    tokenizer = tokenizer or Tokenizer.from_world()
    model = CaptionModel(cfg.model, tokenizer, seed=cfg.seed, backbone_seed=cfg.lm_seed)
    if not pretrain:
        model.lm.freeze()
        return model
    key = _lm_key(cfg, tokenizer)
    if key not in _LM_CACHE:
        t0 = time.time()
        pretrain_lm(model.lm, lm_corpus(cfg, tokenizer), cfg.model.content_queries,
                    cfg.lm_pretrain.steps, cfg.lm_pretrain.batch_size, cfg.lm_pretrain.lr,
                    seed=cfg.lm_seed)
        log.info("LM pretrained in %.1fs", time.time() - t0)
        _LM_CACHE[key] = {n: p.data.copy() for n, p in model.lm.named_parameters()}
    for n, p in model.lm.named_parameters():
        p.data[...] = _LM_CACHE[key][n]
    model.lm.freeze()
    return model


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

@dataclass
class StageSpec:
    stage: int
    items: Sequence[VideoSample]
    steps: int
    batch_size: int = 16
    lr: float = 3e-4
    warmup: int = 100
    clip: float = 1.0
    target: str = "captions"
    blank_asr: bool = False
    corpus_limit: int | None = None
    weights: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ContractError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.steps < 0 or self.batch_size < 1:
            raise ContractError("steps must be >= 0 and batch_size >= 1")
        if self.target not in ("captions", "summaries"):
            raise ContractError(f"unknown target {self.target!r}")

    @property
    def groups(self):
        return STAGE_GROUPS[self.stage]

    @classmethod
    def from_config(cls, sc: StageConfig, items: Sequence[VideoSample], weights: LossConfig) -> "StageSpec":
        return cls(sc.stage, items, sc.steps, sc.batch_size, sc.lr, sc.warmup, sc.clip, sc.target,
                   sc.blank_asr, sc.corpus_limit, weights)


@dataclass
class StageResult:
    stage: int
    log: list[dict]
    optimizer: AdamState
    seconds: float

    @property
    def final_loss(self) -> float:
        return self.log[-1]["L_total"] if self.log else float("nan")


def warmup_lr(base: float, step: int, warmup: int) -> float:
    return base * min(1.0, (step + 1) / warmup) if warmup > 0 else base


def _frozen_snapshots(model: CaptionModel) -> dict:
    return {g: snapshot(getattr(model, g)) for g in FROZEN_GROUPS}


def check_frozen(model: CaptionModel, snaps: dict) -> None:
    """Raise :class:`FrozenParameterDrift` naming the first backbone parameter that moved."""
    for group, snap in snaps.items():
        drift = frozen_drift(getattr(model, group), snap)
        if drift:
            raise FrozenParameterDrift(f"{group}.{drift[0]}")


class _Batches:
    """Reshuffle-per-epoch index stream."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n < 1:
            raise ContractError("cannot train on an empty dataset")
        self.n, self.bs, self.rng = n, min(batch_size, n), rng
        self.order = rng.permutation(n)
        self.cursor = 0

    def next(self) -> np.ndarray:
        if self.cursor + self.bs > self.n:
            self.order = self.rng.permutation(self.n)
            self.cursor = 0
        idx = self.order[self.cursor:self.cursor + self.bs]
        self.cursor += self.bs
        return idx


def _optimise(model: CaptionModel, spec: StageSpec, phase, seed: int,
              loss_fn: Callable[[np.random.Generator], LossBreakdown],
              on_step: Callable[[dict], None] | None) -> StageResult:
    named = model.trainable_for(phase)
    params = [p for _, p in named]
    opt = AdamState.create(params, lr=spec.lr)
    snaps = _frozen_snapshots(model)
    rng = np.random.default_rng([seed, spec.stage, 17])
    records = []
    t0 = time.time()
    for step in range(spec.steps):
        bd = loss_fn(rng)
        backward(bd.total)
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        clip_grad_norm(params, spec.clip)
        opt.lr = warmup_lr(spec.lr, step, spec.warmup)
        adam_step(params, opt)
        rec = {"step": step, **bd.as_record()}
        records.append(rec)
        if on_step is not None:
            on_step(rec)
    check_frozen(model, snaps)
    return StageResult(spec.stage, records, opt, time.time() - t0)


def _text_stage(model: CaptionModel, spec: StageSpec, seed: int, on_step=None) -> StageResult:
    corpus = sentence_corpus(spec.items, spec.target, spec.corpus_limit)
    stream = None

    def loss_fn(rng):
        nonlocal stream
        stream = stream or _Batches(len(corpus), spec.batch_size, rng)
        loss = text_loss(model, [corpus[i] for i in stream.next()])
        v = loss.item()
        return LossBreakdown(0.0, 0.0, v, 0.0, v, loss)

    return _optimise(model, spec, 1, seed, loss_fn, on_step)


def _video_stage(model: CaptionModel, spec: StageSpec, seed: int, on_step=None) -> StageResult:
    items = blank_asr(spec.items) if spec.blank_asr else list(spec.items)
    stream = None

    def loss_fn(rng):
        nonlocal stream
        stream = stream or _Batches(len(items), spec.batch_size, rng)
        batch = [items[i] for i in stream.next()]
        texts = []
        for s in batch:
            refs = s.references(spec.target)
            texts.append(refs[int(rng.integers(len(refs)))])
        return total_loss(model, batch, texts, spec.weights)

    return _optimise(model, spec, spec.stage, seed, loss_fn, on_step)


# stage 3 is stage 2 on different data
STAGE_RUNNERS = {1: _text_stage, 2: _video_stage, 3: _video_stage}


def run_stage(spec: StageSpec, model: CaptionModel, seed: int = 0,
              on_step: Callable[[dict], None] | None = None) -> StageResult:
    return STAGE_RUNNERS[spec.stage](model, spec, seed, on_step)


# ---------------------------------------------------------------------------
# SCST
# ---------------------------------------------------------------------------

@dataclass
class SCSTResult:
    log: list[dict]
    optimizer: AdamState

    @property
    def sampled_reward(self) -> np.ndarray:
        return np.array([r["sampled_reward"] for r in self.log])

    @property
    def greedy_reward(self) -> np.ndarray:
        return np.array([r["greedy_reward"] for r in self.log])


def run_scst(model: CaptionModel, items: Sequence[VideoSample], sc: SCSTConfig, seed: int = 0,
             target: str = "captions", fixed_batch: bool = False, clip: float = 1.0,
             corpus: CorpusRefs | None = None, on_step=None) -> SCSTResult:
    """CIDEr-D self-critical fine-tuning.

    With ``fixed_batch`` the first ``sc.batch_size`` items form every batch.
    Document frequencies come from ``corpus`` (default: the references of
    ``items``), which must list items in the same order.
    """
    items = list(items)
    corpus = corpus or CorpusRefs([s.references(target) for s in items])
    if len(corpus) != len(items):
        raise ContractError("corpus must hold one reference set per item")
    params = [p for _, p in model.trainable_for("scst")]
    opt = AdamState.create(params, lr=sc.lr)
    snaps = _frozen_snapshots(model)
    rng = np.random.default_rng([seed, 4, 17])
    stream = _Batches(len(items), sc.batch_size, rng)
    records = []
    for step in range(sc.steps):
        idx = np.arange(min(sc.batch_size, len(items))) if fixed_batch else stream.next()
        out = scst_loss(model, [items[i] for i in idx], corpus, idx, rng, sc.temperature, sc.max_len)
        backward(out.loss)
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        clip_grad_norm(params, clip)
        adam_step(params, opt)
        rec = {"step": step, "loss": out.loss.item(), "sampled_reward": float(out.sampled_reward.mean()),
               "greedy_reward": float(out.greedy_reward.mean())}
        records.append(rec)
        if on_step is not None:
            on_step(rec)
    check_frozen(model, snaps)
    return SCSTResult(records, opt)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate_captions(model: CaptionModel, items: Sequence[VideoSample], target: str = "captions",
                      max_len: int = 24, asr_override: str | None = None,
                      subset: Sequence[int] | None = None) -> dict:
    """BLEU-4, ROUGE-L and CIDEr-D of greedy captions.

    IDF statistics always come from the whole of ``items``; ``subset``
    restricts which items are captioned and averaged.
    """
    items = list(items)
    corpus = CorpusRefs([s.references(target) for s in items])
    idx = list(range(len(items))) if subset is None else list(subset)
    hyps = model.caption([items[i] for i in idx], max_len, asr_override)
    refs = [items[i].references(target) for i in idx]
    return {
        "BLEU4": corpus_bleu4(hyps, refs),
        "ROUGE_L": corpus_rouge_l(hyps, refs),
        "CIDEr": cider_d(hyps, corpus, idx).mean,
        "n": len(idx),
    }


def retrieval_embeddings(model: CaptionModel, items: Sequence[VideoSample], batch_size: int = 64,
                         asr_override: str | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Contrastive-token embeddings of every video and of its first caption."""
    v, t = [], []
    with no_grad():
        for i in range(0, len(items), batch_size):
            chunk = list(items[i:i + batch_size])
            v.append(model.video_representation(chunk, asr_override).contrastive_token.data)
            t.append(model.text_representation([s.captions[0] for s in chunk]).contrastive_token.data)
    return np.concatenate(v), np.concatenate(t)


def evaluate_retrieval(model: CaptionModel, items: Sequence[VideoSample], ks=(1, 5, 10),
                       asr_override: str | None = None) -> dict:
    v, t = retrieval_embeddings(model, items, asr_override=asr_override)
    sim_t2v = cosine_similarity_matrix(t, v)
    out = {}
    for k in ks:
        k_eff = min(k, len(items))
        out[f"t2v_R@{k}"] = recall_at_k(sim_t2v, k_eff)
        out[f"v2t_R@{k}"] = recall_at_k(sim_t2v.T, k_eff)
    return out


def roundtrip_accuracy(model: CaptionModel, sentences: Sequence[str], max_len: int = 24) -> float:
    """Mean positional token agreement between each sentence and its reconstruction.

    Per sentence: matching positions / max(len(reference), len(decoded)), so
    both truncation and run-on output count against it.
    """
    ref = model.tokenize(sentences)
    dec = model.reconstruct(list(sentences), max_len)
    acc = []
    for r, d in zip(ref, dec):
        hits = sum(a == b for a, b in zip(r, d))
        acc.append(hits / max(len(r), len(d)))
    return float(np.mean(acc))


# ---------------------------------------------------------------------------
# data helpers
# ---------------------------------------------------------------------------

@dataclass
class Splits:
    pretrain: list[VideoSample]
    finetune: list[VideoSample]
    test: list[VideoSample]

    @classmethod
    def from_items(cls, items: Sequence[VideoSample], ratios=(0.8, 0.1, 0.1)) -> "Splits":
        a, b, _ = split_counts(len(items), ratios)
        items = list(items)
        return cls(items[:a], items[a:a + b], items[a + b:])

    @classmethod
    def generate(cls, seed: int, n_items: int, ratios=(0.8, 0.1, 0.1)) -> "Splits":
        return cls.from_items(generate_items(seed, n_items), ratios)

    @classmethod
    def load(cls, data_dir) -> "Splits":
        d = Path(data_dir)
        return cls(*(load_jsonl(d / f"{s}.jsonl")[1] for s in ("pretrain", "finetune", "test")))


def informative_indices(items: Sequence[VideoSample]) -> list[int]:
    return [i for i, s in enumerate(items) if s.informative]


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

@dataclass
class PipelineResult:
    model: CaptionModel
    stages: dict
    metrics: dict


def train_stages(cfg: Config, splits: Splits, model: CaptionModel | None = None,
                 stages=(1, 2, 3), on_step=None, on_stage_end=None) -> tuple[CaptionModel, dict]:
    model = model or build_model(cfg)
    data = {1: splits.pretrain, 2: splits.pretrain, 3: splits.finetune}
    results = {}
    for k in stages:
        spec = StageSpec.from_config(cfg.stage(k), data[k], cfg.loss)
        results[k] = run_stage(spec, model, cfg.seed, on_step)
        log.info("stage %d: %d steps in %.1fs, final L_total %.4f", k, spec.steps,
                 results[k].seconds, results[k].final_loss)
        if on_stage_end is not None:
            on_stage_end(k, model, results[k])
    return model, results


def evaluate_all(cfg: Config, model: CaptionModel, test: Sequence[VideoSample],
                 asr_override: str | None = None) -> dict:
    metrics = evaluate_captions(model, test, "captions", cfg.caption_max_len, asr_override)
    metrics.update(evaluate_retrieval(model, test, asr_override=asr_override))
    return metrics


def run_pipeline(cfg: Config, splits: Splits, out_dir=None, scst: bool = False) -> PipelineResult:
    """LM pretraining, stages 1-3, optional SCST, then test-split evaluation.

    With ``out_dir`` every stage checkpoint, the training logs, the effective
    config and the metric report are written there.
    """
    from .checkpoint import save_checkpoint
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.json")

    def stage_end(k, model, res):
        if out is not None:
            save_checkpoint(out / f"stage{k}.ckpt", model, cfg, stage=k, step=len(res.log),
                            optimizer=res.optimizer)
            write_log(out / f"stage{k}.log.jsonl", res.log)

    model, stages = train_stages(cfg, splits, on_stage_end=stage_end)
    if scst:
        res = run_scst(model, splits.finetune, cfg.scst, cfg.seed)
        stages["scst"] = res
        if out is not None:
            save_checkpoint(out / "scst.ckpt", model, cfg, stage=4, step=len(res.log), optimizer=res.optimizer)
            write_log(out / "scst.log.jsonl", res.log)
    metrics = evaluate_all(cfg, model, splits.test)
    if out is not None:
        write_report(out / "metrics.txt", metrics)
    return PipelineResult(model, stages, metrics)


def write_log(path, records: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

TOGGLES = ("align", "contrastive", "asr")
TABLE_COLUMNS = ("cell", "seed", "B@4", "R", "C", "R@1", "R@5", "R@10")


def ablation_cells(toggles: Sequence[str] = TOGGLES) -> list[dict[str, bool]]:
    """Every on/off combination of ``toggles``; the all-on cell comes first."""
    for t in toggles:
        if t not in TOGGLES:
            raise ContractError(f"unknown ablation toggle {t!r}")
    return [dict(zip(toggles, bits)) for bits in itertools.product((True, False), repeat=len(toggles))]


def cell_name(cell: dict[str, bool]) -> str:
    off = [k for k in TOGGLES if k in cell and not cell[k]]
    return "full" if not off else "w/o " + "+".join({"align": "A", "contrastive": "C", "asr": "ASR"}[k]
                                                     for k in off)


def cell_config(cfg: Config, cell: dict[str, bool], seed: int) -> Config:
    over = {"seed": seed}
    if not cell.get("align", True):
        over["loss.lambda_align"] = 0.0
    if not cell.get("contrastive", True):
        over["loss.use_contrastive"] = False
    if not cell.get("asr", True):
        over["stage2.blank_asr"] = True
        over["stage3.blank_asr"] = True
    return cfg.with_overrides(over)


@dataclass
class AblationRun:
    cell: dict
    seed: int
    metrics: dict
    model: CaptionModel | None = field(default=None, repr=False)


@dataclass
class AblationResult:
    runs: list[AblationRun]

    def rows(self) -> list[dict]:
        out = []
        for r in self.runs:
            m = r.metrics
            out.append({"cell": cell_name(r.cell), "seed": r.seed, "B@4": m["BLEU4"], "R": m["ROUGE_L"],
                        "C": m["CIDEr"], "R@1": m["t2v_R@1"], "R@5": m["t2v_R@5"], "R@10": m["t2v_R@10"]})
        return out

    def table(self) -> str:
        lines = ["\t".join(TABLE_COLUMNS)]
        for row in self.rows():
            lines.append("\t".join(str(row[c]) if c in ("cell", "seed") else f"{100 * row[c]:.2f}"
                                   for c in TABLE_COLUMNS))
        return "\n".join(lines) + "\n"


def run_ablation(cfg: Config, splits: Splits, seeds: Sequence[int], cells: Sequence[dict] | None = None,
                 keep_models: bool = False, on_run=None) -> AblationResult:
    """Train and evaluate every cell for every seed.

    Stage 1 does not depend on any toggle, so it runs once per seed and each
    cell continues from a copy of that state. A w/o-ASR cell is trained and
    evaluated with every ASR replaced by "none.".
    """
    cells = list(cells) if cells is not None else ablation_cells()
    runs = []
    for seed in seeds:
        base_cfg = cfg.with_overrides({"seed": seed})
        base, _ = train_stages(base_cfg, splits, stages=(1,))
        stage1_state = base.state_dict()
        for cell in cells:
            ccfg = cell_config(cfg, cell, seed)
            model = build_model(ccfg)
            model.load_state_dict(stage1_state)
            model, _ = train_stages(ccfg, splits, model=model, stages=(2, 3))
            override = None if cell.get("asr", True) else NONE_ASR
            metrics = evaluate_all(ccfg, model, splits.test, override)
            run = AblationRun(cell, seed, metrics, model if keep_models else None)
            runs.append(run)
            if on_run is not None:
                on_run(run)
    return AblationResult(runs)


# ---------------------------------------------------------------------------
# gradient check of the full objective
# ---------------------------------------------------------------------------

def gradcheck_total_loss(cfg: Config, batch_size: int = 3, entries_per_param: int | None = 3,
                         eps: float = 1e-5, tolerance: float = 1e-4, floor: float = 1e-5, seed: int = 0):
    """Finite-difference check of d L_total / d theta for every stage-2 trainable tensor.

    The LM is left at its random init (it is frozen, so its values only
    shape the function being differentiated, not what is checked).
    Key biases have an exact zero gradient (softmax ignores a per-query
    shift), so their finite differences are pure rounding noise around
    1e-10; ``floor`` keeps that noise out of the relative error.
    """
    from .tensor import gradient_check
    model = build_model(cfg, pretrain=False)
    items = generate_items(seed, batch_size)
    texts = [s.captions[0] for s in items]
    named = model.trainable_for(2)

    def closure():
        return total_loss(model, items, texts, cfg.loss).total

    return gradient_check(closure, [p for _, p in named], eps=eps, tolerance=tolerance,
                          entries_per_param=entries_per_param, floor=floor, seed=seed,
                          names=[n for n, _ in named])
