"""Caption metrics (BLEU-4, ROUGE-L, CIDEr-D) and retrieval recall@k.

Text inputs are tokenised with the dataset tokenizer's word splitting, so
``"none."`` is two tokens here exactly as it is for the model.
"""
from __future__ import annotations

import math
import warnings
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import _split_words
from .errors import ContractError


def words(text) -> list[str]:
    return list(text) if not isinstance(text, str) else _split_words(text)


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def all_ngrams(tokens: Sequence[str], max_n: int = 4) -> Counter:
    out: Counter = Counter()
    for n in range(1, max_n + 1):
        out.update(ngrams(tokens, n))
    return out


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------

def corpus_bleu4(hypotheses: Sequence, references: Sequence[Sequence]) -> float:
    """Corpus BLEU-4: clipped n-gram precisions pooled over items, closest-length brevity penalty.

    No smoothing: any order with zero matches gives 0.
    """
    if len(hypotheses) != len(references):
        raise ContractError("one reference set per hypothesis")
    matched = np.zeros(4)
    total = np.zeros(4)
    hyp_len = ref_len = 0
    for hyp, refs in zip(hypotheses, references):
        hyp = words(hyp)
        refs = [words(r) for r in refs]
        if not refs:
            raise ContractError("every hypothesis needs at least one reference")
        hyp_len += len(hyp)
        # closest reference length, ties to the shorter one
        ref_len += min((abs(len(r) - len(hyp)), len(r)) for r in refs)[1]
        for n in range(1, 5):
            h = ngrams(hyp, n)
            best: Counter = Counter()
            for r in refs:
                best |= ngrams(r, n)
            matched[n - 1] += sum(min(c, best[g]) for g, c in h.items())
            total[n - 1] += max(len(hyp) - n + 1, 0)
    if hyp_len == 0 or (matched == 0).any():
        return 0.0
    log_p = np.log(matched / total).mean()
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return float(bp * math.exp(log_p))


def bleu4(hypothesis, references: Sequence) -> float:
    return corpus_bleu4([hypothesis], [references])


# ---------------------------------------------------------------------------
# ROUGE-L
# ---------------------------------------------------------------------------

def lcs_length(a: Sequence, b: Sequence) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(hypothesis, references: Sequence, beta: float = 1.2) -> float:
    """LCS F-measure against the best-scoring reference."""
    hyp = words(hypothesis)
    best = 0.0
    for ref in references:
        ref = words(ref)
        lcs = lcs_length(hyp, ref)
        if lcs == 0:
            continue
        p, r = lcs / len(hyp), lcs / len(ref)
        best = max(best, (1 + beta ** 2) * p * r / (r + beta ** 2 * p))
    return best


def corpus_rouge_l(hypotheses: Sequence, references: Sequence[Sequence], beta: float = 1.2) -> float:
    if not hypotheses:
        return 0.0
    return float(np.mean([rouge_l(h, r, beta) for h, r in zip(hypotheses, references)]))


# ---------------------------------------------------------------------------
# CIDEr-D
# ---------------------------------------------------------------------------

class CorpusRefs:
    """Reference sets of an evaluation corpus plus their n-gram document frequencies."""

    def __init__(self, references: Sequence[Sequence], max_n: int = 4):
        self.refs = [[words(r) for r in refs] for refs in references]
        if any(len(r) == 0 for r in self.refs):
            raise ContractError("every item needs at least one reference")
        self.max_n = max_n
        self.document_frequency: Counter = Counter()
        for refs in self.refs:
            seen = set()
            for r in refs:
                seen.update(all_ngrams(r, max_n))
            self.document_frequency.update(seen)
        self.log_n = math.log(float(len(self.refs))) if self.refs else 0.0
        self._ref_vecs = [[self._vec(r) for r in refs] for refs in self.refs]

    def __len__(self):
        return len(self.refs)

    def _vec(self, tokens):
        vec = [dict() for _ in range(self.max_n)]
        norm = np.zeros(self.max_n)
        for g, tf in all_ngrams(tokens, self.max_n).items():
            n = len(g) - 1
            w = tf * (self.log_n - math.log(max(1.0, self.document_frequency[g])))
            vec[n][g] = w
            norm[n] += w * w
        return vec, np.sqrt(norm), len(tokens)


@dataclass
class CiderScores:
    mean: float
    per_item: np.ndarray
    degenerate: bool = False


def _cider_sim(h, r, max_n: int, sigma: float) -> np.ndarray:
    vh, nh, lh = h
    vr, nr, lr = r
    val = np.zeros(max_n)
    for n in range(max_n):
        ref_n = vr[n]
        acc = 0.0
        for g, w in vh[n].items():
            wr = ref_n.get(g)
            if wr is not None:
                acc += min(w, wr) * wr
        if nh[n] != 0 and nr[n] != 0:
            acc /= nh[n] * nr[n]
        val[n] = acc * math.exp(-((lh - lr) ** 2) / (2 * sigma ** 2))
    return val


def cider_d(hypotheses: Sequence, corpus: CorpusRefs, item_index: Sequence[int] | None = None,
            sigma: float = 6.0) -> CiderScores:
    """CIDEr-D per item: clipped TF-IDF n-gram cosine (n=1..4), Gaussian length penalty, x10.

    ``item_index[i]`` maps hypothesis i to its reference set (default: position i).
    A one-item corpus has zero IDF everywhere; every score is then 0 and
    ``degenerate`` is set.
    """
    if item_index is None:
        item_index = range(len(hypotheses))
    item_index = list(item_index)
    if len(item_index) != len(hypotheses):
        raise ContractError("item_index must have one entry per hypothesis")
    degenerate = len(corpus) <= 1
    if degenerate:
        warnings.warn("CIDEr-D over a single-item corpus: all IDF weights are zero", RuntimeWarning)
    scores = np.zeros(len(hypotheses))
    for i, (hyp, j) in enumerate(zip(hypotheses, item_index)):
        hv = corpus._vec(words(hyp))
        acc = np.zeros(corpus.max_n)
        for rv in corpus._ref_vecs[j]:
            acc += _cider_sim(hv, rv, corpus.max_n, sigma)
        scores[i] = acc.mean() / len(corpus._ref_vecs[j]) * 10.0
    return CiderScores(float(scores.mean()) if len(scores) else 0.0, scores, degenerate)


# ---------------------------------------------------------------------------
# retrieval
# ---------------------------------------------------------------------------

def cosine_similarity_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = a / np.maximum(np.linalg.norm(a, axis=-1, keepdims=True), 1e-12)
    b = b / np.maximum(np.linalg.norm(b, axis=-1, keepdims=True), 1e-12)
    return np.clip(a @ b.T, -1.0, 1.0)


def diagonal_ranks(sim: np.ndarray) -> np.ndarray:
    """0-based rank of each row's diagonal entry; equal scores rank by column index."""
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ContractError(f"similarity matrix must be square, got {sim.shape}")
    diag = np.diag(sim)[:, None]
    cols = np.arange(sim.shape[1])[None, :]
    rows = np.arange(sim.shape[0])[:, None]
    ahead = (sim > diag) | ((sim == diag) & (cols < rows))
    return ahead.sum(axis=1)


def recall_at_k(sim: np.ndarray, k: int) -> float:
    """Fraction of rows whose ground-truth (diagonal) column ranks in the top k."""
    n = np.asarray(sim).shape[0]
    if not 1 <= k <= n:
        raise ContractError(f"k must lie in [1, {n}], got {k}")
    return float((diagonal_ranks(sim) < k).mean())


def write_report(path, metrics: dict) -> None:
    """Flat ``key = value`` text report, keys sorted."""
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(metrics):
            value = metrics[key]
            fh.write(f"{key} = {value:.6f}\n" if isinstance(value, float) else f"{key} = {value}\n")


def read_report(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if "=" in line:
                k, v = line.split("=", 1)
                v = v.strip()
                try:
                    out[k.strip()] = float(v)
                except ValueError:
                    out[k.strip()] = v
    return out
