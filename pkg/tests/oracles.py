"""Deliberately naive reference implementations used as test oracles.

They share no code with ``qfcap.metrics`` and favour the most literal
reading of each formula over speed.
"""
import math
from functools import lru_cache


def _grams(tokens, n):
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def bleu4(hyps, refsets):
    matched = [0, 0, 0, 0]
    possible = [0, 0, 0, 0]
    c = r = 0
    for hyp, refs in zip(hyps, refsets):
        c += len(hyp)
        best = None
        for ref in sorted(refs, key=len):
            if best is None or abs(len(ref) - len(hyp)) < abs(best - len(hyp)):
                best = len(ref)
        r += best
        for n in range(1, 5):
            hg = _grams(hyp, n)
            possible[n - 1] += len(hg)
            for g in set(hg):
                max_ref = max(_grams(ref, n).count(g) for ref in refs)
                matched[n - 1] += min(hg.count(g), max_ref)
    if c == 0 or 0 in matched:
        return 0.0
    prod = 1.0
    for m, p in zip(matched, possible):
        prod *= m / p
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return bp * prod ** 0.25


def rouge_l(hyp, refs, beta=1.2):
    best = 0.0
    for ref in refs:
        @lru_cache(maxsize=None)
        def lcs(i, j):
            if i == len(hyp) or j == len(ref):
                return 0
            if hyp[i] == ref[j]:
                return 1 + lcs(i + 1, j + 1)
            return max(lcs(i + 1, j), lcs(i, j + 1))

        l = lcs(0, 0)
        if l:
            prec, rec = l / len(hyp), l / len(ref)
            f = ((1 + beta * beta) * prec * rec) / (rec + beta * beta * prec)
            best = max(best, f)
    return best


def cider_d(hyps, refsets, sigma=6.0):
    N = len(refsets)
    df = {}
    for refs in refsets:
        doc = set()
        for ref in refs:
            for n in range(1, 5):
                doc.update(_grams(ref, n))
        for g in doc:
            df[g] = df.get(g, 0) + 1

    def vec(tokens, n):
        grams = _grams(tokens, n)
        return {g: grams.count(g) * (math.log(N) - math.log(max(1.0, df.get(g, 0.0)))) for g in set(grams)}

    scores = []
    for hyp, refs in zip(hyps, refsets):
        total = 0.0
        for ref in refs:
            per_n = []
            for n in range(1, 5):
                vh, vr = vec(hyp, n), vec(ref, n)
                num = 0.0
                for g in vh:
                    if g in vr:
                        num += min(vh[g], vr[g]) * vr[g]
                nh = math.sqrt(sum(x * x for x in vh.values()))
                nr = math.sqrt(sum(x * x for x in vr.values()))
                if nh != 0 and nr != 0:
                    num /= nh * nr
                per_n.append(num * math.exp(-((len(hyp) - len(ref)) ** 2) / (2 * sigma * sigma)))
            total += sum(per_n) / 4
        scores.append(10.0 * total / len(refs))
    return scores


def recall_at_k(sim, k):
    """Sort each row by (score descending, column ascending) and look for the diagonal."""
    hits = 0
    n = len(sim)
    for i in range(n):
        ranked = sorted(range(n), key=lambda j: (-sim[i][j], j))
        hits += i in ranked[:k]
    return hits / n


def info_nce(sim_matrix, temperature):
    """Symmetric InfoNCE from an explicit cosine matrix, pure Python."""
    B = len(sim_matrix)
    total = 0.0
    for i in range(B):
        row = [sim_matrix[i][j] / temperature for j in range(B)]
        col = [sim_matrix[j][i] / temperature for j in range(B)]
        total += -row[i] + math.log(sum(math.exp(x) for x in row))
        total += -col[i] + math.log(sum(math.exp(x) for x in col))
    return total / (2 * B)
