import math

import numpy as np
import pytest

import oracles
from qfcap.errors import ContractError
from qfcap.metrics import (
    CorpusRefs, bleu4, cider_d, corpus_bleu4, corpus_rouge_l, diagonal_ranks, lcs_length, read_report,
    recall_at_k, rouge_l, words, write_report,
)

WORDS = ["a", "red", "cube", "moves", "left", "the", "."]


def random_corpus(seed):
    rng = np.random.default_rng(seed)
    n_items = int(rng.integers(2, 6))
    hyps, refsets = [], []
    for _ in range(n_items):
        refs = [list(rng.choice(WORDS, size=int(rng.integers(1, 9)))) for _ in range(int(rng.integers(1, 5)))]
        refsets.append([[str(w) for w in r] for r in refs])
        if rng.random() < 0.3:
            hyps.append(list(refsets[-1][0]))
        else:
            hyps.append([str(w) for w in rng.choice(WORDS, size=int(rng.integers(1, 9)))])
    return hyps, refsets


@pytest.mark.parametrize("seed", range(20))
def test_metrics_agree_with_brute_force(seed):
    hyps, refsets = random_corpus(seed)
    assert abs(corpus_bleu4(hyps, refsets) - oracles.bleu4(hyps, refsets)) <= 1e-9
    for h, r in zip(hyps, refsets):
        assert abs(rouge_l(h, r) - oracles.rouge_l(tuple(h), [tuple(x) for x in r])) <= 1e-9
    ours = cider_d(hyps, CorpusRefs(refsets)).per_item
    ref = oracles.cider_d(hyps, refsets)
    assert np.max(np.abs(ours - np.array(ref))) <= 1e-9


def test_identity_scores_one():
    refs = ["a red cube moves left .", "the cube moves"]
    assert bleu4(refs[0], refs) == 1.0
    assert rouge_l(refs[0], refs) == 1.0
    assert corpus_bleu4(refs, [refs, refs]) == 1.0
    assert corpus_rouge_l(refs, [refs, refs]) == 1.0


def test_bleu_short_or_disjoint_is_zero():
    assert bleu4("a red", ["a red cube moves"]) == 0.0
    assert bleu4("x y z w", ["a b c d"]) == 0.0


def test_bleu_brevity_penalty_hand_value():
    hyp = "a b c d e"
    ref = "a b c d e f g h i j"
    # all n-gram precisions are 1, c=5, r=10
    assert bleu4(hyp, [ref]) == pytest.approx(math.exp(1 - 10 / 5))


def test_rouge_hand_value():
    # LCS("a b c d", "a c e") = 2, P=1/2, R=2/3
    p, r, b = 0.5, 2 / 3, 1.2
    assert rouge_l("a b c d", ["a c e"]) == pytest.approx((1 + b * b) * p * r / (r + b * b * p))
    assert lcs_length(list("abcbdab"), list("bdcaba")) == 4


def test_cider_unique_exact_match_scores_ten():
    corpus = CorpusRefs([["a red cube moves"], ["the blue ring moves"]])
    res = cider_d(["a red cube moves", "the blue ring moves"], corpus)
    assert np.allclose(res.per_item, 10.0)
    assert not res.degenerate
    # three words have no 4-grams, so the n=4 term contributes nothing
    short = CorpusRefs([["a red cube"], ["the blue ring"]])
    assert cider_d(["a red cube"], short, [0]).per_item[0] == pytest.approx(7.5)


def test_cider_words_present_everywhere_carry_no_weight():
    corpus = CorpusRefs([["a red cube"], ["a blue ring"]])
    assert cider_d(["a"], corpus, [0]).per_item[0] == 0.0


def test_cider_single_item_corpus_is_flagged():
    with pytest.warns(RuntimeWarning):
        res = cider_d(["a red cube"], CorpusRefs([["a red cube"]]))
    assert res.degenerate and res.mean == 0.0


def test_cider_item_index_maps_to_reference_sets():
    corpus = CorpusRefs([["a red cube"], ["the blue ring moves"], ["one green star"]])
    direct = cider_d(["the blue ring moves"], corpus, [1]).per_item[0]
    assert direct == pytest.approx(10.0)
    with pytest.raises(ContractError):
        cider_d(["x"], corpus, [0, 1])


def test_words_splits_trailing_stop():
    assert words("none.") == ["none", "."]
    assert words(["a", "b"]) == ["a", "b"]


@pytest.mark.parametrize("seed", range(30))
def test_recall_at_k_matches_ranking_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 9))
    # coarse integer scores force plenty of ties
    sim = rng.integers(-2, 3, size=(n, n)).astype(float) if seed % 2 else rng.normal(size=(n, n))
    for k in range(1, n + 1):
        assert recall_at_k(sim, k) == oracles.recall_at_k(sim.tolist(), k)


def test_recall_ties_break_by_index():
    sim = np.ones((3, 3))
    assert list(diagonal_ranks(sim)) == [0, 1, 2]
    assert recall_at_k(sim, 1) == pytest.approx(1 / 3)
    assert recall_at_k(np.eye(4), 1) == 1.0


def test_recall_k_out_of_range():
    with pytest.raises(ContractError):
        recall_at_k(np.eye(3), 0)
    with pytest.raises(ContractError):
        recall_at_k(np.eye(3), 4)


def test_report_roundtrip(tmp_path):
    write_report(tmp_path / "m.txt", {"CIDEr": 0.5, "n": 3, "name": "x"})
    assert read_report(tmp_path / "m.txt") == {"CIDEr": 0.5, "n": 3.0, "name": "x"}
