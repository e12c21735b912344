import numpy as np
import pytest

from qfcap.errors import ContractError, DegenerateInputError, ShapeError
from qfcap.lm import FrozenLM, pretrain_lm
from qfcap.tensor import Tensor, backward, parameter, tsum

V, W = 12, 16


def make_lm(seed=0, max_len=32):
    return FrozenLM(V, W, 4, 2, max_len, np.random.default_rng(seed))


def prompt(B=2, K=3, seed=1):
    return np.random.default_rng(seed).normal(size=(B, K, W))


def test_teacher_forced_loss_matches_manual_nll():
    lm = make_lm()
    p = prompt()
    targets = [[5, 6, 7], [8]]
    loss = lm.teacher_forced_loss(Tensor(p), targets).item()
    total, count = 0.0, 0
    for b, t in enumerate(targets):
        ids = np.array([[lm.bos_id] + t])
        logits = lm.logits(Tensor(p[b:b + 1]), ids).data[0, 3:]
        lp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
        out = t + [lm.eos_id]
        total -= sum(lp[i, out[i]] for i in range(len(out)))
        count += len(out)
    assert loss == pytest.approx(total / count, rel=1e-12)


def test_prompt_gradient_flows_and_lm_can_freeze():
    lm = make_lm()
    lm.freeze()
    assert lm.frozen and lm.trainable_parameters() == []
    p = parameter(prompt())
    backward(lm.teacher_forced_loss(p, [[3, 4], [5]]))
    assert p.grad is not None and np.abs(p.grad).sum() > 0
    assert all(q.grad is None for q in lm.parameters())


def test_logits_contract_errors():
    lm = make_lm(max_len=6)
    with pytest.raises(ShapeError):
        lm.logits(Tensor(np.zeros((1, 2, W + 1))), np.zeros((1, 2), int))
    with pytest.raises(ContractError):
        lm.logits(Tensor(np.zeros((1, 4, W))), np.zeros((1, 3), int))
    with pytest.raises(DegenerateInputError):
        lm.teacher_forced_loss(Tensor(np.zeros((1, 2, W))), [[]])
    with pytest.raises(ContractError):
        lm.teacher_forced_loss(Tensor(np.zeros((1, 2, W))), [[V]])


def test_greedy_never_empty_and_respects_max_len():
    lm = make_lm()
    # make <eos> overwhelmingly likely everywhere
    lm.tok.weight.data[lm.eos_id] *= 50
    out = lm.generate_greedy(Tensor(prompt()), max_len=5)
    assert all(1 <= len(s) <= 5 for s in out)
    assert all(lm.bos_id not in s and lm.pad_id not in s for s in out)
    with pytest.raises(ContractError):
        lm.generate_greedy(Tensor(prompt()), max_len=0)


def test_greedy_matches_stepwise_argmax():
    lm = make_lm(3)
    p = Tensor(prompt(B=1))
    seq = lm.generate_greedy(p, max_len=6)[0]
    ids = [lm.bos_id]
    for t in range(len(seq)):
        logits = lm.logits(p, np.array([ids])).data[0, -1] + lm._step_mask(t == 0)
        assert int(logits.argmax()) == seq[t]
        ids.append(seq[t])


def test_sampling_is_seeded_and_logprob_is_consistent():
    lm = make_lm(4)
    p = Tensor(prompt(B=3))
    a = lm.generate_sample(p, 0.8, seed=11, max_len=8)
    b = lm.generate_sample(p, 0.8, seed=11, max_len=8)
    assert a[0] == b[0] and np.array_equal(a[1], b[1])
    rescored = lm.sequence_logprob(p, a[0], a[2], temperature=0.8).data
    assert np.allclose(rescored, a[1], atol=1e-10)
    with pytest.raises(ContractError):
        lm.generate_sample(p, 0.0)


def test_pretrain_lm_learns_and_freezes():
    lm = make_lm(5)
    corpus = [[3, 4, 5], [6, 7], [3, 8, 9, 10], [11, 4]]
    losses = pretrain_lm(lm, corpus, prefix_len=2, steps=60, batch_size=4, lr=3e-3, seed=0)
    assert losses[-1] < 0.5 * losses[0]
    assert lm.frozen


def test_cached_forward_matches_full_recompute():
    lm = make_lm(6)
    p = prompt(B=2)
    ids = np.array([[lm.bos_id, 5, 7, 9], [lm.bos_id, 4, 4, 3]])
    full = lm.logits(Tensor(p), ids).data
    K = p.shape[1]
    caches = [[None, None] for _ in lm.layers]
    x = np.concatenate([p, lm.tok.weight.data[ids[:, :1]]], axis=1) + lm.pos.weight.data[:K + 1]
    steps = [lm._cached_forward(x, caches)[:, -1]]
    for t in range(1, ids.shape[1]):
        x = lm.tok.weight.data[ids[:, t:t + 1]] + lm.pos.weight.data[K + t]
        steps.append(lm._cached_forward(x, caches)[:, -1])
    cached = np.stack(steps, axis=1) @ lm.tok.weight.data.T
    assert np.allclose(cached, full[:, K:], atol=1e-12)
