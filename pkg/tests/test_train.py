import numpy as np
import pytest

from conftest import tiny_config
from qfcap.checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from qfcap.config import Config
from qfcap.data import NONE_ASR
from qfcap.errors import ContractError, FrozenParameterDrift, IntegrityError, ShapeError
from qfcap.nn import snapshot
from qfcap.objectives import total_loss
from qfcap.tensor import AdamState, adam_step, backward, clip_grad_norm
from qfcap.train import (
    STAGE_RUNNERS, TABLE_COLUMNS, AblationResult, AblationRun, Splits, StageSpec, _video_stage,
    ablation_cells, build_model, cell_config, check_frozen, evaluate_captions, evaluate_retrieval,
    run_ablation, run_scst, run_stage, warmup_lr,
)


@pytest.fixture(scope="module")
def splits():
    return Splits.generate(0, 40)


def test_stage3_reuses_stage2_code_path():
    assert STAGE_RUNNERS[2] is STAGE_RUNNERS[3] is _video_stage
    assert STAGE_RUNNERS[1] is not _video_stage


def test_stage_spec_validation():
    with pytest.raises(ContractError):
        StageSpec(4, [], 1)
    with pytest.raises(ContractError):
        StageSpec(2, [], 1, target="poems")
    assert StageSpec(1, [], 1).groups == ("text_encoder", "autoencoder")


def test_warmup_schedule():
    assert warmup_lr(1e-3, 0, 100) == pytest.approx(1e-5)
    assert warmup_lr(1e-3, 99, 100) == pytest.approx(1e-3)
    assert warmup_lr(1e-3, 500, 100) == 1e-3


def test_stage1_leaves_video_branch_and_backbones_untouched(splits):
    cfg = tiny_config()
    model = build_model(cfg)
    before = {g: snapshot(getattr(model, g)) for g in ("fusion", "vision", "lm")}
    text_before = snapshot(model.autoencoder)
    res = run_stage(StageSpec.from_config(cfg.stage1, splits.pretrain, cfg.loss), model, 0)
    assert len(res.log) == cfg.stage1.steps
    for g, snap in before.items():
        after = snapshot(getattr(model, g))
        assert all(np.array_equal(snap[k], after[k]) for k in snap), g
    assert any(not np.array_equal(text_before[k], v) for k, v in snapshot(model.autoencoder).items())


def test_stage2_logs_align_for_both_lambda_settings(splits):
    for lam in (0.0, 1.0):
        cfg = tiny_config(**{"loss.lambda_align": lam})
        model = build_model(cfg)
        res = run_stage(StageSpec.from_config(cfg.stage2, splits.pretrain, cfg.loss), model, 0)
        rec = res.log[-1]
        assert set(rec) == {"step", "L_video", "L_contra", "L_text", "L_align", "L_total"}
        assert rec["L_align"] > 0
        extra = lam * rec["L_align"]
        assert rec["L_total"] == pytest.approx(rec["L_video"] + rec["L_contra"] + rec["L_text"] + extra)


def test_same_seed_same_final_loss(splits):
    finals = []
    for _ in range(2):
        cfg = tiny_config()
        model = build_model(cfg)
        run_stage(StageSpec.from_config(cfg.stage1, splits.pretrain, cfg.loss), model, 0)
        res = run_stage(StageSpec.from_config(cfg.stage2, splits.pretrain, cfg.loss), model, 0)
        finals.append((res.final_loss, model.state_dict()))
    assert finals[0][0] == finals[1][0]
    assert all(np.array_equal(finals[0][1][k], finals[1][1][k]) for k in finals[0][1])


def test_batch_size_one_matches_manual_step(splits):
    cfg = tiny_config(**{"stage2.batch_size": 1, "stage2.steps": 1, "stage2.warmup": 0,
                         "loss.use_contrastive": False})
    item = splits.pretrain[0]
    s = StageSpec.from_config(cfg.stage2, [item], cfg.loss)

    trained = build_model(cfg)
    res = run_stage(s, trained, seed=3)

    manual = build_model(cfg)
    rng = np.random.default_rng([3, 2, 17])
    rng.permutation(1)                                  # the batch stream's first shuffle
    text = item.captions[int(rng.integers(len(item.captions)))]
    params = [p for _, p in manual.trainable_for(2)]
    opt = AdamState.create(params, lr=cfg.stage2.lr)
    bd = total_loss(manual, [item], [text], cfg.loss)
    backward(bd.total)
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    clip_grad_norm(params, cfg.stage2.clip)
    adam_step(params, opt)
    assert res.log[0]["L_total"] == bd.L_total
    a, b = trained.state_dict(), manual.state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_frozen_drift_is_a_hard_failure_naming_the_parameter(splits):
    cfg = tiny_config()
    model = build_model(cfg)
    snaps = {g: snapshot(getattr(model, g)) for g in ("vision", "lm")}
    model.lm.ln.gain.data[0] += 1.0
    with pytest.raises(FrozenParameterDrift) as err:
        check_frozen(model, snaps)
    assert err.value.name == "lm.ln.gain"


def test_scst_runs_and_keeps_backbones(splits):
    cfg = tiny_config()
    model = build_model(cfg)
    res = run_scst(model, splits.finetune, cfg.scst, seed=0, fixed_batch=True)
    assert len(res.log) == cfg.scst.steps
    assert {"sampled_reward", "greedy_reward", "loss"} <= set(res.log[0])


def test_evaluation_outputs(splits):
    cfg = tiny_config()
    model = build_model(cfg)
    m = evaluate_captions(model, splits.test, max_len=6)
    assert set(m) == {"BLEU4", "ROUGE_L", "CIDEr", "n"} and m["n"] == len(splits.test)
    r = evaluate_retrieval(model, splits.test)
    assert 0 <= r["t2v_R@1"] <= r["t2v_R@5"] <= r["t2v_R@10"] <= 1


def test_ablation_grid_and_table(splits):
    cells = ablation_cells()
    assert len(cells) == 8 and cells[0] == {"align": True, "contrastive": True, "asr": True}
    assert len({tuple(sorted(c.items())) for c in cells}) == 8
    cfg = cell_config(Config(), {"align": False, "contrastive": False, "asr": False}, 3)
    assert cfg.seed == 3 and cfg.loss.lambda_align == 0 and not cfg.loss.use_contrastive
    assert cfg.stage2.blank_asr and cfg.stage3.blank_asr

    metrics = {"BLEU4": 0.1, "ROUGE_L": 0.2, "CIDEr": 0.3, "t2v_R@1": 0.4, "t2v_R@5": 0.5, "t2v_R@10": 0.6}
    table = AblationResult([AblationRun({"align": False}, 0, metrics)]).table()
    header, row = table.strip().split("\n")
    assert tuple(header.split("\t")) == TABLE_COLUMNS == ("cell", "seed", "B@4", "R", "C", "R@1", "R@5", "R@10")
    assert row.split("\t")[:3] == ["w/o A", "0", "10.00"]


def test_without_asr_cell_blanks_every_item(splits, monkeypatch):
    seen = []
    import qfcap.train as T
    real = T.total_loss

    def spy(model, samples, texts, weights):
        seen.extend(s.asr for s in samples)
        return real(model, samples, texts, weights)

    monkeypatch.setattr(T, "total_loss", spy)
    res = run_ablation(tiny_config(), splits, [0], cells=[{"asr": False}])
    assert seen and set(seen) == {NONE_ASR}
    assert len(res.rows()) == 1 and res.rows()[0]["cell"] == "w/o ASR"


# -- checkpoints -------------------------------------------------------------

def test_checkpoint_roundtrip_is_bit_exact(tmp_path, splits):
    cfg = tiny_config()
    model = build_model(cfg)
    res = run_stage(StageSpec.from_config(cfg.stage1, splits.pretrain, cfg.loss), model, 0)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, model, cfg, stage=1, step=4, optimizer=res.optimizer)
    loaded, ckpt = load_checkpoint(p1)
    save_checkpoint(p2, loaded, ckpt.config, stage=ckpt.stage, step=ckpt.step, optimizer=ckpt.optimizer)
    assert p1.read_bytes() == p2.read_bytes()
    assert ckpt.stage == 1 and ckpt.step == 4 and ckpt.optimizer.t == 4
    assert ckpt.config == cfg
    a, b = model.state_dict(), loaded.state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert loaded.lm.frozen


def test_checkpoint_tamper_and_version(tmp_path):
    cfg = tiny_config()
    model = build_model(cfg, pretrain=False)
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, model, cfg)
    raw = bytearray(p.read_bytes())
    raw[-5] ^= 0x01
    (tmp_path / "t.ckpt").write_bytes(bytes(raw))
    with pytest.raises(IntegrityError, match="checksum"):
        read_checkpoint(tmp_path / "t.ckpt")
    raw = bytearray(p.read_bytes())
    raw[8] = 9
    (tmp_path / "v.ckpt").write_bytes(bytes(raw))
    with pytest.raises(IntegrityError, match="version"):
        read_checkpoint(tmp_path / "v.ckpt")
    (tmp_path / "x.ckpt").write_bytes(b"hello")
    with pytest.raises(IntegrityError):
        read_checkpoint(tmp_path / "x.ckpt")


def test_checkpoint_into_mismatched_config_reports_shapes(tmp_path):
    cfg = tiny_config()
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, build_model(cfg, pretrain=False), cfg)
    other = tiny_config(**{"model.video_queries": 7})
    with pytest.raises(ShapeError, match=r"fusion\.cascaded\.queries: checkpoint \(5, 32\) vs model \(7, 32\)"):
        load_checkpoint(p, other)
