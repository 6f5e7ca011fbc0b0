import logging
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from deskbert.autodiff import Tensor
from deskbert.data.packing import collate, pack_sequences
from deskbert.data.sampler import CorpusExhausted
from deskbert.model.config import ConfigError, param_specs, toy_config
from deskbert.model.encoder import Encoder
from deskbert.train.optim import AdamW, clip_grad_norm, global_norm, lr_schedule
from deskbert.train.plan import LONG_MIXTURE, Stage, TrainPlan, neobert_plan, toy_plan
from deskbert.train.pretrain import (
    Optimizer,
    Pretrainer,
    no_decay_names,
    plan_from_flat,
    plan_to_flat,
    pretrain,
    train_step,
)

# ---------------------------------------------------------------- schedule

PLAN = neobert_plan()
T = PLAN.total_schedule_steps


def lr(step):
    return lr_schedule(step, T, PLAN)


def test_schedule_spot_values():
    assert lr(0) == 0.0
    assert lr(1000) == pytest.approx(3e-4, rel=1e-12)
    assert lr(2000) == pytest.approx(6e-4, rel=1e-12)
    assert lr(int(0.9 * T)) == pytest.approx(6e-5, rel=1e-12)
    assert lr(T) == lr(int(0.9 * T)) == lr(5 * T)


def test_schedule_continuity_at_joints():
    eps = 1e-6
    for joint in (2000, 0.9 * T):
        assert abs(lr(joint - eps) - lr(joint)) < 1e-9
        assert abs(lr(joint + eps) - lr(joint)) < 1e-9


@given(st.integers(0, 2 * T))
def test_schedule_bounded(step):
    assert 0.0 <= lr(step) <= PLAN.peak_lr


def test_decay_is_monotone():
    steps = np.linspace(2000, 0.9 * T, 200).astype(int)
    vals = [lr(s) for s in steps]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_linear_schedule():
    plan = toy_plan(schedule="linear")
    assert lr_schedule(20, 200, plan) == pytest.approx(2e-3)
    assert lr_schedule(110, 200, plan) == pytest.approx(1e-3)
    assert lr_schedule(200, 200, plan) == 0.0


def test_schedule_rejects_negative_step():
    with pytest.raises(ValueError):
        lr(-1)


def test_plan_validation():
    with pytest.raises(ConfigError):
        toy_plan(warmup_steps=500)
    with pytest.raises(ConfigError):
        Stage(64, 10, (0.5, 0.5, 0.5))
    with pytest.raises(ConfigError):
        toy_plan(mask_mode="diagonal")


def test_plan_flat_round_trip():
    plan = toy_plan(seed=7, mask_mode="packed-block-diagonal")
    assert plan_from_flat(plan_to_flat(plan)) == plan


# ---------------------------------------------------------------- clipping


def test_clip_below_threshold_is_identity():
    g = {"a": np.array([0.3, 0.4])}
    out, norm = clip_grad_norm(g, 1.0)
    assert norm == pytest.approx(0.5)
    np.testing.assert_array_equal(out["a"], g["a"])


def test_clip_scales_to_max_norm():
    g = {"a": np.array([3.0, 0.0]), "b": np.array([[4.0]])}
    out, norm = clip_grad_norm(g, 1.0)
    assert norm == pytest.approx(5.0)
    assert global_norm(out.values()) == pytest.approx(1.0)
    np.testing.assert_allclose(out["a"], [0.6, 0.0])


def test_clip_rejects_nonpositive():
    with pytest.raises(ValueError):
        clip_grad_norm({"a": np.ones(2)}, 0.0)


# ---------------------------------------------------------------- AdamW

# 64-bit hand oracle: theta0=0.5, grads 0.3, -0.1, 0.2, lr 1e-3,
# betas (0.9, 0.95), eps 1e-8, decoupled decay 0.1
ADAMW_TRACE = [0.49895000003333334, 0.4984957983497593, 0.4978374791553844]


def test_adamw_three_step_trace():
    p = Tensor(np.array([0.5], dtype=np.float64), requires_grad=True)
    opt = AdamW(betas=(0.9, 0.95), eps=1e-8, weight_decay=0.1)
    for g, want in zip([0.3, -0.1, 0.2], ADAMW_TRACE):
        opt.step({"w": p}, {"w": np.array([g])}, 1e-3)
        assert abs(p.data[0] - want) < 1e-7


def test_zero_gradient_gives_pure_decay():
    p = Tensor(np.array([2.0]), requires_grad=True)
    AdamW(weight_decay=0.1).step({"w": p}, {"w": np.zeros(1)}, 0.01)
    assert p.data[0] == pytest.approx(2.0 * (1 - 0.01 * 0.1), rel=1e-12)


def test_plain_adam_and_no_decay_set_skip_decay():
    for opt in (AdamW(weight_decay=0.1, decoupled=False), AdamW(weight_decay=0.1, no_decay=frozenset({"w"}))):
        p = Tensor(np.array([2.0]), requires_grad=True)
        opt.step({"w": p}, {"w": np.zeros(1)}, 0.01)
        assert p.data[0] == 2.0


def test_no_decay_names_are_norms_and_embeddings():
    cfg = toy_config(n_layers=2, d_model=16, n_heads=2, vocab_size=40, align64=False)
    names = no_decay_names(cfg)
    kinds = {s.name: s.kind for s in param_specs(cfg)}
    assert names == {n for n, k in kinds.items() if k in ("norm", "embedding")}
    assert names and not any(kinds[n] == "linear" for n in names)


# ---------------------------------------------------------------- train step


def _batch(docs, rate, seed, vocab):
    from deskbert.data.masking import mlm_corrupt

    rng = np.random.default_rng(seed)
    rows = []
    for r in pack_sequences(docs, 32, "padded"):
        inp, lab = mlm_corrupt(r.token_ids, rate, rng=rng, vocab_size=vocab)
        rows.append(r.with_labels(inp, lab))
    return collate(rows, trim=True)


def test_unlabeled_batch_is_skipped(tiny_cfg, caplog):
    model = Encoder(tiny_cfg, seed=0)
    before = {k: v.data.copy() for k, v in model.params.items()}
    opt = Optimizer.for_model(model, toy_plan())
    with caplog.at_level(logging.WARNING):
        assert train_step(model, _batch([[5, 6, 7]], 0.0, 0, 40), opt) is None
    assert opt.step == 0
    assert "no labeled" in caplog.text
    for k, v in model.params.items():
        np.testing.assert_array_equal(v.data, before[k])


def test_train_step_is_deterministic(tiny_cfg):
    docs = [[5 + (i * 7 + j) % 30 for j in range(20)] for i in range(4)]
    runs = []
    for _ in range(2):
        model = Encoder(tiny_cfg, seed=0)
        opt = Optimizer.for_model(model, toy_plan())
        losses = [train_step(model, _batch(docs, 0.3, s, 40), opt) for s in range(3)]
        runs.append((losses, {k: v.data.copy() for k, v in model.params.items()}))
    assert runs[0][0] == runs[1][0]
    for k in runs[0][1]:
        np.testing.assert_array_equal(runs[0][1][k], runs[1][1][k])


def test_loss_falls_on_memorizable_corpus(tiny_cfg):
    docs = [[5 + (i * 3 + j) % 30 for j in range(24)] for i in range(4)]
    model = Encoder(tiny_cfg, seed=0)
    opt = Optimizer.for_model(model, toy_plan(peak_lr=1e-2, warmup_steps=5, stages=(Stage(64, 200),)))
    losses = [train_step(model, _batch(docs, 0.3, s, 40), opt) for s in range(200)]
    assert np.mean(losses[-20:]) < 0.6 * np.mean(losses[:5])


# ---------------------------------------------------------------- pretrain loop


def _plan(**kw):
    base = dict(
        peak_lr=2e-3,
        warmup_steps=2,
        batch_tokens=256,
        long_thresholds=(64, 128),
        stages=(Stage(64, 6), Stage(256, 3, LONG_MIXTURE)),
        seed=5,
    )
    base.update(kw)
    return TrainPlan(**base)


@pytest.fixture
def small_cfg(topic_tok):
    return toy_config(n_layers=1, d_model=16, n_heads=2, vocab_size=len(topic_tok), max_positions=256, align64=False)


def test_single_stage_positions_stay_short(small_cfg, topic_docs):
    plan = _plan(stages=(Stage(64, 4),))
    res = pretrain(small_cfg, topic_docs, plan)
    assert len(res.losses) == 4
    assert all(b.max_position < 64 for b in res.batch_log)


def test_stage_two_sees_long_sequences(small_cfg, topic_docs):
    res = pretrain(small_cfg, topic_docs, _plan())
    stage2 = [b for b in res.batch_log if b.stage == 1]
    assert len(stage2) == 3
    assert max(b.longest for b in stage2) > 64
    assert [c.step for c in res.checkpoints] == [6, 9]


def test_resume_replays_loss_trace_bit_exactly(small_cfg, topic_docs, tmp_path):
    plan = _plan()
    full = pretrain(small_cfg, topic_docs, plan, out_dir=tmp_path)
    first = full.checkpoints[0].path
    assert first.name == "ckpt_stage0_step0000006.nbkt"
    trainer = Pretrainer.resume(first, topic_docs)
    trainer.run()
    assert trainer.losses == full.losses[6:]
    for k, v in full.model.params.items():
        np.testing.assert_array_equal(trainer.model.params[k].data, v.data)


def test_same_seed_gives_identical_checkpoints(small_cfg, topic_docs, tmp_path):
    a = pretrain(small_cfg, topic_docs, _plan(), out_dir=tmp_path / "a")
    b = pretrain(small_cfg, topic_docs, _plan(), out_dir=tmp_path / "b")
    for ca, cb in zip(a.checkpoints, b.checkpoints):
        assert ca.path.read_bytes() == cb.path.read_bytes()


def test_prefetch_matches_serial(small_cfg, topic_docs):
    a = pretrain(small_cfg, topic_docs, _plan())
    b = pretrain(small_cfg, topic_docs, _plan(), prefetch=2)
    assert a.losses == b.losses


def test_packed_modes_fill_rows(small_cfg, topic_docs):
    res = pretrain(small_cfg, topic_docs, _plan(mask_mode="packed-block-diagonal", warmup_steps=1, stages=(Stage(64, 2),)))
    assert all(b.rows == 4 for b in res.batch_log)


def test_exhausted_corpus_raises(small_cfg, topic_docs):
    plan = _plan(cycle=False, stages=(Stage(64, 50),))
    with pytest.raises(CorpusExhausted):
        pretrain(small_cfg, topic_docs[:10], plan)


def test_step_past_plan_raises(small_cfg, topic_docs):
    trainer = Pretrainer(Encoder(small_cfg), _plan(), topic_docs)
    with pytest.raises(IndexError):
        trainer.stage_at(9)
    assert math.isclose(trainer.opt.lr(), 0.0)
