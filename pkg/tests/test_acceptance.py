"""End-to-end acceptance checks, one test per criterion.

Each test prints a ``[PASS]`` or ``[FAIL]`` line; the full list is repeated
in the terminal summary.
"""

import math
import time

import numpy as np
import pytest

from deskbert.ablation import cross_sequence_leakage
from deskbert.autodiff import IGNORE_INDEX, Tensor, cross_entropy, precision
from deskbert.bench import throughput_bench
from deskbert.contrastive import ContrastiveConfig, finetune_contrastive, group_by_task, info_nce, split_pairs
from deskbert.data.masking import MASK_ONLY, mlm_corrupt
from deskbert.data.packing import PackedBatch, collate, pack_sequences
from deskbert.data.sampler import LengthMixtureSampler
from deskbert.data.synthetic import paired_pattern_task, topic_markov_corpus, topic_vocabulary
from deskbert.data.tokenizer import MASK_ID, SPECIALS, Tokenizer
from deskbert.eval.pppl import pppl_curve, pseudo_perplexity, token_losses
from deskbert.eval.retrieval import pair_retrieval
from deskbert.gradcheck import grad_check
from deskbert.model.config import ffn_hidden_size, neobert_config, param_count, toy_config
from deskbert.model.encoder import Encoder
from deskbert.model.layers import attention, rms_norm, rope_apply, swiglu_ffn
from deskbert.train.optim import AdamW, lr_schedule
from deskbert.train.plan import LONG_MIXTURE, Stage, TrainPlan, neobert_plan, toy_plan
from deskbert.train.pretrain import Pretrainer, load_model, pretrain

pytestmark = pytest.mark.acceptance


# ---------------------------------------------------------------- 1


def test_gradient_integrity(criterion):
    with criterion(1, "gradient integrity over every block type") as c:
        start = time.perf_counter()
        rng = np.random.default_rng(100)
        worst = {}
        for i in range(20):
            x = Tensor(rng.normal(size=(2, 3, 8)), requires_grad=True)
            g = Tensor(rng.normal(size=8), requires_grad=True)
            w = Tensor(rng.normal(size=(2, 3, 8)))
            e = max(grad_check(lambda t: (rms_norm(t, g) * w).sum(), x), grad_check(lambda t: (rms_norm(x, t) * w).sum(), g))
            worst["rms_norm"] = max(worst.get("rms_norm", 0.0), e)

            pos = np.arange(5) + int(rng.integers(0, 50))
            q, k, v = (Tensor(rng.normal(size=(5, 2, 4)), requires_grad=True) for _ in range(3))
            mask = rng.random((5, 5)) < 0.7
            np.fill_diagonal(mask, True)

            def attn(t, which):
                args = {"q": q, "k": k, "v": v, which: t}
                return (attention(rope_apply(args["q"], pos), rope_apply(args["k"], pos), args["v"], mask) ** 2).sum()

            e = max(grad_check(lambda t, n=n: attn(t, n), {"q": q, "k": k, "v": v}[n]) for n in "qkv")
            worst["rope+attention"] = max(worst.get("rope+attention", 0.0), e)

            x2 = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
            w1, w3 = (Tensor(rng.normal(size=(6, 10)), requires_grad=True) for _ in range(2))
            w2 = Tensor(rng.normal(size=(10, 6)), requires_grad=True)
            e = max(
                grad_check(lambda t: (swiglu_ffn(t, w1, w2, w3) ** 2).sum(), x2),
                grad_check(lambda t: (swiglu_ffn(x2, t, w2, w3) ** 2).sum(), w1),
                grad_check(lambda t: (swiglu_ffn(x2, w1, t, w3) ** 2).sum(), w2),
                grad_check(lambda t: (swiglu_ffn(x2, w1, w2, t) ** 2).sum(), w3),
            )
            worst["swiglu_ffn"] = max(worst.get("swiglu_ffn", 0.0), e)

            cfg = toy_config(n_layers=2, d_model=16, n_heads=2, vocab_size=30, max_positions=16, align64=False)
            model = Encoder(cfg, seed=i)
            ids = rng.integers(5, 30, size=7)
            col = collate(PackedBatch(ids, np.arange(7), np.zeros(7), np.full(7, IGNORE_INDEX)))
            targets = np.where(rng.random(7) < 0.5, ids, IGNORE_INDEX)
            targets[0] = ids[0]

            def loss(_):
                return cross_entropy(model.mlm_logits(model.forward(col)), targets)

            names = sorted(model.params)
            picked = [names[j] for j in rng.choice(len(names), size=2, replace=False)]
            e = max(grad_check(loss, model.params[n], max_coords=8, rng=rng) for n in picked)
            worst["encoder+mlm"] = max(worst.get("encoder+mlm", 0.0), e)
        elapsed = time.perf_counter() - start
        c.detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {elapsed:.0f}s"
        assert all(v < 1e-3 for v in worst.values()), worst
        assert elapsed < 120


# ---------------------------------------------------------------- 2


def test_rope_relative_position(criterion):
    with criterion(2, "RoPE logits invariant under position shifts") as c:
        rng = np.random.default_rng(2)
        worst = 0.0
        for _ in range(10):
            q = Tensor(rng.normal(size=(12, 2, 16)))
            k = Tensor(rng.normal(size=(12, 2, 16)))
            pos = np.sort(rng.choice(200, size=12, replace=False))
            base = np.einsum("ihd,jhd->hij", rope_apply(q, pos).data, rope_apply(k, pos).data)
            for shift in (1, 7, 100):
                moved = np.einsum("ihd,jhd->hij", rope_apply(q, pos + shift).data, rope_apply(k, pos + shift).data)
                worst = max(worst, float(np.abs(moved - base).max()))
        c.detail = f"max diff {worst:.1e}"
        assert worst < 1e-5


# ---------------------------------------------------------------- 3


def test_packing_equivalence(criterion):
    with criterion(3, "block-diagonal packing equals separate forwards; naive packing leaks") as c:
        rng = np.random.default_rng(3)
        cfg = toy_config(n_layers=2, d_model=32, n_heads=4, vocab_size=60, max_positions=64, align64=False)
        model = Encoder(cfg, seed=3)
        worst, leaks = 0.0, 0
        for _ in range(50):
            docs = [rng.integers(5, 60, size=int(n)).tolist() for n in rng.integers(1, 12, size=int(rng.integers(2, 6)))]
            packed = pack_sequences(docs, 24, "packed-block-diagonal")
            out = model.hidden_states(collate(packed)).data
            for r, row in enumerate(packed):
                for s in np.unique(row.seq_ids):
                    sel = row.seq_ids == s
                    alone = model.hidden_states(collate(pack_sequences([docs[s]], len(docs[s]), "padded"))).data[0]
                    worst = max(worst, float(np.abs(out[r, : len(row)][sel] - alone).max()))
            a, b = docs[0], docs[1]
            alt = [(t - 5 + 17) % 55 + 5 for t in b]
            if cross_sequence_leakage(model, a, b, alt, "packed-naive") > 1e-4:
                leaks += 1
        c.detail = f"max diff {worst:.1e}; naive leaked on {leaks}/50 batches"
        assert worst < 1e-5
        assert leaks >= 1


# ---------------------------------------------------------------- 4


def test_schedule_spot_values(criterion):
    with criterion(4, "warmup/cosine/floor schedule spot values") as c:
        plan = neobert_plan()
        total = plan.total_schedule_steps
        end = int(0.9 * total)

        def lr(s):
            return lr_schedule(s, total, plan)

        assert lr(0) == 0.0
        assert abs(lr(2000) - 6e-4) <= 1e-12 * 6e-4
        assert abs(lr(end) - 6e-5) <= 1e-12 * 6e-5
        assert all(lr(s) == lr(end) for s in (end + 1, total, 2 * total))
        jump = max(abs(lr(j + d) - lr(j)) for j in (2000, 0.9 * total) for d in (-1e-6, 1e-6))
        c.detail = f"joint jump {jump:.1e}"
        assert jump < 1e-9


# ---------------------------------------------------------------- 5


def test_corruption_statistics(criterion):
    with criterion(5, "corruption rate and mask-only scheme") as c:
        n = 100_000
        inputs, labels = mlm_corrupt(np.full(n, 42), 0.2, MASK_ONLY, np.random.default_rng(5))
        selected = labels != IGNORE_INDEX
        frac = selected.mean()
        bound = 3 * math.sqrt(0.2 * 0.8 / n)
        c.detail = f"selected {frac:.5f}, bound +/-{bound:.5f}"
        assert abs(frac - 0.2) <= bound
        assert (inputs[selected] == MASK_ID).all()
        assert (inputs[~selected] == 42).all()


# ---------------------------------------------------------------- 6


def test_mixture_sampler(criterion):
    with criterion(6, "length-mixture sampler frequencies and thresholds") as c:
        rng = np.random.default_rng(6)
        docs = [[5] * int(n) for n in rng.integers(10, 600, size=2000)]
        sampler = LengthMixtureSampler(docs, (128, 256), seed=6)
        n = 100_000
        counts = np.zeros(3)
        too_short = 0
        for _ in range(n):
            src, doc = sampler.draw((0.2, 0.4, 0.4), rng)
            counts[src] += 1
            too_short += (src == 1 and len(doc) <= 128) or (src == 2 and len(doc) <= 256)
        freqs = counts / n
        z = [(f - p) / math.sqrt(p * (1 - p) / n) for f, p in zip(freqs, (0.2, 0.4, 0.4))]
        c.detail = "z " + ", ".join(f"{v:+.2f}" for v in z)
        assert all(abs(v) <= 3 for v in z)
        assert too_short == 0


# ---------------------------------------------------------------- 7 and 10 share one pretrained model


@pytest.fixture(scope="module")
def topic_world(tmp_path_factory):
    """4x64 encoder pretrained at 64 tokens, then extended to 256 with the length mixture."""
    start = time.perf_counter()
    tok = Tokenizer(list(SPECIALS) + topic_vocabulary())
    texts = topic_markov_corpus(3400, median_len=60, seed=0)
    docs = [tok.encode(t, add_special=True) for t in texts]
    train, held_out = docs[:3000], docs[3000:]
    cfg = toy_config(n_layers=4, d_model=64, n_heads=4, vocab_size=tok.vocab_size, max_positions=512)
    plan = toy_plan(stages=(Stage(64, 200), Stage(256, 50, LONG_MIXTURE)))
    out = tmp_path_factory.mktemp("two_stage")
    res = pretrain(cfg, train, plan, out_dir=out)
    return dict(tok=tok, held_out=held_out, result=res, train_seconds=time.perf_counter() - start)


def test_two_stage_context_extension(criterion, topic_world):
    with criterion(7, "stage-2 model has lower pseudo-perplexity on (128, 256]") as c:
        start = time.perf_counter()
        res = topic_world["result"]
        assert [ck.step for ck in res.checkpoints] == [200, 250]
        assert max(b.longest for b in res.batch_log if b.stage == 0) <= 64
        assert max(b.longest for b in res.batch_log if b.stage == 1) > 128
        long_docs = [d for d in topic_world["held_out"] if 128 < len(d) <= 256][:12]
        stage1, stage2 = (load_model(ck.path) for ck in res.checkpoints)
        p1 = pppl_curve(stage1, long_docs, bins=(128, 256)).mean_in(128, 256)
        p2 = pppl_curve(stage2, long_docs, bins=(128, 256)).mean_in(128, 256)
        elapsed = topic_world["train_seconds"] + time.perf_counter() - start
        c.detail = f"stage1 {p1:.3f}, stage2 {p2:.3f} over {len(long_docs)} docs; {elapsed:.0f}s"
        assert p2 < p1
        assert elapsed < 30 * 60


# ---------------------------------------------------------------- 8


class _UniformLogits:
    def __init__(self, vocab):
        self.vocab = vocab

    def predict_at(self, ids, at):
        return np.zeros((len(at), self.vocab))


class _FixedLogits:
    def __init__(self, rows):
        self.rows = np.asarray(rows, dtype=np.float64)

    def predict_at(self, ids, at):
        return self.rows[np.asarray(at)]


def test_pseudo_perplexity_exactness(criterion):
    with criterion(8, "pseudo-perplexity uniform model and hand trace") as c:
        for v in (8, 205, 30_000):
            assert abs(pseudo_perplexity(_UniformLogits(v), [5, 6, 7, 5]) - v) <= 1e-6 * v
        # 64-bit hand oracle for tokens [5, 7, 5]
        logits = [
            [0, 0, 0, 0, 0, 2.0, 0.5, -1.0],
            [0, 0, 0, 0, 0, 0.1, 0.2, 0.4],
            [0, 0, 0, 0, 0, -1.0, 3.0, 1.0],
        ]
        want_losses = np.array([0.66762096352633516, 1.7768402632658231, 4.3383178638064037])
        want = 9.5919707042316285
        got = pseudo_perplexity(_FixedLogits(logits), [5, 7, 5])
        c.detail = f"hand trace {got:.10f}"
        np.testing.assert_allclose(token_losses(_FixedLogits(logits), [5, 7, 5]), want_losses, rtol=1e-5)
        assert abs(got - want) <= 1e-5 * want


# ---------------------------------------------------------------- 9


def test_info_nce_hand_cases(criterion):
    with criterion(9, "InfoNCE hand cases") as c:
        assert abs(info_nce(0.3, [0.3], 0.07) - math.log(2)) < 1e-9
        for k in (2, 7, 63):
            assert abs(info_nce(-0.1, [-0.1] * k, 0.05) - math.log(k + 1)) < 1e-9
        rng = np.random.default_rng(9)
        worst = 0.0
        for _ in range(200):
            s, negs, tau = rng.uniform(-1, 1), rng.uniform(-1, 1, 5), rng.uniform(0.02, 1)
            shift = rng.uniform(-3, 3)
            worst = max(worst, abs(info_nce(s + shift, negs + shift, tau) - info_nce(s, negs, tau)))
        c.detail = f"shift error {worst:.1e}"
        assert worst < 1e-6


# ---------------------------------------------------------------- 10


def test_contrastive_convergence(criterion, topic_world):
    with criterion(10, "contrastive fine-tune reaches acc@1 >= 0.95") as c:
        start = time.perf_counter()
        tok = topic_world["tok"]
        model = load_model(topic_world["result"].checkpoints[-1].path)
        split = split_pairs(paired_pattern_task(400, seed=0), 0.2, seed=0)
        steps = 600
        cfg = ContrastiveConfig(steps=steps, batch_size=32, lr=2e-3)
        before = pair_retrieval(model, tok, split.held_out).acc_at_1
        finetune_contrastive(model, tok, group_by_task(split.train), cfg)
        score = pair_retrieval(model, tok, split.held_out)
        elapsed = time.perf_counter() - start
        c.detail = f"acc@1 {before:.3f} -> {score.acc_at_1:.3f} after {steps} steps; {elapsed:.0f}s"
        assert steps <= 2000
        assert score.acc_at_1 >= 0.95
        assert elapsed < 10 * 60


# ---------------------------------------------------------------- 11


def test_adamw_trace(criterion):
    with criterion(11, "AdamW three-step scalar trace") as c:
        # 64-bit hand oracle: theta0 0.5, grads 0.3, -0.1, 0.2, lr 1e-3
        want = [0.49895000003333334, 0.4984957983497593, 0.4978374791553844]
        p = Tensor(np.array([0.5]), requires_grad=True)
        opt = AdamW(betas=(0.9, 0.95), eps=1e-8, weight_decay=0.1)
        errs = []
        with precision(np.float64):
            for g, w in zip((0.3, -0.1, 0.2), want):
                opt.step({"theta": p}, {"theta": np.array([g])}, 1e-3)
                errs.append(abs(float(p.data[0]) - w))
        c.detail = f"max error {max(errs):.1e}"
        assert max(errs) < 1e-7


# ---------------------------------------------------------------- 12


def test_neobert_preset(criterion):
    with criterion(12, "full-size preset parameter count and FFN widths") as c:
        n = param_count(neobert_config())
        c.detail = f"{n:,} parameters"
        assert 200e6 <= n <= 280e6
        assert ffn_hidden_size(768) == 2048
        assert ffn_hidden_size(1056) == 2816


# ---------------------------------------------------------------- 13


def test_determinism_and_persistence(criterion, tmp_path):
    with criterion(13, "bit-identical reruns and resumed loss trace") as c:
        tok = Tokenizer(list(SPECIALS) + topic_vocabulary())
        docs = [tok.encode(t, add_special=True) for t in topic_markov_corpus(400, median_len=40, seed=13)]
        cfg = toy_config(n_layers=2, d_model=32, n_heads=2, vocab_size=tok.vocab_size, max_positions=128, align64=False)
        plan = TrainPlan(
            peak_lr=2e-3, warmup_steps=2, batch_tokens=512, long_thresholds=(32, 64), seed=13,
            stages=(Stage(32, 8), Stage(128, 4, LONG_MIXTURE)),
        )
        runs = [pretrain(cfg, docs, plan, out_dir=tmp_path / name) for name in ("a", "b")]
        for ca, cb in zip(runs[0].checkpoints, runs[1].checkpoints):
            assert ca.path.read_bytes() == cb.path.read_bytes()
        reports = [pppl_curve(r.model, docs[:6], bins=(32, 64)).records_tsv() for r in runs]
        assert reports[0] == reports[1]
        resumed = Pretrainer.resume(runs[0].checkpoints[0].path, docs)
        resumed.run()
        assert resumed.losses == runs[0].losses[8:]
        c.detail = f"{len(runs[0].losses)} steps; resumed tail of {len(resumed.losses)} matches"


# ---------------------------------------------------------------- 14


def test_throughput_harness(criterion):
    with criterion(14, "throughput sweep recomputes exactly; absolute positions give unsupported rows") as c:
        seq_lens = [64, 128, 256, 1024]
        rope = toy_config(n_layers=4, d_model=64, n_heads=4, vocab_size=205, max_positions=512)
        absolute = rope.replace(positional="absolute")
        reps = [throughput_bench(m, seq_lens, max_batch=4, steps=2, repeats=2, warmup=1) for m in (rope, absolute)]
        for rep in reps:
            for row in rep.rows:
                if row.status == "ok":
                    assert rep.recompute(row) == row.tokens_per_sec
        abs_status = [r.status for r in reps[1].rows]
        assert abs_status == ["ok", "ok", "ok", "unsupported"]
        c.detail = "absolute: " + ", ".join(f"{r.seq_len}:{r.status}" for r in reps[1].rows)
