# %% [markdown]
# # Two-stage pretraining on a synthetic corpus
#
# Train a small encoder on short windows, then keep going on longer ones
# with a length-biased mix of documents. Pseudo-perplexity on long held-out
# documents should drop after the second stage.
#
# This is the quick version (about a minute); the acceptance suite runs a
# longer schedule.

# %%
import numpy as np

from deskbert.data.synthetic import topic_markov_corpus, topic_vocabulary
from deskbert.data.tokenizer import SPECIALS, Tokenizer
from deskbert.eval.pppl import pppl_curve
from deskbert.model.config import toy_config
from deskbert.train.plan import LONG_MIXTURE, Stage, toy_plan
from deskbert.train.pretrain import load_model, pretrain

tok = Tokenizer(list(SPECIALS) + topic_vocabulary())
texts = topic_markov_corpus(2200, median_len=60, seed=0)
docs = [tok.encode(t, add_special=True) for t in texts]
train, held_out = docs[:2000], docs[2000:]
print("docs longer than 128 tokens:", sum(len(d) > 128 for d in train))

# %%
cfg = toy_config(n_layers=2, d_model=64, n_heads=4, vocab_size=tok.vocab_size, max_positions=512)
plan = toy_plan(stages=(Stage(64, 120), Stage(256, 30, LONG_MIXTURE)))
res = pretrain(cfg, train, plan, out_dir="demo_runs/two_stage")
print("first losses", np.round(res.losses[:3], 3), " last", np.round(res.losses[-3:], 3))
print("longest sequence seen per stage:",
      [max(b.longest for b in res.batch_log if b.stage == s) for s in (0, 1)])

# %% [markdown]
# Score both checkpoints on the same long documents.

# %%
long_docs = [d for d in held_out if 128 < len(d) <= 256][:6]
for ck in res.checkpoints:
    rep = pppl_curve(load_model(ck.path), long_docs, bins=(128, 256))
    print(f"after stage {ck.stage + 1} (step {ck.step}): pppl {rep.mean_in(128, 256):.2f}")
