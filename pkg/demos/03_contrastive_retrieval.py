# %% [markdown]
# # From encoder to sentence embedder
#
# Each query shares a three-word key with its positive and almost all of it
# with a hard negative. InfoNCE with in-batch negatives teaches mean-pooled
# embeddings to find the key.

# %%
from deskbert.contrastive import ContrastiveConfig, finetune_contrastive, group_by_task, split_pairs
from deskbert.data.synthetic import paired_pattern_task, topic_vocabulary
from deskbert.data.tokenizer import SPECIALS, Tokenizer
from deskbert.eval.retrieval import pair_retrieval
from deskbert.model.config import toy_config
from deskbert.model.encoder import Encoder

tok = Tokenizer(list(SPECIALS) + topic_vocabulary())
pairs = paired_pattern_task(400, seed=0)
print(pairs[0])
split = split_pairs(pairs, 0.2, seed=0)

# %%
model = Encoder(toy_config(n_layers=2, d_model=64, n_heads=4, vocab_size=tok.vocab_size), seed=0)
print("before:", pair_retrieval(model, tok, split.held_out))

# %%
history = []
cfg = ContrastiveConfig(steps=150, batch_size=32, lr=2e-3)
finetune_contrastive(model, tok, group_by_task(split.train), cfg, history)
print("loss", round(history[0][1], 3), "->", round(history[-1][1], 3))
score = pair_retrieval(model, tok, split.held_out)
print(f"after: acc@1 {score.acc_at_1:.3f}  MRR {score.mrr:.3f}")
