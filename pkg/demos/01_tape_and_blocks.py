# %% [markdown]
# # The tape and the blocks
#
# A quick tour of the autodiff core and the three pieces every layer is
# built from: RMSNorm, rotary attention and the SwiGLU feed-forward.

# %%
import numpy as np

from deskbert.autodiff import GradTape, Tensor, backward
from deskbert.data.packing import collate, pack_sequences
from deskbert.gradcheck import grad_check
from deskbert.model.config import toy_config
from deskbert.model.encoder import Encoder
from deskbert.model.layers import rms_norm, rope_apply, swiglu_ffn

rng = np.random.default_rng(0)

# %% [markdown]
# Gradients come from a tape. Anything computed inside `GradTape()` can be
# differentiated afterwards.

# %%
x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
with GradTape():
    y = (x * x).sum()
grads = backward(y)
print(np.allclose(grads[x].data, 2 * x.data))

# %% [markdown]
# Central differences agree with the tape on each block (relative error):

# %%
g = Tensor(np.ones(8))
w1, w3 = Tensor(rng.normal(size=(8, 16))), Tensor(rng.normal(size=(8, 16)))
w2 = Tensor(rng.normal(size=(16, 8)))
h = Tensor(rng.normal(size=(5, 8)), requires_grad=True)
print("rms_norm ", grad_check(lambda t: (rms_norm(t, g) ** 3).sum(), h))
print("swiglu   ", grad_check(lambda t: (swiglu_ffn(t, w1, w2, w3) ** 2).sum(), h))

# %% [markdown]
# Rotary embeddings make query-key scores depend only on the distance
# between positions. Shift every position by 100 and the scores stay put.

# %%
q, k = Tensor(rng.normal(size=(6, 1, 16))), Tensor(rng.normal(size=(6, 1, 16)))
pos = np.arange(6)
a = np.einsum("ihd,jhd->ij", rope_apply(q, pos).data, rope_apply(k, pos).data)
b = np.einsum("ihd,jhd->ij", rope_apply(q, pos + 100).data, rope_apply(k, pos + 100).data)
print("max score change:", np.abs(a - b).max())

# %% [markdown]
# Packing several documents into one row is only safe with a
# block-diagonal mask. Without it, document 0 "sees" its neighbour.

# %%
model = Encoder(toy_config(n_layers=2, d_model=32, n_heads=4, vocab_size=60, align64=False), seed=0)
doc, other, other_alt = [5, 9, 12, 7], [20, 21, 22], [40, 41, 42]
for mode in ("packed-naive", "packed-block-diagonal"):
    ha = model.hidden_states(collate(pack_sequences([doc, other], 7, mode))).data[0, :4]
    hb = model.hidden_states(collate(pack_sequences([doc, other_alt], 7, mode))).data[0, :4]
    print(f"{mode:22s} change in doc 0: {np.abs(ha - hb).max():.2e}")
