"""Bidirectional transformer encoder with switchable architectural choices."""

from __future__ import annotations

from typing import Mapping, Optional, Sequence, Union

import numpy as np

from ..autodiff import Tensor, add, as_tensor, gather_rows, matmul, reshape
from ..data.packing import Collated, PackedBatch, collate
from .config import ModelConfig, param_specs
from .layers import attention, gelu_ffn, linear, norm, rope_apply, swiglu_ffn

INIT_STD = 0.02

Params = Mapping[str, Tensor]
BatchLike = Union[PackedBatch, Sequence[PackedBatch], Collated]


def init_params(cfg: ModelConfig, rng: Optional[np.random.Generator] = None) -> dict[str, Tensor]:
    """Normal(0, 0.02) matrices, unit norm gains, zero biases."""
    rng = rng if rng is not None else np.random.default_rng(0)
    params = {}
    for spec in param_specs(cfg):
        if spec.kind in ("linear", "embedding"):
            data = rng.normal(0.0, INIT_STD, size=spec.shape)
        elif spec.name.endswith(".gain"):
            data = np.ones(spec.shape)
        else:
            data = np.zeros(spec.shape)
        params[spec.name] = Tensor(data, requires_grad=True, name=spec.name)
    return params


def _as_collated(batch: BatchLike) -> Collated:
    return batch if isinstance(batch, Collated) else collate(batch)


def _check_inputs(cfg: ModelConfig, col: Collated) -> None:
    ids = col.token_ids
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        bad = int(ids[(ids < 0) | (ids >= cfg.vocab_size)][0])
        raise ValueError(f"unknown token id {bad} for vocab_size={cfg.vocab_size}")
    if col.positions.size and col.positions.max() >= cfg.position_capacity():
        raise ValueError(
            f"position {int(col.positions.max())} exceeds the model's position range "
            f"({cfg.position_capacity()})"
        )


def _bias(params: Params, name: str):
    return params.get(name)


def _attention_block(cfg: ModelConfig, params: Params, p: str, x: Tensor, positions, mask) -> Tensor:
    b, w, d = x.shape
    h, dh = cfg.n_heads, cfg.d_head

    def proj(name):
        return reshape(linear(x, params[f"{p}.attn.{name}.weight"], _bias(params, f"{p}.attn.{name}.bias")), (b, w, h, dh))

    q, k, v = proj("wq"), proj("wk"), proj("wv")
    if cfg.positional == "rope":
        q = rope_apply(q, positions, cfg.rope_theta, cfg.rope_scaling)
        k = rope_apply(k, positions, cfg.rope_theta, cfg.rope_scaling)
    ctx = reshape(attention(q, k, v, mask), (b, w, d))
    return linear(ctx, params[f"{p}.attn.wo.weight"], _bias(params, f"{p}.attn.wo.bias"))


def _ffn_block(cfg: ModelConfig, params: Params, p: str, x: Tensor) -> Tensor:
    w = lambda n: params[f"{p}.ffn.{n}.weight"]  # noqa: E731
    bias = lambda n: _bias(params, f"{p}.ffn.{n}.bias")  # noqa: E731
    if cfg.activation == "swiglu":
        return swiglu_ffn(x, w("w1"), w("w2"), w("w3"), bias("w1"), bias("w2"), bias("w3"))
    return gelu_ffn(x, w("w1"), w("w2"), bias("w1"), bias("w2"))


def _norm(cfg: ModelConfig, params: Params, prefix: str, x: Tensor) -> Tensor:
    return norm(cfg.norm, x, params[f"{prefix}.gain"], params.get(f"{prefix}.bias"), cfg.norm_eps)


def hidden_states(cfg: ModelConfig, params: Params, batch: BatchLike) -> Tensor:
    """Final hidden states as a ``[B, W, d_model]`` tensor for collated rows."""
    col = _as_collated(batch)
    _check_inputs(cfg, col)
    b, w = col.shape
    x = reshape(gather_rows(params["embed.tokens"], col.token_ids.reshape(-1)), (b, w, cfg.d_model))
    if cfg.positional == "absolute":
        pos = reshape(gather_rows(params["embed.positions"], col.positions.reshape(-1)), (b, w, cfg.d_model))
        x = add(x, pos)
    mask = col.attention_mask()
    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        if cfg.norm_placement == "pre":
            x = x + _attention_block(cfg, params, p, _norm(cfg, params, f"{p}.attn_norm", x), col.positions, mask)
            x = x + _ffn_block(cfg, params, p, _norm(cfg, params, f"{p}.ffn_norm", x))
        else:
            x = _norm(cfg, params, f"{p}.attn_norm", x + _attention_block(cfg, params, p, x, col.positions, mask))
            x = _norm(cfg, params, f"{p}.ffn_norm", x + _ffn_block(cfg, params, p, x))
    if cfg.norm_placement == "pre":
        x = _norm(cfg, params, "final_norm", x)
    return x


def encoder_forward(cfg: ModelConfig, params: Params, batch: BatchLike) -> Tensor:
    """Hidden states ``[total_tokens, d_model]`` for every non-padding token, rows concatenated."""
    col = _as_collated(batch)
    hs = hidden_states(cfg, params, col)
    flat = reshape(hs, (-1, cfg.d_model))
    real = np.nonzero(col.seq_ids.reshape(-1) >= 0)[0]
    if real.size == flat.shape[0]:
        return flat
    return gather_rows(flat, real)


def mlm_logits(cfg: ModelConfig, params: Params, hidden) -> Tensor:
    """Vocabulary logits ``hidden @ E^T (+ bias)`` with E the (tied) output embedding."""
    weight = params["embed.tokens"] if cfg.tie_mlm_head else params["mlm.weight"]
    logits = matmul(as_tensor(hidden), weight.T)
    if cfg.mlm_bias:
        logits = logits + params["mlm.bias"]
    return logits


def mean_pool(hidden, valid) -> Tensor:
    """Average of the rows of ``hidden`` ``[..., n, d]`` flagged in ``valid`` ``[..., n]``."""
    hidden = as_tensor(hidden)
    v = np.asarray(valid, dtype=bool)
    if v.shape != hidden.shape[:-1]:
        raise ValueError(f"valid mask shape {v.shape} does not match tokens {hidden.shape[:-1]}")
    counts = v.sum(axis=-1, keepdims=True)
    if (counts == 0).any():
        raise ValueError("mean_pool needs at least one valid token per sequence")
    weights = (v / counts)[..., None, :]  # [..., 1, n]
    pooled = matmul(Tensor(weights), hidden)
    return reshape(pooled, pooled.shape[:-2] + (hidden.shape[-1],))


class Encoder:
    """A configuration plus its parameter registry."""

    def __init__(self, cfg: ModelConfig, params: Optional[dict[str, Tensor]] = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, np.random.default_rng(seed))
        expected = [s.name for s in param_specs(cfg)]
        if sorted(self.params) != sorted(expected):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ValueError(f"parameter registry mismatch; missing={missing[:5]} extra={extra[:5]}")

    def __repr__(self) -> str:
        c = self.cfg
        return f"Encoder(L={c.n_layers}, d={c.d_model}, heads={c.n_heads}, params={self.num_parameters():,})"

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "Encoder":
        return Encoder(self.cfg, {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()})

    def hidden_states(self, batch: BatchLike) -> Tensor:
        return hidden_states(self.cfg, self.params, batch)

    def forward(self, batch: BatchLike) -> Tensor:
        return encoder_forward(self.cfg, self.params, batch)

    __call__ = forward

    def mlm_logits(self, hidden) -> Tensor:
        return mlm_logits(self.cfg, self.params, hidden)

    def predict_at(self, token_ids: np.ndarray, at: np.ndarray) -> np.ndarray:
        """Logits ``[B, V]`` at column ``at[b]`` of each unpadded row ``token_ids[b]``."""
        ids = np.asarray(token_ids, dtype=np.int64)
        b, w = ids.shape
        pos = np.broadcast_to(np.arange(w), (b, w))
        sid = np.zeros((b, w), dtype=np.int64)
        col = Collated(ids, pos, sid, np.full((b, w), -100), np.full(b, w), "padded")
        hs = self.hidden_states(col)
        flat = reshape(hs, (-1, self.cfg.d_model))
        picked = gather_rows(flat, np.arange(b) * w + np.asarray(at))
        return self.mlm_logits(picked).data

    def embed_tokens(self, rows: Sequence[Sequence[int]]) -> Tensor:
        """Mean-pooled hidden state per token sequence, ``[n, d_model]``."""
        batch = [PackedBatch(r, np.arange(len(r)), np.zeros(len(r)), np.full(len(r), -100)) for r in rows]
        col = collate(batch)
        hs = self.hidden_states(col)
        return mean_pool(hs, col.seq_ids >= 0)
