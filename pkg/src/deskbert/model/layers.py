"""Building blocks of the encoder block: norms, rotary positions, FFNs, attention.

All functions take and return :class:`~deskbert.autodiff.Tensor` and accept
arbitrary leading (batch) axes.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from ..autodiff import ACC, Tensor, _emit, as_tensor, gelu, matmul, mul, silu, softmax
from .config import ConfigError, RopeScaling


def rms_norm(x, gain, eps: float = 1e-5) -> Tensor:
    """``gain * x / sqrt(mean(x**2) + eps)`` over the last axis."""
    x, gain = as_tensor(x), as_tensor(gain)
    xd = x.data.astype(ACC)
    gd = gain.data.astype(ACC)
    d = xd.shape[-1]
    r = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    xhat = xd * r

    def vjp(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = r * (gh - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / d)
        gg = (g * xhat).reshape(-1, d).sum(axis=0) if gain.requires_grad else None
        return gx, gg

    return _emit(xhat * gd, (x, gain), vjp)


def layer_norm(x, gain, bias=None, eps: float = 1e-5) -> Tensor:
    x, gain = as_tensor(x), as_tensor(gain)
    xd = x.data.astype(ACC)
    gd = gain.data.astype(ACC)
    d = xd.shape[-1]
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    r = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * r
    y = xhat * gd
    inputs = [x, gain]
    if bias is not None:
        bias = as_tensor(bias)
        y = y + bias.data.astype(ACC)
        inputs.append(bias)

    def vjp(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = r * (
                gh
                - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        gg = (g * xhat).reshape(-1, d).sum(axis=0)
        out = [gx, gg]
        if bias is not None:
            out.append(g.reshape(-1, d).sum(axis=0))
        return tuple(out)

    return _emit(y, inputs, vjp)


def norm(kind: str, x, gain, bias=None, eps: float = 1e-5) -> Tensor:
    if kind == "rmsnorm":
        return rms_norm(x, gain, eps)
    return layer_norm(x, gain, bias, eps)


# ---------------------------------------------------------------------------
# rotary position embeddings


def rope_frequencies(d_head: int, theta: float = 10000.0, scaling: Optional[RopeScaling] = None) -> np.ndarray:
    """Per-pair angular frequencies ``theta ** (-2i / d_head)``, optionally YaRN-scaled."""
    if d_head % 2:
        raise ConfigError(f"rope needs an even head size, got {d_head}")
    freqs = theta ** (-np.arange(0, d_head, 2, dtype=ACC) / d_head)
    if scaling is None or scaling.factor == 1.0:
        return freqs
    # rotations completed over the original context, per band
    turns = scaling.original_max * freqs / (2.0 * math.pi)
    ramp = np.clip((turns - scaling.beta_slow) / (scaling.beta_fast - scaling.beta_slow), 0.0, 1.0)
    return freqs / scaling.factor * (1.0 - ramp) + freqs * ramp


def rope_mscale(scaling: Optional[RopeScaling]) -> float:
    if scaling is None or scaling.factor <= 1.0:
        return 1.0
    return 0.1 * math.log(scaling.factor) + 1.0


def rope_tables(positions, d_head: int, theta: float = 10000.0, scaling: Optional[RopeScaling] = None):
    """cos/sin tables of shape ``positions.shape + (1, d_head // 2)`` (the 1 broadcasts over heads)."""
    pos = np.asarray(positions, dtype=ACC)
    ang = pos[..., None] * rope_frequencies(d_head, theta, scaling)
    m = rope_mscale(scaling)
    return (np.cos(ang) * m)[..., None, :], (np.sin(ang) * m)[..., None, :]


def rotate_pairs(x, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate consecutive pairs ``(x[2i], x[2i+1])`` of the last axis by the tabulated angles."""
    x = as_tensor(x)
    shape = x.shape
    xd = x.data.astype(ACC).reshape(shape[:-1] + (shape[-1] // 2, 2))
    x0, x1 = xd[..., 0], xd[..., 1]
    out = np.stack((x0 * cos - x1 * sin, x0 * sin + x1 * cos), axis=-1).reshape(shape)

    def vjp(g):
        g = g.reshape(shape[:-1] + (shape[-1] // 2, 2))
        g0, g1 = g[..., 0], g[..., 1]
        return (np.stack((g0 * cos + g1 * sin, -g0 * sin + g1 * cos), axis=-1).reshape(shape),)

    return _emit(out, (x,), vjp)


def rope_apply(q_or_k, positions, theta: float = 10000.0, scaling: Optional[RopeScaling] = None) -> Tensor:
    """Apply rotary embeddings to ``[..., seq, n_heads, d_head]`` at integer ``positions`` ``[..., seq]``."""
    x = as_tensor(q_or_k)
    pos = np.asarray(positions)
    if pos.shape != x.shape[:-2]:
        raise ValueError(f"positions shape {pos.shape} does not match sequence axes {x.shape[:-2]}")
    cos, sin = rope_tables(pos, x.shape[-1], theta, scaling)
    return rotate_pairs(x, cos, sin)


# ---------------------------------------------------------------------------
# feed-forward


def linear(x, weight, bias=None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else y + bias


def swiglu_ffn(x, w1, w2, w3, b1=None, b2=None, b3=None) -> Tensor:
    """``(silu(x W1) * (x W3)) W2`` with W1, W3: [d, h] and W2: [h, d]."""
    x = as_tensor(x)
    for name, w, shape in (("W1", w1, (x.shape[-1], None)), ("W3", w3, (x.shape[-1], None))):
        if as_tensor(w).shape[0] != shape[0]:
            raise ValueError(f"{name} has shape {as_tensor(w).shape}, expected leading dim {shape[0]}")
    if as_tensor(w2).shape[0] != as_tensor(w1).shape[1]:
        raise ValueError(f"W2 has shape {as_tensor(w2).shape}, expected leading dim {as_tensor(w1).shape[1]}")
    gate = silu(linear(x, w1, b1))
    return linear(mul(gate, linear(x, w3, b3)), w2, b2)


def gelu_ffn(x, w1, w2, b1=None, b2=None) -> Tensor:
    return linear(gelu(linear(x, w1, b1)), w2, b2)


# ---------------------------------------------------------------------------
# attention


def attention_bias(allowed: np.ndarray) -> np.ndarray:
    """Additive mask: 0 where attention is allowed, -inf elsewhere."""
    return np.where(allowed, 0.0, -np.inf).astype(np.float32)


def attention(q, k, v, mask: Optional[np.ndarray] = None) -> Tensor:
    """Exact scaled dot-product attention on ``[..., seq, n_heads, d_head]`` inputs.

    ``mask`` is a boolean ``[..., seq, seq]`` array (query, key) of permitted
    pairs, or None for full attention. Queries with no permitted key produce
    zeros.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if not (q.shape == k.shape == v.shape):
        raise ValueError(f"q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    nd = q.ndim
    lead = tuple(range(nd - 3))
    to_heads = lead + (nd - 2, nd - 3, nd - 1)  # [..., H, S, D]
    qh, kh, vh = (t.transpose(to_heads) for t in (q * (1.0 / math.sqrt(q.shape[-1])), k, v))
    scores = matmul(qh, kh.transpose(lead + (nd - 3, nd - 1, nd - 2)))
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if m.shape[-2:] != (q.shape[-3], q.shape[-3]):
            raise ValueError(f"mask shape {m.shape} does not cover seq={q.shape[-3]}")
        scores = scores + np.expand_dims(attention_bias(m), -3)
    probs = softmax(scores, axis=-1)
    return matmul(probs, vh).transpose(to_heads)
